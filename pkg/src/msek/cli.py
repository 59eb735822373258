"""Command line entry points: serve the simulator, run the adaptation loop,
run the reactive baseline, compare two runs, generate traces."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .baseline import ReactiveEngine
from .harness import (
    RunSetup,
    build_setup,
    compare,
    load_config_file,
    load_summary,
    periods_for,
    render_comparison,
    run_experiment,
)
from .service import ProtocolHandler, SimServer
from .sim import ArrivalTrace, Simulator, worldcup_like_trace


def _load_trace(path: str | None) -> ArrivalTrace:
    if path is None:
        return worldcup_like_trace()
    return ArrivalTrace.from_csv(Path(path).read_text(encoding="utf-8"))


def _setup_from_args(args) -> RunSetup:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    setup = build_setup(values)
    if getattr(args, "seed", None) is not None:
        setup.seed = args.seed
    return setup


def _parse_connect(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_sim(args) -> int:
    setup = _setup_from_args(args)
    trace = _load_trace(args.trace)
    sim = Simulator(
        setup.system,
        trace,
        seed=setup.seed,
        initial_servers=setup.initial_servers,
        initial_dimmer=setup.initial_dimmer,
    )
    server = SimServer(ProtocolHandler(sim), host=args.host, port=args.port)
    print(f"simulator listening on {server.host}:{server.port} (seed={setup.seed})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def _run_common(args, engine_kind: str, engine_factory=None, verify: bool = True) -> int:
    setup = _setup_from_args(args)
    setup.engine.kind = engine_kind
    setup.verify_decisions = verify and not getattr(args, "no_verify", False)
    if getattr(args, "transcript", None):
        setup.engine.replay_path = Path(args.transcript)
    connect = _parse_connect(args.connect) if getattr(args, "connect", None) else None
    trace = None if connect else _load_trace(args.trace)
    if engine_kind == "http" and setup.engine.timeout >= setup.system.control_period:
        print("error: engine timeout must be strictly less than the control period")
        return 2
    report = run_experiment(
        setup,
        trace,
        Path(args.out),
        engine=engine_factory(setup) if engine_factory else None,
        periods=args.periods,
        connect=connect,
        progress=not args.quiet,
    )
    totals = report.totals(setup.system.rt_threshold)
    print(
        f"run {report.metadata['run_id']}: {len(report.rows)} periods, "
        f"utility={totals['utility']:.1f}, mean_rt={totals['mean_rt']:.4f}s, "
        f"max_rt={totals['max_rt']:.4f}s -> {args.out}"
    )
    if report.metadata["aborted"]:
        print(f"aborted: {report.metadata['abort_reason']}")
        return 1
    return 0


def cmd_run(args) -> int:
    if args.engine == "replay" and not args.transcript:
        print("error: --engine replay requires --transcript")
        return 2
    return _run_common(args, args.engine)


def cmd_baseline(args) -> int:
    # the reactive manager has no verifier stage
    return _run_common(
        args, "reactive", engine_factory=lambda s: ReactiveEngine(s.thresholds), verify=False
    )


def cmd_compare(args) -> int:
    summary_a = load_summary(Path(args.run_a))
    summary_b = load_summary(Path(args.run_b))
    result = compare(summary_a, summary_b)
    print(render_comparison(result, Path(args.run_a).name, Path(args.run_b).name))
    return 0


def cmd_trace_gen(args) -> int:
    if args.kind != "worldcup-like":
        print(f"error: unknown trace kind {args.kind!r}")
        return 2
    trace = worldcup_like_trace()
    Path(args.out).write_text(trace.to_csv(), encoding="utf-8")
    periods = periods_for(trace, 200.0)
    print(f"wrote {args.out}: {len(trace.segments)} segments, "
          f"{trace.duration:.0f}s ({periods} control periods of 200s)")
    return 0


def _add_run_opts(p: argparse.ArgumentParser):
    p.add_argument("--out", required=True, help="output directory for run artifacts")
    p.add_argument("--seed", type=int, default=None, help="simulator RNG seed")
    p.add_argument("--trace", default=None, help="trace CSV (default: bundled workload)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--periods", type=int, default=None,
                   help="control periods to run (default: trace duration / control period)")
    p.add_argument("--connect", default=None, metavar="HOST:PORT",
                   help="use an already-running simulator instead of embedding one")
    p.add_argument("--quiet", action="store_true", help="suppress per-period progress")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="msek", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("sim", help="serve the managed-system simulator over TCP")
    p_sim.add_argument("--host", default="127.0.0.1")
    p_sim.add_argument("--port", type=int, default=4242)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--trace", default=None)
    p_sim.add_argument("--config", default=None)
    p_sim.set_defaults(func=cmd_sim)

    p_run = sub.add_parser("run", help="run the adaptation loop")
    p_run.add_argument("--engine", choices=("http", "mock", "replay"), default="mock")
    p_run.add_argument("--no-verify", action="store_true",
                       help="skip the verifier (execute decisions as proposed)")
    p_run.add_argument("--transcript", default=None,
                       help="recorded transcript for --engine replay")
    _add_run_opts(p_run)
    p_run.set_defaults(func=cmd_run)

    p_base = sub.add_parser("baseline", help="run the reactive threshold manager")
    _add_run_opts(p_base)
    p_base.set_defaults(func=cmd_baseline)

    p_cmp = sub.add_parser("compare", help="compare two finished runs")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    p_cmp.set_defaults(func=cmd_compare)

    p_trace = sub.add_parser("trace", help="trace utilities")
    trace_sub = p_trace.add_subparsers(dest="trace_command", required=True)
    p_gen = trace_sub.add_parser("gen", help="generate a workload trace CSV")
    p_gen.add_argument("--kind", default="worldcup-like")
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_trace_gen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
