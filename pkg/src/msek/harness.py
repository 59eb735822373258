"""Experiment harness: drives the managed system period by period through the
monitor -> synthesize -> verify -> execute loop, scores utility, and writes
reproducible artifacts (report.csv, summary.json, timeline.svg, history.jsonl,
transcript.txt, events.log).

Virtual time is pushed forward with `advance <control_period>`, so a full
105-minute experiment finishes in seconds while keeping the timing semantics.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .baseline import ReactiveThresholds
from .core import (
    Action,
    AdaptationDecision,
    DecisionDecodeError,
    SystemConfig,
    decode_decision,
    encode_decision,
    format_number,
)
from .execute import (
    EffectorRejected,
    EffectorTimeout,
    best_verified_decision,
    execute,
    verify,
)
from .knowledge import Knowledge, default_template, load_template
from .monitor import collect_context, drain_event_log
from .service import LocalClient, ProbeTimeout, ProtocolError, ProtocolHandler, TcpClient
from .sim import ArrivalTrace, Simulator
from .synthesize import (
    BudgetTooSmall,
    EngineConfig,
    EngineError,
    MockOracleEngine,
    ResponseParseError,
    build_engine,
    escape_transcript_line,
    generate_prompt,
    parse_response,
)

DEFAULT_SEED = 1
MAX_REJECTION_RETRIES = 2

REPORT_COLUMNS = (
    "time_s",
    "dimmer",
    "active_servers",
    "max_servers",
    "utilization",
    "avg_rt_s",
    "arrival_rate_rps",
    "action",
    "arg",
    "verdict",
    "utility_inc",
)

ACTION_NAMES = {
    Action.SET_DIMMER: "set_dimmer",
    Action.ADD_SERVER: "add_server",
    Action.REMOVE_SERVER: "remove_server",
    Action.DO_NOTHING: "do_nothing",
}


class TraceMismatch(ValueError):
    pass


@dataclass(frozen=True)
class UtilityParams:
    """Revenue per request split by content tier, with a latency penalty and a
    linear server cost. The latency bar here (default 0.75 s) is the revenue
    penalty knee, not the manager's stability threshold."""

    revenue_optional: float = 1.5
    revenue_mandatory: float = 1.0
    server_cost: float = 0.1
    rt_threshold: float = 0.75
    penalty_multiplier: float = 1.0

    def __post_init__(self):
        if not self.revenue_optional > self.revenue_mandatory > 0:
            raise ValueError("need revenue_optional > revenue_mandatory > 0")
        if self.server_cost < 0 or self.penalty_multiplier < 0:
            raise ValueError("costs must be >= 0")
        if self.rt_threshold <= 0:
            raise ValueError("rt_threshold must be > 0")


def utility_increment(
    period_s: float,
    arrival_rate: float,
    dimmer: float,
    servers: int,
    mean_rt: float,
    p: UtilityParams,
) -> float:
    if mean_rt <= p.rt_threshold:
        per_request = dimmer * p.revenue_optional + (1.0 - dimmer) * p.revenue_mandatory
        revenue = period_s * arrival_rate * per_request
    else:
        fade = max(0.0, 1.0 - mean_rt / (2.0 * p.rt_threshold))
        revenue = period_s * arrival_rate * p.revenue_mandatory * p.penalty_multiplier * fade
    return revenue - period_s * servers * p.server_cost


@dataclass
class PeriodRow:
    time_s: float
    dimmer: float
    active_servers: int
    max_servers: int
    utilization: float
    avg_rt_s: float
    arrival_rate_rps: float
    action: int
    arg: float | None
    verdict: str
    utility_inc: float

    def csv_values(self) -> list[str]:
        return [
            format_number(self.time_s),
            format_number(self.dimmer),
            str(self.active_servers),
            str(self.max_servers),
            format_number(self.utilization),
            format_number(self.avg_rt_s),
            format_number(self.arrival_rate_rps),
            str(self.action),
            "" if self.arg is None else format_number(self.arg),
            self.verdict,
            format_number(self.utility_inc),
        ]


@dataclass
class RunReport:
    rows: list[PeriodRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def totals(self, stability_rt: float = 0.1) -> dict:
        rts = [r.avg_rt_s for r in self.rows]
        counts = {name: 0 for name in ACTION_NAMES.values()}
        for r in self.rows:
            counts[ACTION_NAMES[Action(r.action)]] += 1
        if not rts:
            return {
                "utility": 0.0,
                "mean_rt": 0.0,
                "p95_rt": 0.0,
                "max_rt": 0.0,
                "rt_ok_fraction": 0.0,
                "decision_counts": counts,
            }
        ordered = sorted(rts)
        p95_index = max(0, math.ceil(0.95 * len(ordered)) - 1)
        return {
            "utility": sum(r.utility_inc for r in self.rows),
            "mean_rt": sum(rts) / len(rts),
            "p95_rt": ordered[p95_index],
            "max_rt": max(rts),
            "rt_ok_fraction": sum(1 for rt in rts if rt <= stability_rt) / len(rts),
            "decision_counts": counts,
        }


@dataclass
class RunSetup:
    """Everything a run needs beyond the trace: managed-system parameters,
    scoring, baseline thresholds, engine transport, and initial conditions."""

    system: SystemConfig = field(default_factory=SystemConfig)
    utility: UtilityParams = field(default_factory=UtilityParams)
    thresholds: ReactiveThresholds = field(default_factory=ReactiveThresholds)
    engine: EngineConfig = field(default_factory=EngineConfig)
    initial_servers: int = 3
    initial_dimmer: float = 0.9
    seed: int = DEFAULT_SEED
    verify_decisions: bool = True
    templates_dir: Path | None = None

    def config_hash(self) -> str:
        payload = {
            "system": vars(self.system).copy(),
            "utility": vars(self.utility).copy(),
            "thresholds": vars(self.thresholds).copy(),
            "engine": {
                "kind": self.engine.kind,
                "model": self.engine.model,
                "temperature": self.engine.temperature,
            },
            "initial_servers": self.initial_servers,
            "initial_dimmer": self.initial_dimmer,
            "verify": self.verify_decisions,
        }
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def trace_id_of(trace: ArrivalTrace) -> str:
    return hashlib.sha256(trace.to_csv().encode()).hexdigest()[:12]


def run_mse_loop(
    engine,
    client,
    knowledge: Knowledge,
    setup: RunSetup,
    periods: int,
    metadata: dict,
    transcript_fh=None,
    progress: bool = False,
) -> RunReport:
    """One decision per control period; on an unrecoverable engine or
    transport failure the partial report is returned with aborted=True."""
    report = RunReport(metadata=dict(metadata))
    report.metadata.update({"periods_planned": periods, "aborted": False, "abort_reason": ""})
    cfg = setup.system
    fallback_oracle = MockOracleEngine(cfg.rt_threshold)

    def record_raw(raw: str):
        if transcript_fh is not None:
            transcript_fh.write(escape_transcript_line(raw) + "\n")
            transcript_fh.flush()

    for period in range(1, periods + 1):
        try:
            reply = client.request(f"advance {format_number(cfg.control_period)}")
            if reply != "OK":
                raise ProtocolError(f"advance failed: {reply!r}")
            snapshot = collect_context(client)
            knowledge.record_events(drain_event_log(client))

            final: AdaptationDecision | None = None
            verdict_label = "unverified"
            feedback = None
            skip_execute = False
            for attempt in range(MAX_REJECTION_RETRIES + 1):
                try:
                    prompt = generate_prompt(
                        snapshot, knowledge.history, knowledge.template, cfg.token_budget, feedback
                    )
                except BudgetTooSmall:
                    if attempt == 0:
                        raise  # config error: not even the bare prompt fits
                    break  # rejection feedback no longer fits: go to fallback
                raw = engine.invoke(prompt)
                record_raw(raw)
                try:
                    proposal = parse_response(raw)
                except (ResponseParseError, DecisionDecodeError):
                    if attempt == 0:
                        # nothing to vet: hold steady for this period
                        final = AdaptationDecision(Action.DO_NOTHING, raw_text=raw)
                        verdict_label = "no_decision"
                        skip_execute = True
                        break
                    continue  # burned a retry on an unparseable reply
                if not setup.verify_decisions:
                    final = proposal
                    verdict_label = "unverified"
                    break
                verdict = verify(proposal, snapshot, cfg)
                if attempt == 0:
                    verdict_label = verdict.reason
                if verdict.accepted:
                    final = proposal
                    break
                feedback = (
                    f"Your decision '{encode_decision(proposal)}' was rejected "
                    f"({verdict.reason}; predicted avg response time "
                    f"{format_number(round(verdict.predicted_rt, 6))} s, threshold "
                    f"{format_number(cfg.rt_threshold)} s). Propose a different action."
                )
            if final is None:
                # retries exhausted: rule-oracle suggestion, else the best
                # verified alternative (always exists and always passes)
                suggestion = decode_decision(fallback_oracle.decide_text(snapshot))
                if verify(suggestion, snapshot, cfg).accepted:
                    final = suggestion
                else:
                    final = best_verified_decision(snapshot, cfg)

            if not skip_execute:
                # a rejected decision must never reach the effectors
                assert not setup.verify_decisions or verify(final, snapshot, cfg).accepted
                try:
                    execute(final, client)
                except EffectorRejected:
                    verdict_label = "effector_rejected"

            knowledge.append(snapshot, final)
        except (ProbeTimeout, ProtocolError, EngineError, EffectorTimeout, BudgetTooSmall) as exc:
            report.metadata["aborted"] = True
            report.metadata["abort_reason"] = f"{type(exc).__name__}: {exc}"
            break

        row = PeriodRow(
            time_s=snapshot.sim_time,
            dimmer=snapshot.dimmer,
            active_servers=snapshot.active_servers,
            max_servers=snapshot.max_servers,
            utilization=snapshot.utilization,
            avg_rt_s=snapshot.avg_response_time,
            arrival_rate_rps=snapshot.arrival_rate,
            action=int(final.action),
            arg=final.argument,
            verdict=verdict_label,
            utility_inc=utility_increment(
                cfg.control_period,
                snapshot.arrival_rate,
                snapshot.dimmer,
                snapshot.active_servers,
                snapshot.avg_response_time,
                setup.utility,
            ),
        )
        report.rows.append(row)
        if progress:
            print(
                f"period {period:>3}/{periods} t={format_number(snapshot.sim_time)}"
                f" rt={snapshot.avg_response_time:.4f}s rate={snapshot.arrival_rate:.1f}/s"
                f" -> {encode_decision(final)} [{verdict_label}]"
            )
    return report


def render_csv(report: RunReport) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in report.rows:
        lines.append(",".join(row.csv_values()))
    return "\n".join(lines) + "\n"


def emit_outputs(report: RunReport, out_dir: Path, stability_rt: float = 0.1) -> dict:
    """Write report.csv (always), summary.json (always), timeline.svg (when
    there is at least one row). Returns the summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(render_csv(report), encoding="utf-8")
    summary = {
        **report.metadata,
        "periods_completed": len(report.rows),
        "totals": report.totals(stability_rt),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if report.rows:
        _plot_timeline(report, out_dir / "timeline.svg")
    return summary


def _plot_timeline(report: RunReport, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = [r.time_s for r in report.rows]
    fig, axes = plt.subplots(4, 1, sharex=True, figsize=(8, 8))
    panels = [
        ("arrival rate (req/s)", [r.arrival_rate_rps for r in report.rows], "tab:blue"),
        ("active servers", [r.active_servers for r in report.rows], "tab:orange"),
        ("dimmer", [r.dimmer for r in report.rows], "tab:green"),
        ("avg response time (s)", [r.avg_rt_s for r in report.rows], "tab:red"),
    ]
    for ax, (label, series, color) in zip(axes, panels):
        ax.step(t, series, where="post", color=color)
        ax.set_ylabel(label, fontsize=8)
        ax.grid(True, alpha=0.3)
    axes[-1].set_xlabel("simulated time (s)")
    run_id = report.metadata.get("run_id", "")
    fig.suptitle(f"run {run_id}".strip())
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def load_summary(run_dir: Path) -> dict:
    return json.loads((Path(run_dir) / "summary.json").read_text(encoding="utf-8"))


def compare(summary_a: dict, summary_b: dict) -> dict:
    """Utility ratio and stability stats for two runs over the same workload."""
    for key in ("trace_id", "seed"):
        if summary_a.get(key) != summary_b.get(key):
            raise TraceMismatch(
                f"{key} differs: {summary_a.get(key)!r} vs {summary_b.get(key)!r}"
            )
    ta, tb = summary_a["totals"], summary_b["totals"]
    ratio = math.inf if tb["utility"] == 0 else ta["utility"] / tb["utility"]
    return {
        "utility_a": ta["utility"],
        "utility_b": tb["utility"],
        "utility_ratio": ratio,
        "mean_rt_a": ta["mean_rt"],
        "mean_rt_b": tb["mean_rt"],
        "max_rt_a": ta["max_rt"],
        "max_rt_b": tb["max_rt"],
        "rt_ok_fraction_a": ta["rt_ok_fraction"],
        "rt_ok_fraction_b": tb["rt_ok_fraction"],
    }


def render_comparison(result: dict, name_a: str = "A", name_b: str = "B") -> str:
    lines = [
        f"{'':24}{name_a:>14}{name_b:>14}",
        f"{'utility':24}{result['utility_a']:>14.1f}{result['utility_b']:>14.1f}",
        f"{'mean rt (s)':24}{result['mean_rt_a']:>14.4f}{result['mean_rt_b']:>14.4f}",
        f"{'max rt (s)':24}{result['max_rt_a']:>14.4f}{result['max_rt_b']:>14.4f}",
        f"{'periods rt<=bar':24}{result['rt_ok_fraction_a']:>13.1%}{result['rt_ok_fraction_b']:>14.1%}",
        f"utility ratio {name_a}/{name_b}: {result['utility_ratio']:.4f}",
    ]
    return "\n".join(lines)


def periods_for(trace: ArrivalTrace, control_period: float) -> int:
    return int(trace.duration // control_period)


def load_config_file(path: Path) -> dict[str, str]:
    """key=value lines; blank lines and #-comments ignored."""
    values: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_CONFIG_SCHEMA = {
    "max_servers": ("system", "max_servers", int),
    "boot_delay_s": ("system", "boot_delay", float),
    "service_mandatory_mean_s": ("system", "service_mandatory_mean", float),
    "service_optional_mean_s": ("system", "service_optional_mean", float),
    "control_period_s": ("system", "control_period", float),
    "token_budget": ("system", "token_budget", int),
    "rt_threshold_s": ("system", "rt_threshold", float),
    "revenue_optional": ("utility", "revenue_optional", float),
    "revenue_mandatory": ("utility", "revenue_mandatory", float),
    "server_cost": ("utility", "server_cost", float),
    "utility_rt_threshold_s": ("utility", "rt_threshold", float),
    "penalty_multiplier": ("utility", "penalty_multiplier", float),
    "rt_hi_s": ("thresholds", "rt_hi", float),
    "rt_lo_s": ("thresholds", "rt_lo", float),
    "util_lo": ("thresholds", "util_lo", float),
    "engine_endpoint": ("engine", "endpoint", str),
    "engine_model": ("engine", "model", str),
    "engine_temperature": ("engine", "temperature", float),
    "engine_timeout_s": ("engine", "timeout", float),
    "engine_max_retries": ("engine", "max_retries", int),
    "initial_servers": (None, "initial_servers", int),
    "initial_dimmer": (None, "initial_dimmer", float),
    "seed": (None, "seed", int),
    "templates_dir": (None, "templates_dir", Path),
}


def build_setup(values: dict[str, str] | None = None) -> RunSetup:
    """RunSetup from config-file values layered over the defaults."""
    groups: dict[str, dict] = {"system": {}, "utility": {}, "thresholds": {}, "engine": {}}
    top: dict = {}
    for key, raw in (values or {}).items():
        if key not in _CONFIG_SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        group, attr, cast = _CONFIG_SCHEMA[key]
        parsed = cast(raw)
        if group is None:
            top[attr] = parsed
        else:
            groups[group][attr] = parsed
    setup = RunSetup(
        system=SystemConfig(**groups["system"]),
        utility=UtilityParams(**groups["utility"]),
        thresholds=ReactiveThresholds(**groups["thresholds"]),
        engine=EngineConfig(**groups["engine"]),
        **top,
    )
    # the rule oracle tracks the system's response-time bar
    setup.engine.rt_threshold = setup.system.rt_threshold
    return setup


def run_experiment(
    setup: RunSetup,
    trace: ArrivalTrace | None,
    out_dir: Path,
    engine=None,
    periods: int | None = None,
    connect: tuple[str, int] | None = None,
    progress: bool = False,
) -> RunReport:
    """Wire a run end to end: managed system (embedded simulator or remote TCP
    service), knowledge store, engine, loop, outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if connect is None:
        if trace is None:
            raise ValueError("embedded runs need a trace")
        sim = Simulator(
            setup.system,
            trace,
            seed=setup.seed,
            initial_servers=setup.initial_servers,
            initial_dimmer=setup.initial_dimmer,
        )
        client = LocalClient(ProtocolHandler(sim))
        trace_id = trace_id_of(trace)
    else:
        client = TcpClient(*connect)
        trace_id = f"remote:{connect[0]}:{connect[1]}"
    if periods is None:
        if trace is None:
            raise ValueError("remote runs need an explicit period count")
        periods = periods_for(trace, setup.system.control_period)
    if engine is None:
        engine = build_engine(setup.engine)

    template = (
        load_template(setup.templates_dir) if setup.templates_dir else default_template()
    )
    knowledge = Knowledge(out_dir, template)
    metadata = {
        "run_id": out_dir.name,
        "engine": setup.engine.kind,
        "seed": setup.seed,
        "trace_id": trace_id,
        "config_hash": setup.config_hash(),
    }
    transcript_path = out_dir / "transcript.txt"
    try:
        with open(transcript_path, "w", encoding="utf-8") as transcript_fh:
            report = run_mse_loop(
                engine,
                client,
                knowledge,
                setup,
                periods,
                metadata,
                transcript_fh=transcript_fh,
                progress=progress,
            )
    finally:
        knowledge.close()
        client.close()
    emit_outputs(report, out_dir, stability_rt=setup.system.rt_threshold)
    return report
