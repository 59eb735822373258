import pytest

from msek.core import Action, AdaptationDecision, SystemConfig, set_dimmer
from msek.sim import (
    ArrivalTrace,
    BadDimmer,
    LastServer,
    PoolFull,
    Segment,
    Simulator,
    TraceFormatError,
    UnknownMetric,
    constant_trace,
    worldcup_like_trace,
)


def make_sim(rate=0.0, duration=10_000.0, seed=1, servers=1, dimmer=0.0, **cfg):
    config = SystemConfig(**cfg)
    return Simulator(
        config,
        constant_trace(rate, duration),
        seed=seed,
        initial_servers=servers,
        initial_dimmer=dimmer,
    )


class TestTrace:
    def test_rejects_bad_shapes(self):
        with pytest.raises(TraceFormatError):
            ArrivalTrace([])
        with pytest.raises(TraceFormatError):
            ArrivalTrace([Segment(5.0, 1.0)])
        with pytest.raises(TraceFormatError):
            ArrivalTrace([Segment(0.0, 1.0), Segment(0.0, 2.0)])
        with pytest.raises(TraceFormatError):
            ArrivalTrace([Segment(0.0, -1.0)])

    def test_rate_lookup(self):
        t = ArrivalTrace([Segment(0, 5.0), Segment(10, 7.0), Segment(20, 0.0)])
        assert t.rate_at(0) == 5.0
        assert t.rate_at(9.99) == 5.0
        assert t.rate_at(10) == 7.0
        assert t.rate_at(25) == 0.0
        assert t.duration == 20

    def test_csv_round_trip(self):
        t = worldcup_like_trace()
        assert ArrivalTrace.from_csv(t.to_csv()).segments == t.segments

    def test_csv_rejects_bad_header(self):
        with pytest.raises(TraceFormatError):
            ArrivalTrace.from_csv("a,b\n0,1\n")

    def test_worldcup_like_shape(self):
        t = worldcup_like_trace()
        assert t.duration == 6300.0
        rates = [s.rate for s in t.segments]
        assert rates[0] == 5.0
        assert max(rates) == 112.5  # the 2.5x spike over the 45 req/s plateau
        assert rates[-1] == 0.0
        spike = [s for s in t.segments if s.rate == 112.5]
        assert spike[-1].start - spike[0].start == 420.0  # 8 segments of 60 s


class TestEmptyTrace:
    def test_clock_advances_with_zero_arrivals(self):
        sim = make_sim(rate=0.0)
        sim.step_until(100.0)
        assert sim.clock == 100.0
        assert sim.total_arrivals == 0
        assert sim.read_probe("basic_rt") == 0.0
        assert sim.read_probe("arrival_rate") == 0.0


class TestQueueingBehavior:
    def test_mm1_mean_response_time(self):
        # M/M/1 oracle: W = 1/(mu - lambda) = 1/(20 - 15) = 0.2 s
        sim = make_sim(rate=15.0, seed=7, servers=1, dimmer=0.0, service_mandatory_mean=0.05)
        sim.step_until(200.0)  # settle into steady state before measuring
        sim.reset_window()
        sim.step_until(1200.0)
        assert sim.window_completed >= 10_000
        assert sim.basic_rt() == pytest.approx(0.2, rel=0.05)

    def test_littles_law_on_window(self):
        sim = make_sim(rate=15.0, seed=5, servers=2, dimmer=0.0, service_mandatory_mean=0.05)
        sim.step_until(200.0)  # warm-up
        sim.reset_window()
        sim.step_until(1400.0)
        lam = sim.arrival_rate()
        w = sim.basic_rt()
        l = sim.window_mean_in_system()
        assert l == pytest.approx(lam * w, rel=0.03)

    def test_conservation_at_many_boundaries(self):
        sim = make_sim(rate=30.0, seed=9, servers=2, dimmer=0.5)
        for k in range(1, 200):
            sim.step_until(k * 2.5)
            assert sim.check_conservation()

    def test_every_response_time_covers_service(self):
        sim = make_sim(rate=20.0, seed=2, servers=1, dimmer=1.0)
        sim.step_until(50.0)
        done = [ln for ln in sim.events if " done " in ln]
        assert done
        for ln in done:
            rt = float(ln.rsplit("rt=", 1)[1])
            assert rt > 0


class TestServiceDraws:
    def test_dimmer_zero_mandatory_only(self):
        sim = make_sim(dimmer=0.0)
        draws = [sim.draw_service() for _ in range(10_000)]
        assert all(not optional for _, optional in draws)
        mean = sum(s for s, _ in draws) / len(draws)
        assert mean == pytest.approx(0.02, rel=0.03)

    def test_dimmer_one_mean_service(self):
        sim = make_sim(dimmer=1.0)
        draws = [sim.draw_service()[0] for _ in range(10_000)]
        assert sum(draws) / len(draws) == pytest.approx(0.05, rel=0.03)

    def test_optional_fraction_tracks_dimmer(self):
        sim = make_sim(dimmer=0.8)
        flags = [sim.draw_service()[1] for _ in range(10_000)]
        assert sum(flags) / len(flags) == pytest.approx(0.8, abs=0.02)


class TestDeterminism:
    def test_equal_seeds_equal_event_logs(self):
        logs = []
        for _ in range(2):
            sim = make_sim(rate=25.0, seed=42, servers=2, dimmer=0.7)
            sim.step_until(300.0)
            sim.set_dimmer(0.3)
            sim.add_server()
            sim.step_until(600.0)
            logs.append(list(sim.events))
        assert logs[0] == logs[1]

    def test_different_seeds_differ(self):
        readings = []
        for seed in (1, 2):
            sim = make_sim(rate=25.0, seed=seed, servers=2, dimmer=0.7)
            sim.step_until(300.0)
            readings.append(sim.read_probe("basic_rt"))
        assert readings[0] != readings[1]


class TestEffectors:
    def test_add_server_boots_after_delay(self):
        sim = make_sim(rate=10.0, servers=1, dimmer=0.0, boot_delay=30.0, max_servers=3)
        sim.step_until(10.0)
        sim.add_server()
        assert sim.booting_count() == 1
        assert sim.read_probe("active_servers") == 2  # booting counts in the probe
        sim.step_until(39.9)
        assert sim.active_count() == 1
        sim.step_until(40.1)
        assert sim.active_count() == 2

    def test_add_server_pool_full(self):
        sim = make_sim(servers=3, max_servers=3)
        with pytest.raises(PoolFull):
            sim.add_server()

    def test_booting_counts_against_pool(self):
        sim = make_sim(servers=2, max_servers=3, boot_delay=100.0)
        sim.add_server()
        with pytest.raises(PoolFull):
            sim.add_server()

    def test_set_dimmer_changes_only_dimmer(self):
        sim = make_sim(servers=2, dimmer=0.5)
        before = (sim.active_count(), sim.clock, sim.total_arrivals)
        sim.set_dimmer(0.9)
        assert sim.dimmer == 0.9
        assert (sim.active_count(), sim.clock, sim.total_arrivals) == before

    def test_set_dimmer_rejects_out_of_range(self):
        sim = make_sim()
        with pytest.raises(BadDimmer):
            sim.set_dimmer(1.5)

    def test_remove_last_server_refused(self):
        sim = make_sim(servers=1)
        with pytest.raises(LastServer):
            sim.remove_server()

    def test_remove_cancels_boot_when_one_active(self):
        sim = make_sim(servers=1, max_servers=3, boot_delay=50.0)
        sim.add_server()
        sim.remove_server()  # cancels the booting server, keeps the active one
        assert sim.active_count() == 1
        assert sim.booting_count() == 0
        sim.step_until(100.0)
        assert sim.active_count() == 1

    def test_idle_server_removed_immediately(self):
        sim = make_sim(servers=2)
        sim.remove_server()
        assert sim.active_count() == 1
        assert len(sim.servers) == 1

    def test_draining_server_never_takes_new_work(self):
        sim = make_sim(rate=60.0, servers=2, dimmer=1.0, seed=11)
        sim.step_until(20.0)  # overloaded: both servers busy, queue building
        busy = [s.sid for s in sim.servers.values() if s.request is not None]
        assert len(busy) == 2
        sim.remove_server()
        drained = max(busy)
        assert sim.servers[drained].state == "draining"
        sim.step_until(60.0)
        drain_marker = f"drain server={drained}"
        started_after = False
        seen_drain = False
        for ln in sim.events:
            if drain_marker in ln:
                seen_drain = True
            elif seen_drain and f"start " in ln and ln.endswith(f"server={drained} opt=0"):
                started_after = True
            elif seen_drain and f"server={drained}" in ln and " start " in ln:
                started_after = True
        assert seen_drain
        assert not started_after
        assert drained not in sim.servers  # finished in-flight work and left

    def test_apply_effector_dispatch(self):
        sim = make_sim(servers=2, max_servers=3)
        sim.apply_effector(set_dimmer(0.4))
        assert sim.dimmer == 0.4
        sim.apply_effector(AdaptationDecision(Action.ADD_SERVER))
        assert sim.booting_count() == 1
        sim.apply_effector(AdaptationDecision(Action.DO_NOTHING))
        sim.apply_effector(AdaptationDecision(Action.REMOVE_SERVER))
        assert sim.active_count() == 1


class TestProbes:
    def test_unknown_metric(self):
        with pytest.raises(UnknownMetric):
            make_sim().read_probe("latency_p99")

    def test_arrival_rate_over_window(self):
        sim = make_sim(rate=10.0, servers=2, dimmer=0.0, seed=8)
        sim.step_until(200.0)
        assert sim.read_probe("arrival_rate") == pytest.approx(10.0, abs=0.5)

    def test_window_reset_clears_accumulators(self):
        sim = make_sim(rate=10.0, servers=1, dimmer=0.0, seed=8)
        sim.step_until(100.0)
        assert sim.read_probe("basic_rt") > 0
        sim.reset_window()
        assert sim.read_probe("basic_rt") == 0.0
        assert sim.read_probe("arrival_rate") == 0.0
        assert sim.read_probe("utilization") == 0.0

    def test_utilization_matches_offered_load(self):
        # single M/M/1 server at rho = 10/20 = 0.5
        sim = make_sim(rate=10.0, servers=1, dimmer=0.0, seed=4, service_mandatory_mean=0.05)
        sim.step_until(2000.0)
        assert sim.read_probe("utilization") == pytest.approx(0.5, abs=0.05)

    def test_time_probe(self):
        sim = make_sim()
        sim.step_until(123.5)
        assert sim.read_probe("time") == 123.5
