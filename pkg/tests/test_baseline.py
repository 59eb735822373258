from msek.baseline import ReactiveEngine, ReactiveThresholds, reactive_decide
from msek.core import Action, ContextSnapshot
from msek.knowledge import ConversationHistory, default_template
from msek.synthesize import generate_prompt

T = ReactiveThresholds()  # rt_hi=0.1, rt_lo=0.05, util_lo=0.4


def snap(rt, dimmer=0.8, servers=2, util=0.5, max_servers=3):
    return ContextSnapshot(dimmer, servers, max_servers, util, rt, 20.0, 500.0)


class TestRuleTable:
    def test_slow_with_capacity_adds_server(self):
        d = reactive_decide(snap(rt=0.4, servers=2), T)
        assert d.action is Action.ADD_SERVER

    def test_slow_at_capacity_sheds_load(self):
        d = reactive_decide(snap(rt=0.4, servers=3, dimmer=0.8), T)
        assert d.action is Action.SET_DIMMER
        assert d.argument == 0.7

    def test_dimmer_floor_is_zero(self):
        d = reactive_decide(snap(rt=0.4, servers=3, dimmer=0.0), T)
        assert d.action is Action.SET_DIMMER
        assert d.argument == 0.0

    def test_fast_restores_dimmer(self):
        d = reactive_decide(snap(rt=0.02, dimmer=0.9), T)
        assert d.action is Action.SET_DIMMER
        assert d.argument == 1.0

    def test_fast_idle_removes_server(self):
        d = reactive_decide(snap(rt=0.02, dimmer=1.0, util=0.2, servers=2), T)
        assert d.action is Action.REMOVE_SERVER

    def test_fast_but_busy_holds(self):
        d = reactive_decide(snap(rt=0.02, dimmer=1.0, util=0.6, servers=2), T)
        assert d.action is Action.DO_NOTHING

    def test_fast_single_server_holds(self):
        d = reactive_decide(snap(rt=0.02, dimmer=1.0, util=0.2, servers=1), T)
        assert d.action is Action.DO_NOTHING

    def test_middle_band_holds(self):
        d = reactive_decide(snap(rt=0.07), T)
        assert d.action is Action.DO_NOTHING


class TestInvariants:
    def test_structurally_valid_everywhere(self):
        for rt in (0.0, 0.02, 0.07, 0.4, 9.0):
            for dimmer in (0.0, 0.1, 0.5, 1.0):
                for servers in (1, 2, 3):
                    for util in (0.0, 0.3, 0.9):
                        d = reactive_decide(
                            snap(rt=rt, dimmer=dimmer, servers=servers, util=util), T
                        )
                        if d.action is Action.ADD_SERVER:
                            assert servers < 3
                        if d.action is Action.REMOVE_SERVER:
                            assert servers > 1
                        if d.action is Action.SET_DIMMER:
                            assert 0.0 <= d.argument <= 1.0

    def test_pure_function(self):
        c = snap(rt=0.4)
        assert reactive_decide(c, T) == reactive_decide(c, T)


class TestReactiveEngine:
    def test_decides_from_prompt(self, busy_snapshot):
        p = generate_prompt(busy_snapshot, ConversationHistory(), default_template(), 4096)
        assert ReactiveEngine().invoke(p) == "2"
