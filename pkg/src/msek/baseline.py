"""Threshold-triggered reactive manager used as the comparison point: a
memoryless rule over the latest snapshot, no prompts, no verifier."""

from __future__ import annotations

from dataclasses import dataclass

from .core import (
    Action,
    AdaptationDecision,
    ContextSnapshot,
    encode_decision,
    parse_snapshot,
    set_dimmer,
)


@dataclass(frozen=True)
class ReactiveThresholds:
    rt_hi: float = 0.1
    rt_lo: float = 0.05
    util_lo: float = 0.4


def reactive_decide(c: ContextSnapshot, thresholds: ReactiveThresholds) -> AdaptationDecision:
    """Scale up on slow responses (shed load via the dimmer once the pool is
    full), restore the dimmer / scale down when responses are fast, otherwise
    hold. Always structurally valid for the given snapshot."""
    if c.avg_response_time > thresholds.rt_hi:
        if c.active_servers < c.max_servers:
            return AdaptationDecision(Action.ADD_SERVER)
        return set_dimmer(max(0.0, round(c.dimmer - 0.1, 2)))
    if c.avg_response_time < thresholds.rt_lo:
        if c.dimmer < 1.0:
            return set_dimmer(min(1.0, round(c.dimmer + 0.1, 2)))
        if c.utilization < thresholds.util_lo and c.active_servers > 1:
            return AdaptationDecision(Action.REMOVE_SERVER)
        return AdaptationDecision(Action.DO_NOTHING)
    return AdaptationDecision(Action.DO_NOTHING)


class ReactiveEngine:
    """Adapter so the reactive rule can sit in the engine slot of the loop:
    it reads the status block from the prompt like any other engine."""

    def __init__(self, thresholds: ReactiveThresholds | None = None):
        self.thresholds = thresholds or ReactiveThresholds()

    def invoke(self, prompt) -> str:
        snapshot = parse_snapshot(prompt.last_user_content())
        return encode_decision(reactive_decide(snapshot, self.thresholds))
