"""Execute stage: a quantitative verifier gating decisions, and the executor
that dispatches accepted decisions over the effector connection.

The verifier predicts the post-decision mean response time with the M/M/c
(Erlang-C) closed form. Structural violations (last server, full pool, bad
dimmer) always reject; a predicted threshold violation rejects only when some
other catalog action would meet the threshold, so a decision is never rejected
when nothing better exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import (
    Action,
    AdaptationDecision,
    ContextSnapshot,
    SystemConfig,
    encode_decision,
    format_number,
    set_dimmer,
)
from .service import ProbeTimeout

OK = "ok"
LAST_SERVER = "last_server"
POOL_FULL = "pool_full"
BAD_DIMMER = "bad_dimmer"
PREDICTED_RT_VIOLATION = "predicted_rt_violation"

# set-dimmer alternatives are probed on this grid
DIMMER_GRID = [round(v * 0.1, 1) for v in range(11)]


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str
    predicted_rt: float

    def __post_init__(self):
        assert self.accepted == (self.reason == OK)


class ExecuteError(Exception):
    pass


class EffectorRejected(ExecuteError):
    pass


class EffectorTimeout(ExecuteError):
    pass


def erlang_c_wait_probability(servers: int, offered_load: float) -> float:
    """P(wait) for M/M/c via the numerically stable Erlang-B recursion."""
    b = 1.0
    for k in range(1, servers + 1):
        b = offered_load * b / (k + offered_load * b)
    rho = offered_load / servers
    return b / (1.0 - rho + rho * b)


def erlang_c_response_time(lam: float, servers: int, mean_service: float) -> float:
    """Mean response time of an M/M/c queue; +inf when demand >= capacity."""
    if servers < 1:
        raise ValueError("servers must be >= 1")
    if mean_service <= 0:
        raise ValueError("mean_service must be > 0")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return mean_service
    mu = 1.0 / mean_service
    if lam >= servers * mu:
        return math.inf
    a = lam / mu
    wait_p = erlang_c_wait_probability(servers, a)
    return wait_p / (servers * mu - lam) + mean_service


def _structural_reason(ad: AdaptationDecision, c: ContextSnapshot) -> str | None:
    if ad.action is Action.ADD_SERVER and c.active_servers >= c.max_servers:
        return POOL_FULL
    if ad.action is Action.REMOVE_SERVER and c.active_servers <= 1:
        return LAST_SERVER
    if ad.action is Action.SET_DIMMER and not 0.0 <= ad.argument <= 1.0:
        return BAD_DIMMER
    return None


def _after(ad: AdaptationDecision, c: ContextSnapshot) -> tuple[int, float]:
    servers = c.active_servers
    dimmer = c.dimmer
    if ad.action is Action.ADD_SERVER:
        servers += 1
    elif ad.action is Action.REMOVE_SERVER:
        servers -= 1
    elif ad.action is Action.SET_DIMMER:
        dimmer = ad.argument
    return servers, dimmer


def predict_rt(ad: AdaptationDecision, c: ContextSnapshot, cfg: SystemConfig) -> float:
    servers, dimmer = _after(ad, c)
    return erlang_c_response_time(c.arrival_rate, servers, cfg.mean_service_time(dimmer))


def candidate_decisions(c: ContextSnapshot) -> list[AdaptationDecision]:
    """Every structurally valid catalog decision, with set-dimmer sampled on
    the 0.1 grid. Deterministic order."""
    candidates = [AdaptationDecision(Action.DO_NOTHING)]
    if c.active_servers < c.max_servers:
        candidates.append(AdaptationDecision(Action.ADD_SERVER))
    if c.active_servers > 1:
        candidates.append(AdaptationDecision(Action.REMOVE_SERVER))
    candidates.extend(set_dimmer(v) for v in DIMMER_GRID)
    return candidates


def verify(ad: AdaptationDecision, c: ContextSnapshot, cfg: SystemConfig) -> Verdict:
    reason = _structural_reason(ad, c)
    if reason is not None:
        return Verdict(False, reason, math.inf)
    predicted = predict_rt(ad, c, cfg)
    if predicted > cfg.rt_threshold:
        alternatives = [d for d in candidate_decisions(c) if d != ad]
        if any(predict_rt(d, c, cfg) <= cfg.rt_threshold for d in alternatives):
            return Verdict(False, PREDICTED_RT_VIOLATION, predicted)
    return Verdict(True, OK, predicted)


def best_verified_decision(c: ContextSnapshot, cfg: SystemConfig) -> AdaptationDecision:
    """Structurally valid decision with the lowest predicted response time;
    ties keep the earlier candidate (do-nothing first). Always verifiable:
    either it meets the threshold or nothing does."""
    best = None
    best_rt = math.inf
    for d in candidate_decisions(c):
        rt = predict_rt(d, c, cfg)
        if rt < best_rt:
            best, best_rt = d, rt
    assert best is not None
    return AdaptationDecision(best.action, best.argument, raw_text=encode_decision(best))


def execute(ad: AdaptationDecision, client) -> str:
    """Dispatch the decision's effector command and wait for the ack.
    Do-nothing sends no command at all."""
    if ad.action is Action.DO_NOTHING:
        return "OK"
    if ad.action is Action.SET_DIMMER:
        command = f"set_dimmer {format_number(round(ad.argument, 2))}"
    elif ad.action is Action.ADD_SERVER:
        command = "add_server"
    else:
        command = "remove_server"
    try:
        reply = client.request(command)
    except ProbeTimeout:
        raise EffectorTimeout(command) from None
    if reply != "OK":
        raise EffectorRejected(f"{command!r} -> {reply!r}")
    return reply
