"""Domain types shared by every stage of the adaptation loop.

The action catalog is fixed: set-dimmer (1), add-server (2), remove-server (3),
do-nothing (4). Decisions travel as one ASCII line ("1 0.6", "4"), and system
status travels as a key:value block; both codecs live here so the simulator,
the engines, and the tests agree on a single wire form.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import IntEnum


class Action(IntEnum):
    SET_DIMMER = 1
    ADD_SERVER = 2
    REMOVE_SERVER = 3
    DO_NOTHING = 4


class DecisionDecodeError(ValueError):
    """A decision line that does not map onto the action catalog."""


class UnknownAction(DecisionDecodeError):
    pass


class MissingArgument(DecisionDecodeError):
    pass


class ArgumentOutOfRange(DecisionDecodeError):
    pass


class SpuriousArgument(DecisionDecodeError):
    pass


@dataclass(frozen=True)
class AdaptationDecision:
    """One action from the catalog, with the dimmer value iff set-dimmer.

    ``raw_text`` keeps the verbatim engine output the decision came from; it is
    excluded from equality so decode(encode(d)) == d holds regardless of how
    the line was produced.
    """

    action: Action
    argument: float | None = None
    raw_text: str = field(default="", compare=False)

    def __post_init__(self):
        if self.action is Action.SET_DIMMER:
            if self.argument is None:
                raise MissingArgument("set-dimmer requires a value")
            if not 0.0 <= self.argument <= 1.0:
                raise ArgumentOutOfRange(f"dimmer value {self.argument} outside [0, 1]")
            # dimmer values are quantized to 2 decimal places
            object.__setattr__(self, "argument", round(float(self.argument), 2))
        elif self.argument is not None:
            raise SpuriousArgument(f"{self.action.name} takes no argument")


def set_dimmer(value: float, raw_text: str = "") -> AdaptationDecision:
    return AdaptationDecision(Action.SET_DIMMER, value, raw_text)


DO_NOTHING = AdaptationDecision(Action.DO_NOTHING)


def format_number(x: float) -> str:
    """Render a number the way the wire protocol expects: no trailing '.0',
    shortest round-tripping form otherwise."""
    if math.isinf(x):
        return "inf"
    if float(x) == int(x):
        return str(int(x))
    return repr(float(x))


def encode_decision(d: AdaptationDecision) -> str:
    """Decision -> wire line: "<id>" or "<id> <arg>" (arg with <= 2 decimals)."""
    if d.action is Action.SET_DIMMER:
        return f"{int(d.action)} {format_number(round(d.argument, 2))}"
    return str(int(d.action))


def decode_decision(line: str) -> AdaptationDecision:
    """Wire line -> decision. Inverse of encode_decision on valid input."""
    tokens = line.split()
    if not tokens:
        raise UnknownAction("empty decision line")
    try:
        action_id = int(tokens[0])
    except ValueError:
        raise UnknownAction(f"not an action id: {tokens[0]!r}") from None
    if action_id not in (1, 2, 3, 4):
        raise UnknownAction(f"action id {action_id} outside catalog 1..4")
    action = Action(action_id)
    if len(tokens) > 2:
        raise SpuriousArgument(f"too many tokens in {line!r}")
    if action is Action.SET_DIMMER:
        if len(tokens) == 1:
            raise MissingArgument("set-dimmer line has no value")
        try:
            arg = float(tokens[1])
        except ValueError:
            raise MissingArgument(f"set-dimmer value is not a number: {tokens[1]!r}") from None
        if not 0.0 <= arg <= 1.0:
            raise ArgumentOutOfRange(f"dimmer value {arg} outside [0, 1]")
        return AdaptationDecision(action, arg, raw_text=line)
    if len(tokens) == 2:
        raise SpuriousArgument(f"{action.name} takes no argument, got {tokens[1]!r}")
    return AdaptationDecision(action, raw_text=line)


@dataclass(frozen=True)
class ContextSnapshot:
    """One monitoring window of system state, as the monitor assembles it."""

    dimmer: float
    active_servers: int
    max_servers: int
    utilization: float
    avg_response_time: float
    arrival_rate: float
    sim_time: float

    def __post_init__(self):
        if not 0.0 <= self.dimmer <= 1.0:
            raise ValueError(f"dimmer {self.dimmer} outside [0, 1]")
        if self.active_servers < 0 or self.max_servers < 1:
            raise ValueError("server counts out of range")
        if self.avg_response_time < 0 or self.arrival_rate < 0 or self.sim_time < 0:
            raise ValueError("negative metric")
        # utilization can transiently exceed 1 on the managed side; clamp here
        object.__setattr__(self, "utilization", min(1.0, max(0.0, float(self.utilization))))


# Key order of the status block; the trailing key is the pool limit.
SNAPSHOT_KEYS = (
    "dimmer",
    "active_servers",
    "utilization",
    "avg_response_time",
    "arrival_rate",
    "time",
    "max_servers",
)


def _snapshot_values(c: ContextSnapshot) -> dict[str, float]:
    return {
        "dimmer": c.dimmer,
        "active_servers": c.active_servers,
        "utilization": c.utilization,
        "avg_response_time": c.avg_response_time,
        "arrival_rate": c.arrival_rate,
        "time": c.sim_time,
        "max_servers": c.max_servers,
    }


def render_snapshot(c: ContextSnapshot) -> str:
    """Status block used in prompts and logs: one key:value line per metric."""
    lines = ["Status:"]
    values = _snapshot_values(c)
    for key in SNAPSHOT_KEYS:
        lines.append(f"{key}: {format_number(values[key])}")
    return "\n".join(lines)


def parse_snapshot(text: str) -> ContextSnapshot:
    """Inverse of render_snapshot; tolerates surrounding prose."""
    values = {}
    for key in SNAPSHOT_KEYS:
        m = re.search(rf"^\s*{key}:\s*([0-9.eE+-]+)\s*$", text, re.MULTILINE)
        if m is None:
            raise ValueError(f"status block is missing {key!r}")
        values[key] = float(m.group(1))
    return ContextSnapshot(
        dimmer=values["dimmer"],
        active_servers=int(values["active_servers"]),
        max_servers=int(values["max_servers"]),
        utilization=values["utilization"],
        avg_response_time=values["avg_response_time"],
        arrival_rate=values["arrival_rate"],
        sim_time=values["time"],
    )


ACTIONS_BLOCK = """Actions you can take:
1. Set Dimmer (value in [0, 1])
2. Add Server
3. Remove Server
4. Do Nothing"""


@dataclass(frozen=True)
class Objective:
    """Prioritized adaptation goals; the response-time bar drives everything."""

    rt_threshold: float = 0.1
    primary: str = "keep the average response time at or below {rt:.3f} seconds"
    secondary: str = "maximize the dimmer value"
    tertiary: str = "minimize the number of active servers"

    def __post_init__(self):
        if self.rt_threshold <= 0:
            raise ValueError("rt_threshold must be positive")

    def render(self) -> str:
        return "\n".join(
            [
                f"1. {self.primary.format(rt=self.rt_threshold)}",
                f"2. {self.secondary}",
                f"3. {self.tertiary}",
                "Priorities are strictly ordered.",
            ]
        )


@dataclass(frozen=True)
class SystemConfig:
    """Managed-system parameters shared by the simulator, verifier, and loop."""

    max_servers: int = 3
    boot_delay: float = 120.0
    service_mandatory_mean: float = 0.02
    service_optional_mean: float = 0.03
    control_period: float = 200.0
    token_budget: int = 8192
    rt_threshold: float = 0.1

    def __post_init__(self):
        for name in (
            "max_servers",
            "boot_delay",
            "service_mandatory_mean",
            "service_optional_mean",
            "control_period",
            "token_budget",
            "rt_threshold",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    def mean_service_time(self, dimmer: float) -> float:
        return self.service_mandatory_mean + dimmer * self.service_optional_mean
