"""Metric collection: polls the managed system's probes once per control
period and assembles a context snapshot. Probe order is fixed so transcripts
are reproducible, and reset_window is issued exactly once, after all reads,
so the readings describe the window that just closed."""

from __future__ import annotations

from .core import ContextSnapshot
from .service import ProtocolError

PROBE_ORDER = (
    "get_dimmer",
    "get_active_servers",
    "get_max_servers",
    "get_utilization",
    "get_basic_rt",
    "get_arrival_rate",
    "get_time",
)


def _numeric_reply(client, command: str) -> float:
    reply = client.request(command)
    try:
        return float(reply)
    except ValueError:
        raise ProtocolError(f"non-numeric reply to {command}: {reply!r}") from None


def collect_context(client) -> ContextSnapshot:
    """Read the seven probes, close the window, return the snapshot."""
    values = [_numeric_reply(client, cmd) for cmd in PROBE_ORDER]
    reply = client.request("reset_window")
    if reply != "OK":
        raise ProtocolError(f"reset_window failed: {reply!r}")
    dimmer, active, max_servers, util, rt, rate, now = values
    return ContextSnapshot(
        dimmer=dimmer,
        active_servers=int(active),
        max_servers=int(max_servers),
        utilization=util,
        avg_response_time=rt,
        arrival_rate=rate,
        sim_time=now,
    )


def drain_event_log(client) -> list[str]:
    """Pull the simulator's structured event log when the client exposes it
    (in-process runs); metrics-only transports return nothing."""
    drain = getattr(client, "drain_events", None)
    if drain is None:
        return []
    return drain()
