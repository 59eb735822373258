"""Discrete-event simulator of the managed system: an elastic web-server pool
with a brownout dimmer, fed by a piecewise-constant Poisson arrival trace.

Virtual time only moves through step_until (the service layer maps the
`advance` command onto it), so a run is a pure function of (config, trace,
seed, effector schedule).
"""

from __future__ import annotations

import heapq
import math
import random
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass

from .core import Action, AdaptationDecision, SystemConfig, format_number


class EffectorError(Exception):
    """An effector command the simulator refuses in its current state."""


class PoolFull(EffectorError):
    pass


class LastServer(EffectorError):
    pass


class BadDimmer(EffectorError):
    pass


class UnknownMetric(KeyError):
    pass


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    start: float
    rate: float


class ArrivalTrace:
    """Piecewise-constant arrival rates. Each segment holds from its start to
    the next segment's start; the final row acts as the end-of-trace marker,
    so `duration` is the last start and its (usually zero) rate holds beyond.
    """

    def __init__(self, segments: list[Segment]):
        if not segments:
            raise TraceFormatError("trace has no segments")
        if segments[0].start != 0:
            raise TraceFormatError("first segment must start at 0")
        starts = [s.start for s in segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise TraceFormatError("segment starts must be strictly increasing")
        if any(s.rate < 0 for s in segments):
            raise TraceFormatError("rates must be >= 0")
        self.segments = list(segments)
        self._starts = starts

    @property
    def duration(self) -> float:
        return self.segments[-1].start

    def rate_at(self, t: float) -> float:
        i = bisect_right(self._starts, t) - 1
        return self.segments[max(i, 0)].rate

    def next_boundary(self, t: float) -> float | None:
        i = bisect_right(self._starts, t)
        if i >= len(self._starts):
            return None
        return self._starts[i]

    def sample_next_arrival(self, rng: random.Random, t: float) -> float | None:
        """Next arrival strictly after t, or None if no arrival ever comes.

        Exact for piecewise-constant Poisson: a draw that crosses a segment
        boundary is discarded and sampling restarts at the boundary
        (memorylessness makes the restart distribution-preserving).
        """
        while True:
            rate = self.rate_at(t)
            boundary = self.next_boundary(t)
            if rate <= 0:
                if boundary is None:
                    return None
                t = boundary
                continue
            candidate = t + rng.expovariate(rate)
            if boundary is not None and candidate >= boundary:
                t = boundary
                continue
            return candidate

    def to_csv(self) -> str:
        lines = ["start_s,rate_rps"]
        for seg in self.segments:
            lines.append(f"{format_number(seg.start)},{format_number(seg.rate)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ArrivalTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "start_s,rate_rps":
            raise TraceFormatError("expected header start_s,rate_rps")
        segments = []
        for n, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != 2:
                raise TraceFormatError(f"line {n}: expected 2 fields")
            try:
                segments.append(Segment(float(parts[0]), float(parts[1])))
            except ValueError:
                raise TraceFormatError(f"line {n}: non-numeric field") from None
        return cls(segments)


def constant_trace(rate: float, duration: float) -> ArrivalTrace:
    return ArrivalTrace([Segment(0.0, rate), Segment(duration, 0.0)])


def worldcup_like_trace() -> ArrivalTrace:
    """Bundled 105-minute workload: a ramp from 5 to 45 req/s, a 2.5x spike
    lasting 8 minutes, then a decay. 60 s segment granularity."""
    segments = []
    for t in range(0, 3000, 60):
        # fast-then-flattening ramp keeps early windows out of the
        # near-idle regime where mean response time sits on the
        # oracle's raise/remove boundary
        segments.append(Segment(float(t), round(5.0 + 40.0 * math.sqrt(t / 3000.0), 4)))
    for t in range(3000, 3480, 60):
        segments.append(Segment(float(t), 112.5))
    for t in range(3480, 6300, 60):
        segments.append(Segment(float(t), round(45.0 - 37.0 * (t - 3480) / 2820.0, 4)))
    segments.append(Segment(6300.0, 0.0))
    return ArrivalTrace(segments)


@dataclass
class Request:
    rid: int
    arrival: float
    # service demand is drawn when service starts: the dimmer decides the
    # content tier at serving time, so queued work feels dimmer changes
    service: float = 0.0
    optional: bool = False


ACTIVE = "active"
BOOTING = "booting"
DRAINING = "draining"


@dataclass
class Server:
    sid: int
    state: str
    ready_at: float = 0.0
    request: Request | None = None
    busy_since: float | None = None
    window_busy: float = 0.0

    def accrue(self, now: float):
        if self.busy_since is not None:
            self.window_busy += now - self.busy_since
            self.busy_since = now


_ARRIVAL = 0
_DEPARTURE = 1
_BOOT = 2


class Simulator:
    """Event-driven core. Probes read window-scoped metrics (since the last
    reset_window); effectors mutate the pool/dimmer immediately."""

    def __init__(
        self,
        config: SystemConfig,
        trace: ArrivalTrace,
        seed: int = 1,
        initial_servers: int = 1,
        initial_dimmer: float = 1.0,
        event_log_cap: int | None = 200_000,
    ):
        if not 1 <= initial_servers <= config.max_servers:
            raise ValueError("initial_servers outside 1..max_servers")
        if not 0.0 <= initial_dimmer <= 1.0:
            raise BadDimmer(f"dimmer {initial_dimmer} outside [0, 1]")
        self.config = config
        self.trace = trace
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0.0
        self.dimmer = float(initial_dimmer)
        self.servers: dict[int, Server] = {
            sid: Server(sid, ACTIVE) for sid in range(1, initial_servers + 1)
        }
        self._next_sid = initial_servers + 1
        self._next_rid = 1
        self.queue: deque[Request] = deque()
        self._events: list[tuple[float, int, int, int]] = []
        self._seq = 0
        self.events: deque[str] = deque(maxlen=event_log_cap)
        # window accumulators (since last reset_window)
        self.window_start = 0.0
        self.window_arrivals = 0
        self.window_completed = 0
        self.window_rt_sum = 0.0
        self._area_n = 0.0
        self._area_since = 0.0
        # whole-run totals
        self.total_arrivals = 0
        self.total_completed = 0
        self.total_rt_sum = 0.0
        self._schedule_next_arrival()

    # -- bookkeeping ------------------------------------------------------

    def _log(self, t: float, text: str):
        self.events.append(f"{t:.6f} {text}")

    def _push(self, t: float, kind: int, ref: int):
        self._seq += 1
        heapq.heappush(self._events, (t, self._seq, kind, ref))

    def _in_service(self) -> int:
        return sum(1 for s in self.servers.values() if s.request is not None)

    def in_system(self) -> int:
        return len(self.queue) + self._in_service()

    def _accrue_area(self, now: float):
        self._area_n += self.in_system() * (now - self._area_since)
        self._area_since = now

    def active_count(self) -> int:
        return sum(1 for s in self.servers.values() if s.state == ACTIVE)

    def booting_count(self) -> int:
        return sum(1 for s in self.servers.values() if s.state == BOOTING)

    def check_conservation(self) -> bool:
        return self.total_arrivals == self.total_completed + self.in_system()

    # -- arrivals and service ---------------------------------------------

    def _schedule_next_arrival(self):
        t = self.trace.sample_next_arrival(self.rng, self.clock)
        if t is not None:
            self._push(t, _ARRIVAL, 0)

    def draw_service(self) -> tuple[float, bool]:
        """Sample one request's service demand under the current dimmer."""
        optional = self.rng.random() < self.dimmer
        mean = self.config.service_mandatory_mean
        if optional:
            mean += self.config.service_optional_mean
        return max(self.rng.expovariate(1.0 / mean), 1e-12), optional

    def _idle_active_server(self) -> Server | None:
        for sid in sorted(self.servers):
            s = self.servers[sid]
            if s.state == ACTIVE and s.request is None:
                return s
        return None

    def _start_service(self, server: Server, req: Request, now: float):
        req.service, req.optional = self.draw_service()
        server.request = req
        server.busy_since = now
        self._push(now + req.service, _DEPARTURE, server.sid)
        self._log(now, f"start {req.rid} server={server.sid} opt={int(req.optional)}")

    def admit_request(self, req: Request, now: float):
        """First idle serving server wins, else FIFO queue."""
        server = self._idle_active_server()
        if server is not None:
            self._start_service(server, req, now)
        else:
            self.queue.append(req)

    def _handle_arrival(self, now: float):
        req = Request(self._next_rid, now)
        self._next_rid += 1
        self.window_arrivals += 1
        self.total_arrivals += 1
        self._log(now, f"arrive {req.rid}")
        self.admit_request(req, now)
        self._schedule_next_arrival()

    def _handle_departure(self, now: float, sid: int):
        server = self.servers.get(sid)
        if server is None or server.request is None:
            return  # stale event for a cancelled server
        req = server.request
        rt = now - req.arrival
        server.accrue(now)
        server.request = None
        server.busy_since = None
        self.window_completed += 1
        self.window_rt_sum += rt
        self.total_completed += 1
        self.total_rt_sum += rt
        self._log(now, f"done {req.rid} server={sid} rt={rt:.6f}")
        if server.state == DRAINING:
            del self.servers[sid]
            self._log(now, f"gone server={sid}")
            return
        if self.queue:
            self._start_service(server, self.queue.popleft(), now)

    def _handle_boot(self, now: float, sid: int):
        server = self.servers.get(sid)
        if server is None or server.state != BOOTING:
            return  # boot was cancelled
        server.state = ACTIVE
        self._log(now, f"boot server={sid}")
        if self.queue:
            self._start_service(server, self.queue.popleft(), now)

    # -- the clock ---------------------------------------------------------

    def step_until(self, t_end: float):
        """Process every event with timestamp <= t_end, in timestamp order."""
        if t_end < self.clock:
            raise ValueError("cannot step backwards")
        while self._events and self._events[0][0] <= t_end:
            t, _, kind, ref = heapq.heappop(self._events)
            self._accrue_area(t)
            self.clock = t
            if kind == _ARRIVAL:
                self._handle_arrival(t)
            elif kind == _DEPARTURE:
                self._handle_departure(t, ref)
            else:
                self._handle_boot(t, ref)
        self._accrue_area(t_end)
        self.clock = t_end

    # -- effectors ----------------------------------------------------------

    def set_dimmer(self, value: float):
        if not 0.0 <= value <= 1.0:
            raise BadDimmer(f"dimmer {value} outside [0, 1]")
        self.dimmer = float(value)
        self._log(self.clock, f"dimmer {format_number(value)}")

    def add_server(self):
        if self.active_count() + self.booting_count() >= self.config.max_servers:
            raise PoolFull("pool full")
        sid = self._next_sid
        self._next_sid += 1
        self.servers[sid] = Server(sid, BOOTING, ready_at=self.clock + self.config.boot_delay)
        self._push(self.servers[sid].ready_at, _BOOT, sid)
        self._log(self.clock, f"add server={sid}")

    def remove_server(self):
        actives = [s for s in self.servers.values() if s.state == ACTIVE]
        bootings = [s for s in self.servers.values() if s.state == BOOTING]
        if len(actives) >= 2:
            victim = max(actives, key=lambda s: s.sid)
            if victim.request is None:
                del self.servers[victim.sid]
                self._log(self.clock, f"gone server={victim.sid}")
            else:
                victim.state = DRAINING
                self._log(self.clock, f"drain server={victim.sid}")
        elif bootings:
            # never drain the last serving server; cancel a pending boot instead
            victim = max(bootings, key=lambda s: s.sid)
            del self.servers[victim.sid]
            self._log(self.clock, f"cancel server={victim.sid}")
        else:
            raise LastServer("last server")

    def apply_effector(self, d: AdaptationDecision):
        if d.action is Action.SET_DIMMER:
            self.set_dimmer(d.argument)
        elif d.action is Action.ADD_SERVER:
            self.add_server()
        elif d.action is Action.REMOVE_SERVER:
            self.remove_server()
        # DO_NOTHING touches nothing

    # -- probes --------------------------------------------------------------

    def window_length(self) -> float:
        return self.clock - self.window_start

    def utilization(self) -> float:
        length = self.window_length()
        actives = [s for s in self.servers.values() if s.state == ACTIVE]
        if length <= 0 or not actives:
            return 0.0
        for s in actives:
            s.accrue(self.clock)
        return sum(s.window_busy for s in actives) / (len(actives) * length)

    def basic_rt(self) -> float:
        if self.window_completed == 0:
            return 0.0
        return self.window_rt_sum / self.window_completed

    def arrival_rate(self) -> float:
        length = self.window_length()
        if length <= 0:
            return 0.0
        return self.window_arrivals / length

    def read_probe(self, metric: str) -> float:
        if metric == "dimmer":
            return self.dimmer
        if metric == "active_servers":
            return float(self.active_count() + self.booting_count())
        if metric == "max_servers":
            return float(self.config.max_servers)
        if metric == "utilization":
            return self.utilization()
        if metric == "basic_rt":
            return self.basic_rt()
        if metric == "arrival_rate":
            return self.arrival_rate()
        if metric == "time":
            return self.clock
        raise UnknownMetric(metric)

    def reset_window(self):
        for s in self.servers.values():
            s.accrue(self.clock)
            s.window_busy = 0.0
        self.window_start = self.clock
        self.window_arrivals = 0
        self.window_completed = 0
        self.window_rt_sum = 0.0
        self._accrue_area(self.clock)
        self._area_n = 0.0
        self._log(self.clock, "window_reset")

    def window_mean_in_system(self) -> float:
        """Time-average number in system over the current window."""
        self._accrue_area(self.clock)
        length = self.window_length()
        if length <= 0:
            return 0.0
        return self._area_n / length

    def drain_events(self) -> list[str]:
        out = list(self.events)
        self.events.clear()
        return out
