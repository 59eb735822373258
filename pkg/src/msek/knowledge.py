"""Shared knowledge for the managing system: the conversation history of
(context, decision) pairs, prompt templates, and per-run persistence.

History is persisted as JSON Lines, one (context, decision) pair per line,
appended and flushed before the execute stage runs, so a crashed run leaves a
loadable prefix behind.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .core import Action, AdaptationDecision, ContextSnapshot, Objective

HISTORY_FILE = "history.jsonl"
EVENTS_FILE = "events.log"


class OutOfOrderSnapshot(ValueError):
    pass


class CorruptRecord(ValueError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number


@dataclass
class ConversationHistory:
    """Ordered (context, decision) pairs, one appended per loop iteration."""

    entries: list[tuple[ContextSnapshot, AdaptationDecision]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def append(self, snapshot: ContextSnapshot, decision: AdaptationDecision):
        if self.entries and snapshot.sim_time <= self.entries[-1][0].sim_time:
            raise OutOfOrderSnapshot(
                f"snapshot at t={snapshot.sim_time} not after t={self.entries[-1][0].sim_time}"
            )
        self.entries.append((snapshot, decision))

    def window(self, k: int) -> list[tuple[ContextSnapshot, AdaptationDecision]]:
        if k < 0:
            raise ValueError("k must be >= 0")
        if k == 0:
            return []
        return self.entries[-k:]


def snapshot_to_dict(c: ContextSnapshot) -> dict:
    return {
        "dimmer": c.dimmer,
        "active_servers": c.active_servers,
        "max_servers": c.max_servers,
        "utilization": c.utilization,
        "avg_response_time": c.avg_response_time,
        "arrival_rate": c.arrival_rate,
        "sim_time": c.sim_time,
    }


def snapshot_from_dict(d: dict) -> ContextSnapshot:
    return ContextSnapshot(
        dimmer=d["dimmer"],
        active_servers=int(d["active_servers"]),
        max_servers=int(d["max_servers"]),
        utilization=d["utilization"],
        avg_response_time=d["avg_response_time"],
        arrival_rate=d["arrival_rate"],
        sim_time=d["sim_time"],
    )


def decision_to_dict(d: AdaptationDecision) -> dict:
    out = {"action": int(d.action), "raw_text": d.raw_text}
    if d.argument is not None:
        out["argument"] = d.argument
    return out


def decision_from_dict(d: dict) -> AdaptationDecision:
    return AdaptationDecision(
        Action(int(d["action"])), d.get("argument"), raw_text=d.get("raw_text", "")
    )


def entry_to_json(snapshot: ContextSnapshot, decision: AdaptationDecision) -> str:
    return json.dumps(
        {"context": snapshot_to_dict(snapshot), "decision": decision_to_dict(decision)},
        separators=(",", ":"),
    )


def load_history(path: Path) -> ConversationHistory:
    history = ConversationHistory()
    if not path.exists():
        return history
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                snapshot = snapshot_from_dict(record["context"])
                decision = decision_from_dict(record["decision"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptRecord(n, str(exc)) from None
            history.entries.append((snapshot, decision))
    return history


@dataclass
class PromptTemplate:
    """System-message skeleton plus the few-shot exemplars injected into it.

    ``system_preamble`` and ``user_template`` are plain text with named
    placeholders; supported names are {objective}, {terminologies},
    {few_shot}, {history}, {context} and {actions}.
    """

    system_preamble: str
    objective_text: str
    terminologies: str
    few_shot: list[tuple[ContextSnapshot, AdaptationDecision]]
    user_template: str = "{context}\n\n{actions}\n\nReply with one action line."

    def __post_init__(self):
        if not self.objective_text.strip():
            raise ValueError("objective_text must be non-empty")


DEFAULT_TERMINOLOGIES = (
    "dimmer: fraction of requests served with optional content; "
    "active_servers: servers serving or booting; "
    "max_servers: pool limit; "
    "utilization: mean busy fraction of serving servers this window; "
    "avg_response_time: mean seconds per request completed this window; "
    "arrival_rate: requests per second this window; "
    "time: seconds of simulated time."
)


def _read_data(name: str) -> str:
    return resources.files("msek.data").joinpath(name).read_text(encoding="utf-8")


def load_few_shot(text: str | None = None) -> list[tuple[ContextSnapshot, AdaptationDecision]]:
    if text is None:
        text = _read_data("few_shot.jsonl")
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            pairs.append(
                (snapshot_from_dict(record["context"]), decision_from_dict(record["decision"]))
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptRecord(n, str(exc)) from None
    return pairs


def default_template(objective: Objective | None = None) -> PromptTemplate:
    return PromptTemplate(
        system_preamble=_read_data("system_prompt.txt"),
        objective_text=(objective or Objective()).render(),
        terminologies=DEFAULT_TERMINOLOGIES,
        few_shot=load_few_shot(),
    )


def load_template(templates_dir: Path, objective: Objective | None = None) -> PromptTemplate:
    """Templates from a directory: system_prompt.txt (required), optional
    terminologies.txt and few_shot.jsonl override the bundled defaults."""
    preamble = (templates_dir / "system_prompt.txt").read_text(encoding="utf-8")
    terms_path = templates_dir / "terminologies.txt"
    terms = terms_path.read_text(encoding="utf-8") if terms_path.exists() else DEFAULT_TERMINOLOGIES
    shots_path = templates_dir / "few_shot.jsonl"
    shots = (
        load_few_shot(shots_path.read_text(encoding="utf-8"))
        if shots_path.exists()
        else load_few_shot()
    )
    return PromptTemplate(
        system_preamble=preamble,
        objective_text=(objective or Objective()).render(),
        terminologies=terms,
        few_shot=shots,
    )


class Knowledge:
    """Run-scoped store: history (persisted), templates, config, event log."""

    def __init__(self, run_dir: Path | None, template: PromptTemplate):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.template = template
        self.history = ConversationHistory()
        self._history_fh = None
        self._events_fh = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            # a run owns its directory: start both files fresh
            self._history_fh = open(self.run_dir / HISTORY_FILE, "w", encoding="utf-8")
            self._events_fh = open(self.run_dir / EVENTS_FILE, "w", encoding="utf-8")

    def append(self, snapshot: ContextSnapshot, decision: AdaptationDecision):
        self.history.append(snapshot, decision)
        if self._history_fh is not None:
            self._history_fh.write(entry_to_json(snapshot, decision) + "\n")
            self._history_fh.flush()

    def record_events(self, lines: list[str]):
        if self._events_fh is not None and lines:
            self._events_fh.write("\n".join(lines) + "\n")
            self._events_fh.flush()

    def close(self):
        for fh in (self._history_fh, self._events_fh):
            if fh is not None:
                fh.close()
        self._history_fh = None
        self._events_fh = None
