"""Decision synthesis: assemble the prompt from the current context plus as
much conversation history as the token budget allows, invoke an engine
(chat-completion HTTP, deterministic rule oracle, or transcript replay), and
parse the reply into an adaptation decision.

Token accounting is the ceil(chars / 4) heuristic; truncation drops the
oldest history pairs first, so a larger budget always keeps a superset
(suffix) of what a smaller budget kept.
"""

from __future__ import annotations

import math
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .core import (
    ACTIONS_BLOCK,
    AdaptationDecision,
    ContextSnapshot,
    decode_decision,
    encode_decision,
    parse_snapshot,
    render_snapshot,
    set_dimmer,
)
from .knowledge import ConversationHistory, PromptTemplate

API_KEY_ENV = "MSEK_API_KEY"


class PromptError(ValueError):
    pass


class BudgetTooSmall(PromptError):
    pass


class EngineError(Exception):
    pass


class EngineTimeout(EngineError):
    pass


class EngineHttpError(EngineError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"engine returned HTTP {status}")
        self.status = status
        self.body = body


class ReplayExhausted(EngineError):
    pass


class ResponseParseError(ValueError):
    pass


class NoDecisionFound(ResponseParseError):
    pass


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant
    content: str


@dataclass(frozen=True)
class Prompt:
    messages: tuple[Message, ...]
    token_estimate: int
    history_included: int  # how many history pairs survived truncation

    def last_user_content(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.content
        raise ValueError("prompt has no user message")


def estimate_tokens(chars: int) -> int:
    return math.ceil(chars / 4)


def render_few_shot(pairs) -> str:
    blocks = []
    for snapshot, decision in pairs:
        blocks.append(f"{render_snapshot(snapshot)}\ndecision: {encode_decision(decision)}")
    return "\n\n".join(blocks) if blocks else "(none)"


def fill_template(text: str, mapping: dict[str, str]) -> str:
    for key, value in mapping.items():
        text = text.replace("{" + key + "}", value)
    return text


def generate_prompt(
    snapshot: ContextSnapshot,
    history: ConversationHistory,
    template: PromptTemplate,
    budget: int,
    feedback: str | None = None,
) -> Prompt:
    """System message + largest history suffix that fits + current context.

    ``feedback`` (a verifier rejection, typically) is appended to the final
    user message and participates in the budget.
    """
    mapping = {
        "objective": template.objective_text,
        "terminologies": template.terminologies,
        "few_shot": render_few_shot(template.few_shot),
        "history": "",
        "context": render_snapshot(snapshot),
        "actions": ACTIONS_BLOCK,
    }
    system = Message("system", fill_template(template.system_preamble, mapping))
    user_text = fill_template(template.user_template, mapping)
    if feedback:
        user_text += f"\n\n{feedback}"
    current = Message("user", user_text)

    fixed_chars = len(system.content) + len(current.content)
    if estimate_tokens(fixed_chars) > budget:
        raise BudgetTooSmall(
            f"fixed prompt needs {estimate_tokens(fixed_chars)} tokens, budget is {budget}"
        )

    pair_messages = []
    for past_snapshot, past_decision in history.entries:
        pair_messages.append(
            (
                Message("user", render_snapshot(past_snapshot)),
                Message("assistant", encode_decision(past_decision)),
            )
        )
    # grow the suffix newest-first until the next pair would overflow
    included: list[tuple[Message, Message]] = []
    chars = fixed_chars
    for pair in reversed(pair_messages):
        pair_chars = len(pair[0].content) + len(pair[1].content)
        if estimate_tokens(chars + pair_chars) > budget:
            break
        chars += pair_chars
        included.append(pair)
    included.reverse()

    messages = [system]
    for user_msg, assistant_msg in included:
        messages.extend((user_msg, assistant_msg))
    messages.append(current)
    return Prompt(tuple(messages), estimate_tokens(chars), len(included))


_DECISION_RE = re.compile(r"(?<![\w.])([1-4])(?:[ \t]+(\d+(?:\.\d+)?))?(?!\w|\.\d)")
_STRICT_RE = re.compile(r"^([1-4])(?:\s+(\d+(?:\.\d+)?))?$")


def parse_response(raw: str, strict: bool = False) -> AdaptationDecision:
    """Find the first decision-shaped substring and decode it.

    Lenient scanning tolerates surrounding prose; strict mode requires the
    whole (stripped) reply to be a single decision line.
    """
    if strict:
        m = _STRICT_RE.match(raw.strip())
    else:
        m = _DECISION_RE.search(raw)
    if m is None:
        raise NoDecisionFound(f"no decision in {raw!r}")
    line = m.group(1) if m.group(2) is None else f"{m.group(1)} {m.group(2)}"
    decoded = decode_decision(line)
    return AdaptationDecision(decoded.action, decoded.argument, raw_text=raw)


@dataclass
class EngineConfig:
    kind: str = "mock"  # http | mock | replay
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "gpt-4"
    temperature: float = 0.0
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 0.5
    replay_path: Path | None = None
    rt_threshold: float = 0.1  # drives the rule oracle

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature outside [0, 2]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class HttpChatEngine:
    """Chat-completion client: POST {model, temperature, messages}, read
    choices[0].message.content. Retries transport errors and 5xx responses
    with exponential backoff; 4xx fails immediately."""

    def __init__(self, cfg: EngineConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.session = session or requests.Session()

    def invoke(self, prompt: Prompt) -> str:
        body = {
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [{"role": m.role, "content": m.content} for m in prompt.messages],
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_error: EngineError | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                time.sleep(self.cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    self.cfg.endpoint, json=body, headers=headers, timeout=self.cfg.timeout
                )
            except requests.Timeout:
                last_error = EngineTimeout(f"no reply within {self.cfg.timeout}s")
                continue
            except requests.RequestException as exc:
                last_error = EngineError(f"transport failure: {exc}")
                continue
            if resp.status_code >= 500:
                last_error = EngineHttpError(resp.status_code, resp.text)
                continue
            if resp.status_code != 200:
                raise EngineHttpError(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EngineError(f"malformed completion body: {exc}") from None
        raise last_error if last_error is not None else EngineError("engine failed")


class MockOracleEngine:
    """Deterministic stand-in for the LLM: reads the status block out of the
    prompt and applies a fixed rule table mirroring the objective priorities.
    Same snapshot in, same text out, and the text always parses."""

    def __init__(self, rt_threshold: float = 0.1):
        self.rt_threshold = rt_threshold

    def decide_text(self, c: ContextSnapshot) -> str:
        rt, half = c.avg_response_time, self.rt_threshold / 2.0
        if rt > self.rt_threshold and c.active_servers < c.max_servers:
            return "2"
        if rt > self.rt_threshold and c.active_servers >= c.max_servers and c.dimmer > 0.1:
            return encode_decision(set_dimmer(round(c.dimmer - 0.1, 2)))
        if rt <= half and c.dimmer < 1.0:
            return encode_decision(set_dimmer(min(1.0, round(c.dimmer + 0.1, 2))))
        if rt <= half and c.dimmer == 1.0 and c.utilization < 0.4 and c.active_servers > 1:
            return "3"
        return "4"

    def invoke(self, prompt: Prompt) -> str:
        return self.decide_text(parse_snapshot(prompt.last_user_content()))


class ReplayEngine:
    """Replays a recorded transcript, one raw engine output per invocation.
    Newlines inside an output are stored escaped so the file stays one line
    per output."""

    def __init__(self, lines: list[str]):
        self._lines = list(lines)
        self._next = 0

    @classmethod
    def from_file(cls, path: Path) -> "ReplayEngine":
        raw = Path(path).read_text(encoding="utf-8")
        return cls([unescape_transcript_line(ln) for ln in raw.splitlines()])

    def invoke(self, prompt: Prompt) -> str:
        if self._next >= len(self._lines):
            raise ReplayExhausted(f"transcript exhausted after {self._next} replies")
        line = self._lines[self._next]
        self._next += 1
        return line


def escape_transcript_line(raw: str) -> str:
    return raw.replace("\\", "\\\\").replace("\n", "\\n")


def unescape_transcript_line(line: str) -> str:
    out = []
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == "\\" and i + 1 < len(line):
            nxt = line[i + 1]
            if nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt == "\\":
                out.append("\\")
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def build_engine(cfg: EngineConfig):
    if cfg.kind == "http":
        return HttpChatEngine(cfg)
    if cfg.kind == "mock":
        return MockOracleEngine(cfg.rt_threshold)
    if cfg.kind == "replay":
        if cfg.replay_path is None:
            raise ValueError("replay engine needs a transcript path")
        return ReplayEngine.from_file(cfg.replay_path)
    raise ValueError(f"unknown engine kind {cfg.kind!r}")
