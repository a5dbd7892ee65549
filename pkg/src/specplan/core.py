"""Shared domain types: actions, plan state, the call ledger, prices, virtual time.

Everything here is deterministic plumbing. Times are integer milliseconds,
token counts are integers, and money is float currency units.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

APPROX = "approx"
TARGET = "target"

COMPLETED = "completed"
CANCELED = "canceled"

# Ledger JSONL schema. Order matters: lines are emitted with exactly these keys.
LEDGER_FIELDS = (
    "role",
    "step",
    "start_ms",
    "end_ms",
    "prompt_tokens",
    "gen_tokens",
    "status",
    "round_id",
)


class EmptyAction(ValueError):
    """An action normalized to the empty string."""


@dataclass(frozen=True, order=True)
class Action:
    """A single normalized planning step.

    Construct through :func:`normalize_action`; direct construction skips
    validation and is reserved for deserialization of already-normal text.
    """

    text: str


def normalize_action(raw: str) -> Action:
    """Trim surrounding whitespace and collapse internal runs to one space.

    Case is preserved. Raises :class:`EmptyAction` when nothing remains.
    """
    text = " ".join(raw.split())
    if not text:
        raise EmptyAction("action text is empty after normalization")
    return Action(text)


@dataclass(frozen=True)
class PlanState:
    """The committed plan so far: task prompt plus (action, observation) pairs.

    Immutable; :meth:`append` returns a new state. ``step_index`` always
    equals the number of committed pairs.
    """

    task_prompt: str
    committed: tuple[tuple[Action, str], ...] = ()

    @property
    def step_index(self) -> int:
        return len(self.committed)

    def append(self, action: Action, observation: str) -> "PlanState":
        return PlanState(self.task_prompt, self.committed + ((action, observation),))

    def as_text(self) -> str:
        """Serialize to a single text block for featurization.

        The most recent observation is echoed on a trailing line with a
        ``cur:`` prefix per token, so bag-of-words featurizers get an
        unambiguous recency cue on top of the accumulated history.
        """
        lines = [self.task_prompt]
        for action, obs in self.committed:
            lines.append(f"{action.text} => {obs}")
        if self.committed:
            last_obs = self.committed[-1][1]
            lines.append("now " + " ".join("cur:" + tok for tok in last_obs.split()))
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_prompt": self.task_prompt,
            "committed": [[a.text, obs] for a, obs in self.committed],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PlanState":
        committed = tuple((Action(a), obs) for a, obs in data["committed"])
        return cls(data["task_prompt"], committed)


@dataclass
class CallRecord:
    """One agent invocation in the ledger.

    ``gen_tokens``/``prompt_tokens`` may be None only in live mode when the
    endpoint returned no usage data (explicit marker, never silently zero).
    """

    role: str
    step: int
    start_ms: int
    end_ms: int
    prompt_tokens: int | None
    gen_tokens: int | None
    status: str
    round_id: int

    def __post_init__(self) -> None:
        if self.role not in (APPROX, TARGET):
            raise ValueError(f"unknown role {self.role!r}")
        if self.status not in (COMPLETED, CANCELED):
            raise ValueError(f"unknown status {self.status!r}")
        if self.end_ms < self.start_ms:
            raise ValueError("call ends before it starts")

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in LEDGER_FIELDS}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CallRecord":
        return cls(**{name: data[name] for name in LEDGER_FIELDS})


@dataclass(frozen=True)
class PriceTable:
    """Currency per million tokens, split by role and token kind."""

    approx_prompt: float = 0.40
    approx_gen: float = 1.60
    target_prompt: float = 0.40
    target_gen: float = 1.60

    def __post_init__(self) -> None:
        for name in ("approx_prompt", "approx_gen", "target_prompt", "target_gen"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative price {name}")

    def prompt_price(self, role: str) -> float:
        return self.approx_prompt if role == APPROX else self.target_prompt

    def gen_price(self, role: str) -> float:
        return self.approx_gen if role == APPROX else self.target_gen

    def to_dict(self) -> dict[str, float]:
        return {
            "approx_prompt": self.approx_prompt,
            "approx_gen": self.approx_gen,
            "target_prompt": self.target_prompt,
            "target_gen": self.target_gen,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PriceTable":
        return cls(**data)


def call_cost(record: CallRecord, prices: PriceTable) -> float:
    """Cost of one call: token counts scaled to millions times the role price."""
    if record.prompt_tokens is None or record.gen_tokens is None:
        raise ValueError("cannot price a record with missing usage")
    return (
        record.prompt_tokens / 1e6 * prices.prompt_price(record.role)
        + record.gen_tokens / 1e6 * prices.gen_price(record.role)
    )


class VirtualClock:
    """Deterministic event queue over integer-millisecond virtual time.

    Events at equal time fire in (priority, insertion sequence) order and
    time never goes backwards. Single-owner: one logical executor drives it.
    """

    def __init__(self, start_ms: int = 0) -> None:
        self.now = start_ms
        self._heap: list[tuple[int, int, int, Any]] = []
        self._seq = itertools.count()

    def push(self, at_ms: int, priority: int, payload: Any) -> None:
        if at_ms < self.now:
            raise ValueError(f"cannot schedule at {at_ms} before now {self.now}")
        heapq.heappush(self._heap, (at_ms, priority, next(self._seq), payload))

    def pop(self) -> tuple[int, int, int, Any]:
        at_ms, priority, seq, payload = heapq.heappop(self._heap)
        self.now = at_ms
        return at_ms, priority, seq, payload

    def __bool__(self) -> bool:
        return bool(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


def dump_jsonl(rows: Iterable[dict[str, Any]]) -> str:
    """Render rows as compact JSONL. Key order is preserved as given."""
    return "".join(json.dumps(row, separators=(",", ":")) + "\n" for row in rows)


def load_jsonl(text: str) -> Iterator[dict[str, Any]]:
    for line in text.splitlines():
        line = line.strip()
        if line:
            yield json.loads(line)


def write_jsonl(path: str, rows: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_jsonl(rows))


def read_jsonl(path: str) -> list[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        return list(load_jsonl(fh.read()))
