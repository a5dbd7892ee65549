"""Draft-and-verify orchestration.

One round: consult the k policy, launch approx and target calls for up to k
steps (each next pair launches when the previous step's optimistic execution
finishes, and both calls of a pair share the same prefix), verify each step
when both of its calls have returned, and on a mismatch cancel everything
beyond it. Committed actions always come from the target agent, so the
committed plan is identical to what the target would have produced alone.

The same coordinator runs on a virtual-time scheduler (deterministic
simulation from scripted traces) or a wall-clock scheduler (real threads
against a live backend).
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

from .agents import EndpointConfig, LiveBackend, LiveCompletion, SimBackend, StepScript
from .core import (
    APPROX,
    CANCELED,
    COMPLETED,
    TARGET,
    Action,
    CallRecord,
    PlanState,
    PriceTable,
    VirtualClock,
)

PRIO_CALL = 0
PRIO_PREDICTOR = 1
PRIO_EXEC = 2

_UNKILLED = 1 << 30

MISMATCH = "mismatch"
ALL_MATCH = "all_match"
SEQUENTIAL = "sequential"
TASK_END = "task_end"

MatchPredicate = Callable[[Action, Action], bool]


def exact_match(approx_action: Action, target_action: Action) -> bool:
    """Default verification predicate: exact equality of normalized text."""
    return approx_action == target_action


class PolicyFailure(RuntimeError):
    """The k policy returned something unusable."""


class BackendFailure(RuntimeError):
    """An agent call failed; carries the ledger collected so far."""

    def __init__(self, message: str, partial_ledger: list[CallRecord]):
        super().__init__(message)
        self.partial_ledger = partial_ledger


class KPolicy(Protocol):
    """Chooses the speculation depth for a round. 0 means run the round
    sequentially (target only, no speculation labels)."""

    name: str

    def k_for(self, state: PlanState) -> int: ...

    def observe_round(self, record: "RoundRecord") -> None: ...


@dataclass(frozen=True)
class RoundPlan:
    round_id: int
    start_state: PlanState
    k: int
    policy_name: str


@dataclass(frozen=True)
class StepOutcome:
    step: int
    approx_action: Action | None
    target_action: Action
    matched: bool
    committed_action: Action
    observation: str

    @property
    def speculated(self) -> bool:
        return self.approx_action is not None


@dataclass(frozen=True)
class MatchRun:
    """States visited by one maximal run of verified matches.

    ``states[i]`` is the state the (i+1)-th step of the run was taken from;
    for a mismatch-terminated run the last state is the one whose speculated
    step failed verification.
    """

    states: tuple[PlanState, ...]
    terminal: str  # MISMATCH or TASK_END

    @property
    def length(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class RoundRecord:
    """Round log entry. ``k`` is the effective issued depth after clamping
    to the steps remaining; ``policy_k`` is what the policy asked for and is
    not part of the external schema."""

    round_id: int
    start_step: int
    k: int
    matched_count: int
    terminal: str  # MISMATCH, ALL_MATCH or SEQUENTIAL
    policy_k: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "round_id": self.round_id,
            "start_step": self.start_step,
            "k": self.k,
            "matched_count": self.matched_count,
            "terminal": self.terminal,
        }


@dataclass
class TaskResult:
    task_id: str
    committed: list[Action]
    total_time_ms: int
    ledger: list[CallRecord]
    outcomes: list[StepOutcome]
    rounds: list[RoundRecord]
    initial_state: PlanState
    final_state: PlanState

    @property
    def runs(self) -> list[MatchRun]:
        return extract_runs(self.outcomes, self.initial_state)


@dataclass
class BaselineCosts:
    """Sequential reference quantities for one task.

    Time is target-only (target latency plus execution per step); token sums
    cover both agents each planning every step exactly once.
    """

    time_ms: int = 0
    approx_prompt: int = 0
    approx_gen: int = 0
    target_prompt: int = 0
    target_gen: int = 0

    @property
    def prompt_total(self) -> int:
        return self.approx_prompt + self.target_prompt

    @property
    def gen_total(self) -> int:
        return self.approx_gen + self.target_gen

    def cost(self, prices: PriceTable) -> float:
        return (
            self.approx_prompt / 1e6 * prices.approx_prompt
            + self.approx_gen / 1e6 * prices.approx_gen
            + self.target_prompt / 1e6 * prices.target_prompt
            + self.target_gen / 1e6 * prices.target_gen
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "time_ms": self.time_ms,
            "approx_prompt": self.approx_prompt,
            "approx_gen": self.approx_gen,
            "target_prompt": self.target_prompt,
            "target_gen": self.target_gen,
        }


def sequential_baseline(steps: Sequence[StepScript]) -> BaselineCosts:
    base = BaselineCosts()
    for s in steps:
        base.time_ms += s.target_latency_ms + s.exec_latency_ms
        base.approx_prompt += s.approx_prompt_tokens
        base.approx_gen += s.approx_gen_tokens
        base.target_prompt += s.target_prompt_tokens
        base.target_gen += s.target_gen_tokens
    return base


def verify(approx_action: Action, target_action: Action, match_pred: MatchPredicate = exact_match) -> bool:
    return match_pred(approx_action, target_action)


def extract_runs(outcomes: Sequence[StepOutcome], initial_state: PlanState) -> list[MatchRun]:
    """Partition committed steps into maximal match runs.

    Runs accumulate across round boundaries. A non-speculated (sequential)
    step closes any open run without a mismatch, as does task end.
    """
    runs: list[MatchRun] = []
    pending: list[PlanState] = []
    state = initial_state
    for outcome in outcomes:
        if outcome.speculated:
            pending.append(state)
            if not outcome.matched:
                runs.append(MatchRun(tuple(pending), MISMATCH))
                pending = []
        elif pending:
            runs.append(MatchRun(tuple(pending), TASK_END))
            pending = []
        state = state.append(outcome.committed_action, outcome.observation)
    if pending:
        runs.append(MatchRun(tuple(pending), TASK_END))
    return runs


@dataclass
class _CallHandle:
    role: str
    step: int
    round_id: int
    start_ms: int
    done: bool = False
    canceled: bool = False
    action: Action | None = None
    # sim fields
    latency_ms: int = 0
    natural_end_ms: int = 0
    prompt_tokens: int = 0
    gen_tokens_full: int = 0
    # live fields
    cancel_flag: threading.Event | None = None
    result: Any = None
    end_ms: int = 0


class SimScheduler:
    """Virtual-time scheduler over one scripted task.

    Completion, cancellation and execution all resolve by script arithmetic,
    so a run is a pure function of the trace and the policy's choices.
    """

    mode = "sim"

    def __init__(self, backend: SimBackend, start_ms: int = 0) -> None:
        self.backend = backend
        self.clock = VirtualClock(start_ms)

    @property
    def now(self) -> int:
        return self.clock.now

    def begin_round(self) -> None:
        self.backend.begin_round()

    def observation_for(self, step: int) -> str:
        return self.backend.trace.step(step).observation

    def start_call(self, role: str, step: int, state: PlanState, round_id: int) -> _CallHandle:
        script = self.backend.issue(role, step)
        if role == APPROX:
            latency = script.approx_latency_ms
            prompt, gen = script.approx_prompt_tokens, script.approx_gen_tokens
            action = script.approx_action
        else:
            latency = script.target_latency_ms
            prompt, gen = script.target_prompt_tokens, script.target_gen_tokens
            action = script.target_action
        handle = _CallHandle(
            role=role,
            step=step,
            round_id=round_id,
            start_ms=self.now,
            latency_ms=latency,
            natural_end_ms=self.now + latency,
            prompt_tokens=prompt,
            gen_tokens_full=gen,
            action=action,
        )
        self.clock.push(handle.natural_end_ms, PRIO_CALL, ("call", handle))
        return handle

    def cancel_call(self, handle: _CallHandle) -> CallRecord | None:
        # A call whose natural end has arrived (or passed) completes instead.
        if handle.done or handle.canceled or handle.natural_end_ms <= self.now:
            return None
        handle.canceled = True
        elapsed = self.now - handle.start_ms
        return CallRecord(
            role=handle.role,
            step=handle.step,
            start_ms=handle.start_ms,
            end_ms=self.now,
            prompt_tokens=handle.prompt_tokens,
            gen_tokens=handle.gen_tokens_full * elapsed // handle.latency_ms,
            status=CANCELED,
            round_id=handle.round_id,
        )

    def finalize(self, handle: _CallHandle) -> CallRecord | None:
        if handle.canceled:
            return None  # stale completion event for an already-canceled call
        handle.done = True
        return CallRecord(
            role=handle.role,
            step=handle.step,
            start_ms=handle.start_ms,
            end_ms=handle.natural_end_ms,
            prompt_tokens=handle.prompt_tokens,
            gen_tokens=handle.gen_tokens_full,
            status=COMPLETED,
            round_id=handle.round_id,
        )

    def start_exec(self, step: int, round_id: int, corrective: bool = False) -> None:
        latency = self.backend.trace.step(step).exec_latency_ms
        kind = "corrective" if corrective else "exec"
        self.clock.push(self.now + latency, PRIO_EXEC, (kind, (round_id, step)))

    def schedule_predictor_ready(self, delay_ms: int, round_id: int) -> None:
        self.clock.push(self.now + delay_ms, PRIO_PREDICTOR, ("k_ready", (round_id, 0)))

    def next_event(self) -> tuple[str, Any]:
        if not self.clock:
            raise RuntimeError("event queue drained before the round finished")
        _, _, _, payload = self.clock.pop()
        return payload


class LiveScheduler:
    """Wall-clock scheduler: real threads, real cancellation.

    Call threads and execution timers post events into one queue consumed by
    the coordinator, which is the only writer of engine state.
    """

    mode = "live"

    def __init__(self, backend: LiveBackend, cfg: EndpointConfig) -> None:
        self.backend = backend
        self.cfg = cfg
        self._queue: "queue.Queue[tuple[str, Any]]" = queue.Queue()
        self._t0 = time.monotonic()
        self.now = 0

    def _now_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def begin_round(self) -> None:
        pass

    def observation_for(self, step: int) -> str:
        return self.cfg.observation_text

    def start_call(self, role: str, step: int, state: PlanState, round_id: int) -> _CallHandle:
        handle = _CallHandle(
            role=role,
            step=step,
            round_id=round_id,
            start_ms=self._now_ms(),
            cancel_flag=threading.Event(),
        )

        def worker() -> None:
            try:
                handle.result = self.backend.complete(role, state, handle.cancel_flag)
            except Exception as exc:  # surfaced by finalize on the coordinator
                handle.result = exc
            handle.end_ms = self._now_ms()
            self._queue.put(("call", handle))

        threading.Thread(target=worker, daemon=True).start()
        return handle

    def cancel_call(self, handle: _CallHandle) -> CallRecord | None:
        if not handle.done and handle.cancel_flag is not None:
            handle.cancel_flag.set()
        return None  # the canceled record arrives with the call's own event

    def finalize(self, handle: _CallHandle) -> CallRecord | None:
        handle.done = True
        result = handle.result
        if isinstance(result, Exception):
            raise result
        assert isinstance(result, LiveCompletion)
        if result.canceled:
            handle.canceled = True
            return CallRecord(
                role=handle.role,
                step=handle.step,
                start_ms=handle.start_ms,
                end_ms=handle.end_ms,
                prompt_tokens=result.prompt_tokens,
                gen_tokens=result.gen_tokens,
                status=CANCELED,
                round_id=handle.round_id,
            )
        handle.action = result.action
        return CallRecord(
            role=handle.role,
            step=handle.step,
            start_ms=handle.start_ms,
            end_ms=handle.end_ms,
            prompt_tokens=result.prompt_tokens,
            gen_tokens=result.gen_tokens,
            status=COMPLETED,
            round_id=handle.round_id,
        )

    def start_exec(self, step: int, round_id: int, corrective: bool = False) -> None:
        kind = "corrective" if corrective else "exec"
        delay = self.cfg.exec_latency_ms / 1000.0
        threading.Timer(delay, lambda: self._queue.put((kind, (round_id, step)))).start()

    def schedule_predictor_ready(self, delay_ms: int, round_id: int) -> None:
        threading.Timer(delay_ms / 1000.0, lambda: self._queue.put(("k_ready", (round_id, 0)))).start()

    def next_event(self) -> tuple[str, Any]:
        payload = self._queue.get()
        self.now = self._now_ms()
        return payload


@dataclass
class _RoundState:
    round_id: int
    start_step: int
    k_eff: int
    start_state: PlanState
    k_known: bool = True
    handles: dict[tuple[str, int], _CallHandle] = field(default_factory=dict)
    approx_actions: dict[int, Action] = field(default_factory=dict)
    target_actions: dict[int, Action] = field(default_factory=dict)
    verified: dict[int, bool] = field(default_factory=dict)
    exec_done: set[int] = field(default_factory=set)
    killed_from: int = _UNKILLED
    resolved: bool = False
    stalled_launch: int | None = None
    finished: bool = False
    end_terminal: str = ALL_MATCH
    optimistic: list[Action] = field(default_factory=list)  # draft prefix for live prompts


class Engine:
    """Runs one task at a time under a k policy on the given scheduler."""

    def __init__(
        self,
        scheduler: SimScheduler | LiveScheduler,
        policy: KPolicy,
        match_pred: MatchPredicate = exact_match,
        predictor_latency_ms: int = 0,
        stop_marker: str | None = None,
        first_round_id: int = 0,
    ) -> None:
        self.scheduler = scheduler
        self.policy = policy
        self.match_pred = match_pred
        self.predictor_latency_ms = predictor_latency_ms
        self.stop_marker = stop_marker
        self.next_round_id = first_round_id

    def run_task(self, task_id: str, task_prompt: str, n_steps: int) -> TaskResult:
        state = PlanState(task_prompt)
        initial_state = state
        ledger: list[CallRecord] = []
        outcomes: list[StepOutcome] = []
        rounds: list[RoundRecord] = []
        cursor = 1
        stopped = False
        try:
            while cursor <= n_steps and not stopped:
                policy_k = self.policy.k_for(state)
                if not isinstance(policy_k, int) or policy_k < 0:
                    raise PolicyFailure(f"policy {self.policy.name} returned k={policy_k!r}")
                if self.predictor_latency_ms > 0 and policy_k < 1:
                    raise PolicyFailure("predictor latency modeling requires k >= 1")
                k_eff = min(policy_k, n_steps - cursor + 1)
                round_id = self.next_round_id
                self.next_round_id += 1
                round_outcomes, terminal = self._run_round(state, cursor, k_eff, round_id, ledger)
                matched_count = sum(1 for o in round_outcomes if o.speculated and o.matched)
                record = RoundRecord(
                    round_id=round_id,
                    start_step=cursor,
                    k=k_eff,
                    matched_count=matched_count,
                    terminal=terminal,
                    policy_k=policy_k,
                )
                rounds.append(record)
                self.policy.observe_round(record)
                for outcome in round_outcomes:
                    outcomes.append(outcome)
                    state = state.append(outcome.committed_action, outcome.observation)
                    cursor += 1
                    if self.stop_marker is not None and outcome.committed_action.text == self.stop_marker:
                        stopped = True
                        break
        except (PolicyFailure, BackendFailure):
            raise
        except Exception as exc:
            raise BackendFailure(str(exc), ledger) from exc
        return TaskResult(
            task_id=task_id,
            committed=[o.committed_action for o in outcomes],
            total_time_ms=self.scheduler.now,
            ledger=ledger,
            outcomes=outcomes,
            rounds=rounds,
            initial_state=initial_state,
            final_state=state,
        )

    def _run_round(
        self,
        state: PlanState,
        start_step: int,
        k_eff: int,
        round_id: int,
        ledger: list[CallRecord],
    ) -> tuple[list[StepOutcome], str]:
        self.scheduler.begin_round()
        if k_eff == 0:
            return self._run_sequential_step(state, start_step, round_id, ledger), SEQUENTIAL

        rs = _RoundState(round_id=round_id, start_step=start_step, k_eff=k_eff, start_state=state)
        if self.predictor_latency_ms > 0:
            rs.k_known = False
            self.scheduler.schedule_predictor_ready(self.predictor_latency_ms, round_id)
        self._launch(rs, 1)
        while not rs.finished:
            kind, data = self.scheduler.next_event()
            if kind == "call":
                self._on_call_event(rs, data, ledger)
            elif kind == "exec":
                if data[0] == round_id:
                    self._on_exec_done(rs, data[1] - start_step + 1)
            elif kind == "corrective":
                if data[0] == round_id:
                    rs.finished = True
                    rs.end_terminal = MISMATCH
            elif kind == "k_ready":
                if data[0] == round_id:
                    self._on_k_ready(rs)
            else:  # pragma: no cover - defensive
                raise RuntimeError(f"unknown event {kind}")

        last = rs.killed_from if rs.end_terminal == MISMATCH else k_eff
        outcomes = []
        for j in range(1, last + 1):
            step = start_step + j - 1
            target_action = rs.target_actions[j]
            outcomes.append(
                StepOutcome(
                    step=step,
                    approx_action=rs.approx_actions[j],
                    target_action=target_action,
                    matched=rs.verified[j],
                    committed_action=target_action,
                    observation=self.scheduler.observation_for(step),
                )
            )
        return outcomes, rs.end_terminal

    def _run_sequential_step(
        self, state: PlanState, step: int, round_id: int, ledger: list[CallRecord]
    ) -> list[StepOutcome]:
        self.scheduler.start_call(TARGET, step, state, round_id)
        target_action: Action | None = None
        while True:
            kind, data = self.scheduler.next_event()
            if kind == "call":
                record = self.scheduler.finalize(data)
                if record is None:
                    continue
                ledger.append(record)
                if record.status == COMPLETED and data.round_id == round_id:
                    target_action = data.action
                    self.scheduler.start_exec(step, round_id)
            elif kind == "exec" and data[0] == round_id:
                break
        assert target_action is not None
        return [
            StepOutcome(
                step=step,
                approx_action=None,
                target_action=target_action,
                matched=False,
                committed_action=target_action,
                observation=self.scheduler.observation_for(step),
            )
        ]

    def _launch(self, rs: _RoundState, j: int) -> None:
        step = rs.start_step + j - 1
        prefix = rs.start_state
        for offset, action in enumerate(rs.optimistic[: j - 1]):
            prefix = prefix.append(action, self.scheduler.observation_for(rs.start_step + offset))
        for role in (APPROX, TARGET):
            rs.handles[(role, j)] = self.scheduler.start_call(role, step, prefix, rs.round_id)

    def _on_call_event(self, rs: _RoundState, handle: _CallHandle, ledger: list[CallRecord]) -> None:
        record = self.scheduler.finalize(handle)
        if record is None:
            return
        ledger.append(record)
        if record.status == CANCELED or handle.round_id != rs.round_id:
            return  # canceled, or a live straggler from an earlier round
        j = handle.step - rs.start_step + 1
        assert handle.action is not None
        if handle.role == APPROX:
            rs.approx_actions[j] = handle.action
            if len(rs.optimistic) == j - 1:
                rs.optimistic.append(handle.action)
            self.scheduler.start_exec(handle.step, rs.round_id)
        else:
            rs.target_actions[j] = handle.action
        if j in rs.approx_actions and j in rs.target_actions and j not in rs.verified:
            self._verify(rs, j, ledger)

    def _verify(self, rs: _RoundState, j: int, ledger: list[CallRecord]) -> None:
        matched = self.match_pred(rs.approx_actions[j], rs.target_actions[j])
        rs.verified[j] = matched
        if not matched:
            rs.killed_from = min(rs.killed_from, j)
            # Invalidated speculation: cancel whatever is still in flight
            # beyond the mismatched step. Calls whose natural end has already
            # arrived complete normally and are counted as redundant later.
            for (_, jj), handle in rs.handles.items():
                if jj > j:
                    record = self.scheduler.cancel_call(handle)
                    if record is not None:
                        ledger.append(record)
        self._maybe_resolve_mismatch(rs)
        if matched:
            self._maybe_finish_all_match(rs)

    def _maybe_resolve_mismatch(self, rs: _RoundState) -> None:
        i_star = rs.killed_from
        if rs.resolved or i_star == _UNKILLED:
            return
        if all(rs.verified.get(j) is True for j in range(1, i_star)):
            # Whole prefix confirmed: commit the target's corrective action.
            rs.resolved = True
            self.scheduler.start_exec(rs.start_step + i_star - 1, rs.round_id, corrective=True)

    def _maybe_finish_all_match(self, rs: _RoundState) -> None:
        if rs.killed_from != _UNKILLED or not rs.k_known:
            return
        all_verified = all(rs.verified.get(j) is True for j in range(1, rs.k_eff + 1))
        if all_verified and rs.k_eff in rs.exec_done:
            rs.finished = True
            rs.end_terminal = ALL_MATCH

    def _on_exec_done(self, rs: _RoundState, j: int) -> None:
        rs.exec_done.add(j)
        if j < rs.k_eff and rs.killed_from > j:
            if rs.k_known:
                self._launch(rs, j + 1)
            else:
                rs.stalled_launch = j + 1
        if j == rs.k_eff:
            self._maybe_finish_all_match(rs)

    def _on_k_ready(self, rs: _RoundState) -> None:
        rs.k_known = True
        if rs.stalled_launch is not None:
            j = rs.stalled_launch
            rs.stalled_launch = None
            if rs.killed_from > j - 1:
                self._launch(rs, j)
        self._maybe_finish_all_match(rs)
