"""Agent backends: scripted traces, a synthetic task generator, and a live HTTP driver."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, fields
from typing import Any, Callable

import httpx
import numpy as np

from .core import Action, PlanState, normalize_action

END_TAG = "end"


class StepOutOfRange(IndexError):
    """A call was issued for a step the trace cannot serve."""


class ConfigError(ValueError):
    """Invalid generator or endpoint configuration."""


class AuthError(RuntimeError):
    """Missing credential or a 401/403 from the endpoint."""


class HttpError(RuntimeError):
    """Non-auth HTTP failure from the endpoint."""


class ParseError(RuntimeError):
    """The endpoint returned a completion we cannot interpret."""


@dataclass(frozen=True)
class StepScript:
    """Ground truth for one step of a scripted task."""

    target_action: Action
    approx_action: Action
    approx_latency_ms: int
    target_latency_ms: int
    exec_latency_ms: int
    approx_prompt_tokens: int
    approx_gen_tokens: int
    target_prompt_tokens: int
    target_gen_tokens: int
    observation: str
    difficulty_tag: str

    def __post_init__(self) -> None:
        for name in ("approx_latency_ms", "target_latency_ms", "exec_latency_ms"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in (
            "approx_prompt_tokens",
            "approx_gen_tokens",
            "target_prompt_tokens",
            "target_gen_tokens",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def matched(self) -> bool:
        return self.approx_action == self.target_action

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_action": self.target_action.text,
            "approx_action": self.approx_action.text,
            "approx_latency_ms": self.approx_latency_ms,
            "target_latency_ms": self.target_latency_ms,
            "exec_latency_ms": self.exec_latency_ms,
            "approx_prompt_tokens": self.approx_prompt_tokens,
            "approx_gen_tokens": self.approx_gen_tokens,
            "target_prompt_tokens": self.target_prompt_tokens,
            "target_gen_tokens": self.target_gen_tokens,
            "observation": self.observation,
            "difficulty_tag": self.difficulty_tag,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StepScript":
        kwargs = dict(data)
        kwargs["target_action"] = Action(data["target_action"])
        kwargs["approx_action"] = Action(data["approx_action"])
        return cls(**kwargs)


@dataclass(frozen=True)
class TaskTrace:
    """A scripted multi-step task. Step indices are dense from 1."""

    task_id: str
    task_prompt: str
    steps: tuple[StepScript, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise ConfigError("trace must contain at least one step")

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def step(self, index: int) -> StepScript:
        """One-based step lookup."""
        if not 1 <= index <= len(self.steps):
            raise StepOutOfRange(f"step {index} outside 1..{len(self.steps)}")
        return self.steps[index - 1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "task_prompt": self.task_prompt,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TaskTrace":
        steps = tuple(StepScript.from_dict(s) for s in data["steps"])
        return cls(data["task_id"], data["task_prompt"], steps)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=False)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "TaskTrace":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class SimBackend:
    """Serves scripted approx/target calls for one trace.

    The engine announces round boundaries so repeated issuance of the same
    (role, step) within a round can be rejected; repeats across rounds are
    normal (steps after a mismatch are re-drafted in the next round).
    """

    def __init__(self, trace: TaskTrace) -> None:
        self.trace = trace
        self._issued_this_round: set[tuple[str, int]] = set()

    @property
    def n_steps(self) -> int:
        return self.trace.n_steps

    def begin_round(self) -> None:
        self._issued_this_round.clear()

    def issue(self, role: str, step: int) -> StepScript:
        key = (role, step)
        if key in self._issued_this_round:
            raise StepOutOfRange(f"duplicate {role} call for step {step} in one round")
        self._issued_this_round.add(key)
        return self.trace.step(step)


@dataclass(frozen=True)
class PhaseSpec:
    """One difficulty regime. A segment of this phase is a single candidate
    match run whose length (mismatch step included) is drawn from the given
    distribution; the segment's last step is the mismatch."""

    tag: str
    lengths: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.lengths or len(self.lengths) != len(self.weights):
            raise ConfigError("lengths and weights must be non-empty and parallel")
        if any(l < 1 for l in self.lengths) or list(self.lengths) != sorted(set(self.lengths)):
            raise ConfigError("lengths must be distinct ascending integers >= 1")
        if any(w <= 0 for w in self.weights):
            raise ConfigError("weights must be positive")
        if not self.tag or any(c.isspace() for c in self.tag):
            raise ConfigError("phase tag must be a single non-empty token")

    def sample_run_length(self, rng: np.random.Generator) -> int:
        if len(self.lengths) == 1:
            return self.lengths[0]
        cdf = np.cumsum(np.asarray(self.weights, dtype=np.float64))
        u = rng.random() * cdf[-1]
        return self.lengths[int(np.searchsorted(cdf, u, side="right"))]


# Calibrated so the 312-task workload lands near mean per-task max/min run
# lengths of 3.5 and 1.6. Tail masses are staggered so each phase's
# run-length expectile crosses a half-integer in a different tau band.
DEFAULT_PHASES = (
    PhaseSpec("surge", (3, 4), (0.55, 0.45)),
    PhaseSpec("churn", (1, 2), (0.25, 0.75)),
    PhaseSpec("drift", (2, 3), (0.85, 0.15)),
    PhaseSpec("grind", (2, 3), (0.92, 0.08)),
    PhaseSpec("creep", (2, 3), (0.96, 0.04)),
)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_tasks: int = 312
    steps_min: int = 12
    steps_max: int = 20
    phases: tuple[PhaseSpec, ...] = DEFAULT_PHASES
    approx_latency: tuple[int, int] = (200, 450)
    target_latency: tuple[int, int] = (1800, 3600)
    exec_latency: tuple[int, int] = (100, 250)
    approx_prompt_base: int = 180
    approx_prompt_incr: int = 14
    approx_gen: tuple[int, int] = (20, 60)
    target_prompt_base: int = 260
    target_prompt_incr: int = 20
    target_gen: tuple[int, int] = (40, 110)

    def __post_init__(self) -> None:
        if self.n_tasks < 1:
            raise ConfigError("n_tasks must be positive")
        if not 1 <= self.steps_min <= self.steps_max:
            raise ConfigError("steps range must satisfy 1 <= steps_min <= steps_max")
        if not self.phases:
            raise ConfigError("at least one phase is required")
        for lo, hi in (
            self.approx_latency,
            self.target_latency,
            self.exec_latency,
            self.approx_gen,
            self.target_gen,
        ):
            if lo < 0 or hi < lo:
                raise ConfigError("ranges must satisfy 0 <= lo <= hi")
        if self.approx_latency[0] <= 0 or self.target_latency[0] <= 0 or self.exec_latency[0] <= 0:
            raise ConfigError("latencies must be positive")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GeneratorConfig":
        kwargs = dict(data)
        if "phases" in kwargs:
            kwargs["phases"] = tuple(
                p
                if isinstance(p, PhaseSpec)
                else PhaseSpec(p["tag"], tuple(p["lengths"]), tuple(p["weights"]))
                for p in kwargs["phases"]
            )
        for name in ("approx_latency", "target_latency", "exec_latency", "approx_gen", "target_gen"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def _run_plan(
    cfg: GeneratorConfig, rng: np.random.Generator, n_steps: int
) -> list[tuple[PhaseSpec, bool]]:
    """Assign (phase, mismatches_here) to every step.

    Phases alternate (no immediate repeats); each phase segment is one run
    ending in a mismatch. A run cut short by task end loses its mismatch and
    becomes the censored tail.
    """
    plan: list[tuple[PhaseSpec, bool, int]] = []
    prev = -1
    while len(plan) < n_steps:
        if len(cfg.phases) == 1:
            idx = 0
        elif prev < 0:
            idx = int(rng.integers(0, len(cfg.phases)))
        else:
            idx = int(rng.integers(0, len(cfg.phases) - 1))
            if idx >= prev:
                idx += 1  # skip the previous phase so segments alternate
        phase = cfg.phases[idx]
        length = phase.sample_run_length(rng)
        for pos in range(1, length + 1):
            plan.append((phase, pos == length, pos))
        prev = idx
    return plan[:n_steps]


def generate_tasks(cfg: GeneratorConfig) -> list[TaskTrace]:
    """Deterministically sample a synthetic workload.

    Each task is a sequence of difficulty phases, one match run per phase
    segment. Every observation names the phase of the step that follows it,
    so a featurized state carries a learnable signal about the upcoming
    regime while the exact mismatch position stays noisy.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_tasks)
    traces = []
    for t_idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        task_id = f"task-{t_idx:04d}"
        n_steps = int(rng.integers(cfg.steps_min, cfg.steps_max + 1))
        plan = _run_plan(cfg, rng, n_steps)
        steps = []
        for s in range(1, n_steps + 1):
            phase, mismatch, pos = plan[s - 1]
            target = normalize_action(f"invoke tool_{s:02d} for {task_id}")
            if mismatch:
                approx = normalize_action(f"invoke tool_{s:02d} variant for {task_id}")
            else:
                approx = target
            ahead = plan[s][0].tag if s < n_steps else END_TAG
            steps.append(
                StepScript(
                    target_action=target,
                    approx_action=approx,
                    approx_latency_ms=int(rng.integers(cfg.approx_latency[0], cfg.approx_latency[1] + 1)),
                    target_latency_ms=int(rng.integers(cfg.target_latency[0], cfg.target_latency[1] + 1)),
                    exec_latency_ms=int(rng.integers(cfg.exec_latency[0], cfg.exec_latency[1] + 1)),
                    approx_prompt_tokens=cfg.approx_prompt_base + cfg.approx_prompt_incr * (s - 1),
                    approx_gen_tokens=int(rng.integers(cfg.approx_gen[0], cfg.approx_gen[1] + 1)),
                    target_prompt_tokens=cfg.target_prompt_base + cfg.target_prompt_incr * (s - 1),
                    target_gen_tokens=int(rng.integers(cfg.target_gen[0], cfg.target_gen[1] + 1)),
                    observation=f"ok phase_{phase.tag} pos_{pos} ahead_{ahead}",
                    difficulty_tag=phase.tag,
                )
            )
        traces.append(TaskTrace(task_id, f"complete {task_id} in {n_steps} steps", tuple(steps)))
    return traces


def run_lengths(trace: TaskTrace) -> tuple[list[int], int]:
    """Mismatch-terminated run lengths plus the censored tail length (0 if none).

    A run counts consecutive matching steps and the first mismatch after them,
    inclusive. Steps that match straight through to task end form the censored
    tail, which has no defined optimal k.
    """
    lengths: list[int] = []
    current = 0
    for script in trace.steps:
        current += 1
        if not script.matched:
            lengths.append(current)
            current = 0
    return lengths, current


def workload_stats(traces: list[TaskTrace]) -> dict[str, float]:
    """Per-task optimal-k statistics used to calibrate the generator."""
    maxima, minima = [], []
    for trace in traces:
        lengths, _ = run_lengths(trace)
        if lengths:
            maxima.append(max(lengths))
            minima.append(min(lengths))
    n = len(maxima)
    return {
        "tasks_with_mismatch": n,
        "mean_max_kstar": float(np.mean(maxima)) if n else float("nan"),
        "mean_min_kstar": float(np.mean(minima)) if n else float("nan"),
    }


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to reach an OpenAI-compatible chat completions endpoint."""

    base_url: str
    approx_model: str
    target_model: str
    approx_template: str
    target_template: str
    api_key_env: str = "SPECPLAN_API_KEY"
    max_steps: int = 8
    exec_latency_ms: int = 1
    stop_marker: str = "DONE"
    observation_text: str = "ok"
    temperature: float = 0.0
    max_tokens: int = 128
    timeout_s: float = 60.0

    def __post_init__(self) -> None:
        for tpl in (self.approx_template, self.target_template):
            if "{{task}}" not in tpl:
                raise ConfigError("template must contain {{task}}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EndpointConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown endpoint keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LiveCompletion:
    """Outcome of one live call. Token counts are None when the endpoint
    reported no usage (MissingUsage), never fabricated."""

    action: Action | None
    prompt_tokens: int | None
    gen_tokens: int | None
    canceled: bool


def _render_history(state: PlanState) -> str:
    lines = [f"{i + 1}. {a.text} -> {obs}" for i, (a, obs) in enumerate(state.committed)]
    return "\n".join(lines) if lines else "(none)"


class LiveBackend:
    """Issues real chat-completions calls with streaming and mid-flight abort.

    Safe for concurrent use: each call gets its own HTTP request and cancel
    flag. Generation tokens for an aborted stream are the chunks received so
    far; final usage data, when the server sends it, wins.
    """

    def __init__(self, cfg: EndpointConfig) -> None:
        self.cfg = cfg
        key = os.environ.get(cfg.api_key_env, "")
        if not key:
            raise AuthError(f"environment variable {cfg.api_key_env} is not set")
        self._headers = {"Authorization": f"Bearer {key}"}

    def _messages(self, role: str, state: PlanState) -> list[dict[str, str]]:
        template = self.cfg.approx_template if role == "approx" else self.cfg.target_template
        prompt = template.replace("{{task}}", state.task_prompt).replace(
            "{{history}}", _render_history(state)
        )
        return [{"role": "user", "content": prompt}]

    def complete(self, role: str, state: PlanState, cancel: threading.Event) -> LiveCompletion:
        """Blocking call; run it on a worker thread. Honors ``cancel`` between chunks."""
        model = self.cfg.approx_model if role == "approx" else self.cfg.target_model
        payload = {
            "model": model,
            "messages": self._messages(role, state),
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "stream": True,
            "stream_options": {"include_usage": True},
        }
        url = self.cfg.base_url.rstrip("/") + "/v1/chat/completions"
        chunks: list[str] = []
        usage: dict[str, Any] | None = None
        try:
            with httpx.Client(timeout=self.cfg.timeout_s) as client:
                with client.stream("POST", url, json=payload, headers=self._headers) as resp:
                    if resp.status_code in (401, 403):
                        raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
                    if resp.status_code != 200:
                        raise HttpError(f"endpoint returned {resp.status_code}")
                    for line in resp.iter_lines():
                        if cancel.is_set():
                            return LiveCompletion(
                                action=None,
                                prompt_tokens=usage.get("prompt_tokens") if usage else None,
                                gen_tokens=len(chunks),
                                canceled=True,
                            )
                        if not line.startswith("data:"):
                            continue
                        data = line[len("data:"):].strip()
                        if data == "[DONE]":
                            break
                        try:
                            event = json.loads(data)
                        except json.JSONDecodeError as exc:
                            raise ParseError(f"bad stream chunk: {data[:80]}") from exc
                        if event.get("usage"):
                            usage = event["usage"]
                        for choice in event.get("choices", []):
                            piece = choice.get("delta", {}).get("content")
                            if piece:
                                chunks.append(piece)
        except httpx.HTTPError as exc:
            raise HttpError(str(exc)) from exc

        text = "".join(chunks).strip()
        first_line = text.splitlines()[0].strip() if text else ""
        if not first_line:
            raise ParseError("completion contained no action text")
        return LiveCompletion(
            action=normalize_action(first_line),
            prompt_tokens=usage.get("prompt_tokens") if usage else None,
            gen_tokens=usage.get("completion_tokens") if usage else len(chunks),
            canceled=False,
        )
