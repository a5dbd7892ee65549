"""Shared test helpers: trace builders and the acceptance summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from specplan.agents import StepScript, TaskTrace
from specplan.core import normalize_action


def make_step(
    n: int,
    matched: bool = True,
    a_lat: int = 1,
    t_lat: int = 5,
    e_lat: int = 1,
    a_prompt: int = 100,
    a_gen: int = 20,
    t_prompt: int = 200,
    t_gen: int = 40,
    observation: str = "ok",
    tag: str = "plain",
) -> StepScript:
    target = normalize_action(f"do step {n}")
    approx = target if matched else normalize_action(f"do step {n} wrong")
    return StepScript(
        target_action=target,
        approx_action=approx,
        approx_latency_ms=a_lat,
        target_latency_ms=t_lat,
        exec_latency_ms=e_lat,
        approx_prompt_tokens=a_prompt,
        approx_gen_tokens=a_gen,
        target_prompt_tokens=t_prompt,
        target_gen_tokens=t_gen,
        observation=observation,
        difficulty_tag=tag,
    )


def make_trace(matches: list[bool], task_id: str = "t0", **step_kwargs) -> TaskTrace:
    """Uniform-latency trace; matches[i] says whether step i+1 verifies."""
    steps = tuple(make_step(i + 1, m, **step_kwargs) for i, m in enumerate(matches))
    return TaskTrace(task_id, f"test task {task_id}", steps)


def random_trace(rng: np.random.Generator, n_steps: int | None = None, task_id: str = "r0") -> TaskTrace:
    """Randomized latencies, token counts and mismatch pattern."""
    if n_steps is None:
        n_steps = int(rng.integers(1, 7))
    steps = []
    for n in range(1, n_steps + 1):
        steps.append(
            make_step(
                n,
                matched=bool(rng.random() < 0.6),
                a_lat=int(rng.integers(1, 30)),
                t_lat=int(rng.integers(1, 80)),
                e_lat=int(rng.integers(1, 20)),
                a_prompt=int(rng.integers(0, 300)),
                a_gen=int(rng.integers(0, 80)),
                t_prompt=int(rng.integers(0, 500)),
                t_gen=int(rng.integers(0, 150)),
            )
        )
    return TaskTrace(task_id, f"random task {task_id}", tuple(steps))


class _AcceptanceLog:
    def __init__(self) -> None:
        self.lines: list[str] = []

    def record(self, number: int, passed: bool, detail: str) -> None:
        verdict = "PASS" if passed else "FAIL"
        self.lines.append(f"[criterion {number:>2}] {verdict}  {detail}")


_acceptance_log = _AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance_log() -> _AcceptanceLog:
    return _acceptance_log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_log.lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_log.lines):
            terminalreporter.write_line(line)
