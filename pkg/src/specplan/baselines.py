"""k-selection policies that do not look at the plan context.

The learned policy lives in predictor.py; this module holds the static and
bandit comparators plus the thin adapters that make everything satisfy the
engine's KPolicy protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PlanState
from .engine import MISMATCH, RoundRecord
from .predictor import CheckpointSlot, ValueModel


@dataclass
class SequentialPolicy:
    """Target-only execution: every round is a single unspeculated step."""

    name: str = "sequential"

    def k_for(self, state: PlanState) -> int:
        return 0

    def observe_round(self, record: RoundRecord) -> None:
        pass


class FixedKPolicy:
    def __init__(self, k: int, name: str | None = None):
        if k < 1:
            raise ValueError(f"fixed k must be >= 1, got {k}")
        self.k = k
        self.name = name or f"fixed-k{k}"

    def k_for(self, state: PlanState) -> int:
        return self.k

    def observe_round(self, record: RoundRecord) -> None:
        pass


class DynamicPolicy:
    """Reads depth from the predictor's published checkpoint.

    Training happens elsewhere (the bench feeds match runs to a trainer);
    the policy itself is read-only so inference never blocks on a pass.
    """

    def __init__(self, slot: CheckpointSlot, name: str):
        self.slot = slot
        self.name = name
        self.last_version = -1

    def k_for(self, state: PlanState) -> int:
        k, version = self.slot.predict_k(state)
        self.last_version = version
        return k

    def observe_round(self, record: RoundRecord) -> None:
        pass

    @classmethod
    def over_model(cls, model: ValueModel, name: str) -> "DynamicPolicy":
        return cls(CheckpointSlot(model), name)


@dataclass
class ArmStats:
    """Running reward means for bandit arms 1..k_max."""

    k_max: int = 6
    sums: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def arms(self) -> range:
        return range(1, self.k_max + 1)

    def mean(self, k: int) -> float:
        c = self.counts.get(k, 0)
        return self.sums.get(k, 0.0) / c if c else float("inf")

    def add(self, k: int, reward: float) -> None:
        self.sums[k] = self.sums.get(k, 0.0) + reward
        self.counts[k] = self.counts.get(k, 0) + 1

    def to_dict(self) -> dict:
        return {
            "k_max": self.k_max,
            "arms": [
                {
                    "k": k,
                    "count": self.counts.get(k, 0),
                    "sum": self.sums.get(k, 0.0),
                    "mean": (self.mean(k) if self.counts.get(k, 0) else None),
                }
                for k in self.arms
            ],
        }


def bo_reward(k: int, k_star: int) -> float:
    """Peaks at 1.0 when the issued depth hits the realized run length."""
    return 1.0 / (abs(k - k_star) + 1)


def bo_select(stats: ArmStats, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(1, stats.k_max + 1))
    # unexplored arms sort as +inf, ties resolve to the smallest k
    best_k = stats.k_max + 1
    best_mean = -1.0
    for k in stats.arms:
        m = stats.mean(k)
        if m > best_mean:
            best_mean = m
            best_k = k
    return best_k


def bo_update(stats: ArmStats, k: int, k_star: int) -> ArmStats:
    stats.add(k, bo_reward(k, k_star))
    return stats


class BOPolicy:
    """Epsilon-greedy bandit over depths 1..k_max.

    Deliberately context-free: one scalar mean per arm. Rounds that end
    without a mismatch never reveal the true run length, so they produce no
    update.
    """

    def __init__(self, k_max: int = 6, epsilon: float = 0.1, seed: int = 0, name: str = "bo"):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0,1], got {epsilon}")
        self.stats = ArmStats(k_max=k_max)
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)
        self.name = name

    def k_for(self, state: PlanState) -> int:
        return bo_select(self.stats, self.epsilon, self.rng)

    def observe_round(self, record: RoundRecord) -> None:
        if record.terminal != MISMATCH:
            return
        k_star = record.matched_count + 1
        bo_update(self.stats, record.policy_k, k_star)
