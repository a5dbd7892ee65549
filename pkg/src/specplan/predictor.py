"""Online value predictor for speculation depth.

V(s) estimates how many more speculated steps will verify from state s
(counting the step that finally mismatches). Training data comes from match
runs; targets are lambda-returns with reward 1 per speculated step, fitted
under an asymmetric (expectile) squared loss so tau steers the estimate
toward optimistic or conservative depths.

The model is a hashed-feature linear function: cheap enough to train inline
with a simulation and to re-fit between live rounds, while still reacting to
plan context (the state text includes the full committed history).
"""

from __future__ import annotations

import json
import math
import queue
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import PlanState
from .engine import MISMATCH, MatchRun

DEFAULT_DIMENSION = 1 << 16


@dataclass(frozen=True)
class Hyperparams:
    tau: float = 0.5
    lam: float = 0.95
    gamma: float = 1.0
    lr: float = 0.05
    batch: int = 16
    epochs: int = 3
    buffer_capacity: int = 2500
    beta: int = 0
    warmup_k: int = 1
    include_censored: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0,1), got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0,1], got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0,1], got {self.gamma}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch < 1 or self.epochs < 1 or self.buffer_capacity < 1:
            raise ValueError("batch, epochs and buffer_capacity must be >= 1")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lam": self.lam,
            "gamma": self.gamma,
            "lr": self.lr,
            "batch": self.batch,
            "epochs": self.epochs,
            "buffer_capacity": self.buffer_capacity,
            "beta": self.beta,
            "warmup_k": self.warmup_k,
            "include_censored": self.include_censored,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse hashed features: unique sorted indices with L2-normalized
    counts."""

    idx: np.ndarray
    val: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.idx.size)


def _token_index(token: str, dimension: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % dimension


def featurize(state: PlanState | str, dimension: int = DEFAULT_DIMENSION) -> FeatureVector:
    """Hashed unigram+bigram counts over the state text, L2-normalized."""
    text = state.as_text() if isinstance(state, PlanState) else state
    tokens = text.split()
    counts: dict[int, float] = {}
    for tok in tokens:
        i = _token_index(tok, dimension)
        counts[i] = counts.get(i, 0.0) + 1.0
    for a, b in zip(tokens, tokens[1:]):
        i = _token_index(a + " " + b, dimension)
        counts[i] = counts.get(i, 0.0) + 1.0
    if not counts:
        return FeatureVector(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    idx = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
    val = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
    order = np.argsort(idx)
    idx, val = idx[order], val[order]
    val /= math.sqrt(float(val @ val))
    return FeatureVector(idx, val)


@dataclass(frozen=True, eq=False)
class TrainingExample:
    """One state of a match run, with everything needed to rebuild its
    lambda-return against any current weights.

    ``fut_idx``/``fut_val`` hold the coefficient-scaled union of the
    bootstrap states' features, so the target is
    ``base + sum_coefs * bias + w . fut`` and the Monte-Carlo part is already
    folded into ``base``.
    """

    features: FeatureVector
    fut_idx: np.ndarray
    fut_val: np.ndarray
    base: float
    sum_coefs: float
    mc_label: float
    run_states: tuple[str, ...]
    terminal: str
    t: int


def _return_coefficients(horizon: int, lam: float, gamma: float) -> tuple[np.ndarray, float]:
    """Coefficients on V(s_{t+n}) for n=1..horizon-1, and the reward-only
    base of the lambda-return for a run tail of ``horizon`` steps."""
    mc = sum(gamma**j for j in range(horizon))
    if horizon == 1:
        return np.empty(0, dtype=np.float64), float(mc)
    coefs = np.array(
        [(1.0 - lam) * lam ** (n - 1) * gamma**n for n in range(1, horizon)], dtype=np.float64
    )
    base = (1.0 - lam) * sum(
        lam ** (n - 1) * sum(gamma**j for j in range(n)) for n in range(1, horizon)
    ) + lam ** (horizon - 1) * mc
    return coefs, float(base)


def make_examples(
    run: MatchRun, hyper: Hyperparams, dimension: int = DEFAULT_DIMENSION
) -> list[TrainingExample]:
    texts = tuple(s.as_text() for s in run.states)
    fvs = [featurize(t, dimension) for t in texts]
    T = len(fvs)
    out = []
    for t in range(T):
        horizon = T - t
        coefs, base = _return_coefficients(horizon, hyper.lam, hyper.gamma)
        if coefs.size:
            fut_idx = np.concatenate([fvs[t + n].idx for n in range(1, horizon)])
            fut_val = np.concatenate(
                [coefs[n - 1] * fvs[t + n].val for n in range(1, horizon)]
            )
        else:
            fut_idx = np.empty(0, dtype=np.int64)
            fut_val = np.empty(0, dtype=np.float64)
        out.append(
            TrainingExample(
                features=fvs[t],
                fut_idx=fut_idx,
                fut_val=fut_val,
                base=base,
                sum_coefs=float(coefs.sum()),
                mc_label=float(horizon),
                run_states=texts,
                terminal=run.terminal,
                t=t,
            )
        )
    return out


def label_runs(
    runs: Iterable[MatchRun],
    hyper: Hyperparams | None = None,
    dimension: int = DEFAULT_DIMENSION,
) -> list[TrainingExample]:
    """Turn match runs into training examples.

    Mismatch-terminated runs yield one example per state with Monte-Carlo
    label T-i+1 for the i-th state (1-based). Censored runs (closed by task
    end or a sequential step) are skipped unless the hyperparameters opt in.
    """
    hyper = hyper or Hyperparams()
    out: list[TrainingExample] = []
    for run in runs:
        if run.terminal != MISMATCH and not hyper.include_censored:
            continue
        out.extend(make_examples(run, hyper, dimension))
    return out


class ValueModel:
    """Linear V over hashed features, trained in place."""

    def __init__(self, hyper: Hyperparams | None = None, dimension: int = DEFAULT_DIMENSION):
        self.hyper = hyper or Hyperparams()
        self.dimension = dimension
        self.weights = np.zeros(dimension, dtype=np.float64)
        self.bias = 0.0
        self.version = 0

    def value_of(self, fv: FeatureVector) -> float:
        return float(self.weights[fv.idx] @ fv.val + self.bias)

    def value(self, state: PlanState | str) -> float:
        return self.value_of(featurize(state, self.dimension))

    def predict_k(self, state: PlanState | str) -> int:
        if self.version == 0:
            return self.hyper.warmup_k
        k_hat = math.floor(self.value(state) + 0.5)
        return max(1, k_hat + self.hyper.beta)

    def clone(self) -> "ValueModel":
        other = ValueModel(self.hyper, self.dimension)
        other.weights = self.weights.copy()
        other.bias = self.bias
        other.version = self.version
        return other


def lambda_returns(run: MatchRun, model: ValueModel, gamma: float, lam: float) -> list[float]:
    """Lambda-return targets for every state of a run, bootstrapping on the
    model's current weights."""
    fvs = [featurize(s, model.dimension) for s in run.states]
    values = [model.value_of(fv) for fv in fvs]
    T = len(values)
    out = []
    for t in range(T):
        horizon = T - t
        coefs, base = _return_coefficients(horizon, lam, gamma)
        boot = sum(c * values[t + n] for n, c in enumerate(coefs, start=1))
        out.append(base + boot)
    return out


def expectile_loss(u: np.ndarray | float, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Asymmetric squared loss and its gradient w.r.t. the prediction.

    u is the residual target - prediction; the gradient returned is
    dL/dprediction = -2|tau - 1(u<0)|u.
    """
    u = np.asarray(u, dtype=np.float64)
    w = np.abs(tau - (u < 0.0))
    return w * u * u, -2.0 * w * u


class ReplayBuffer:
    """FIFO store of training examples, capacity-bounded."""

    def __init__(self, capacity: int = 2500):
        self.capacity = capacity
        self.items: list[TrainingExample] = []

    def __len__(self) -> int:
        return len(self.items)

    def insert(self, examples: Sequence[TrainingExample]) -> None:
        self.items.extend(examples)
        overflow = len(self.items) - self.capacity
        if overflow > 0:
            del self.items[:overflow]

    def dump_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for ex in self.items:
                row = {"t": ex.t, "terminal": ex.terminal, "states": list(ex.run_states)}
                f.write(json.dumps(row, separators=(",", ":")) + "\n")


def _train_minibatch(model: ValueModel, batch: Sequence[TrainingExample]) -> None:
    h = model.hyper
    n = len(batch)
    own_lens = np.array([ex.features.nnz for ex in batch], dtype=np.int64)
    own_idx = np.concatenate([ex.features.idx for ex in batch])
    own_val = np.concatenate([ex.features.val for ex in batch])
    seg = np.repeat(np.arange(n), own_lens)
    v_own = np.bincount(seg, weights=model.weights[own_idx] * own_val, minlength=n) + model.bias

    fut_lens = np.array([ex.fut_idx.size for ex in batch], dtype=np.int64)
    base = np.array([ex.base for ex in batch], dtype=np.float64)
    sum_coefs = np.array([ex.sum_coefs for ex in batch], dtype=np.float64)
    targets = base + sum_coefs * model.bias
    if fut_lens.sum():
        fut_idx = np.concatenate([ex.fut_idx for ex in batch])
        fut_val = np.concatenate([ex.fut_val for ex in batch])
        fseg = np.repeat(np.arange(n), fut_lens)
        targets = targets + np.bincount(fseg, weights=model.weights[fut_idx] * fut_val, minlength=n)

    _, grad = expectile_loss(targets - v_own, h.tau)
    # descend: v moves toward the target under the asymmetric weighting
    step = -h.lr / n
    np.add.at(model.weights, own_idx, step * np.repeat(grad, own_lens) * own_val)
    model.bias += step * float(grad.sum())


def train_pass(model: ValueModel, buffer: ReplayBuffer, rng: np.random.Generator) -> ValueModel:
    """One full pass: epochs x ceil(n/batch) minibatches, each epoch a fresh
    without-replacement shuffle; targets recomputed against current weights
    every minibatch. Increments the model version."""
    n = len(buffer)
    if n == 0:
        raise ValueError("train_pass requires a non-empty buffer")
    h = model.hyper
    for _ in range(h.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, h.batch):
            batch = [buffer.items[i] for i in perm[lo : lo + h.batch]]
            _train_minibatch(model, batch)
    model.version += 1
    return model


@dataclass(frozen=True)
class Snapshot:
    version: int
    dimension: int
    weights: np.ndarray
    bias: float
    hyper: Hyperparams

    def value(self, state: PlanState | str) -> float:
        fv = featurize(state, self.dimension)
        return float(self.weights[fv.idx] @ fv.val + self.bias)

    def predict_k(self, state: PlanState | str) -> int:
        if self.version == 0:
            return self.hyper.warmup_k
        k_hat = math.floor(self.value(state) + 0.5)
        return max(1, k_hat + self.hyper.beta)


class CheckpointSlot:
    """Single shared handoff point between trainer and inference.

    publish() swaps in an immutable snapshot; readers grab the reference
    once, so every prediction is computed from exactly one version.
    """

    def __init__(self, model: ValueModel):
        self._snap = snapshot_of(model)

    def publish(self, model: ValueModel) -> None:
        self._snap = snapshot_of(model)

    @property
    def current(self) -> Snapshot:
        return self._snap

    def predict_k(self, state: PlanState | str) -> tuple[int, int]:
        snap = self._snap
        return snap.predict_k(state), snap.version


def snapshot_of(model: ValueModel) -> Snapshot:
    return Snapshot(
        version=model.version,
        dimension=model.dimension,
        weights=model.weights.copy(),
        bias=model.bias,
        hyper=model.hyper,
    )


def save_checkpoint(model: ValueModel, path: str) -> None:
    doc = {
        "version": model.version,
        "dimension": model.dimension,
        "weights": model.weights.tolist(),
        "bias": model.bias,
        "hyper": model.hyper.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, separators=(",", ":"))


def load_checkpoint(path: str) -> ValueModel:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    model = ValueModel(Hyperparams.from_dict(doc["hyper"]), doc["dimension"])
    weights = np.asarray(doc["weights"], dtype=np.float64)
    if weights.shape != (model.dimension,):
        raise ValueError("checkpoint weight length does not match dimension")
    model.weights = weights
    model.bias = float(doc["bias"])
    model.version = int(doc["version"])
    return model


class SyncTrainer:
    """In-process trainer for simulation: ingest runs after each task, train
    one pass, publish. Deterministic under the given seed."""

    def __init__(self, model: ValueModel, seed: int = 0, slot: CheckpointSlot | None = None):
        self.model = model
        self.buffer = ReplayBuffer(model.hyper.buffer_capacity)
        self.rng = np.random.default_rng(seed)
        self.slot = slot or CheckpointSlot(model)

    def ingest(self, runs: Iterable[MatchRun]) -> None:
        self.buffer.insert(label_runs(runs, self.model.hyper, self.model.dimension))
        if len(self.buffer):
            train_pass(self.model, self.buffer, self.rng)
            self.slot.publish(self.model)


class AsyncTrainer:
    """Background trainer for live mode.

    Run batches queue up; the worker drains, trains and publishes. The
    inference side only ever touches the slot, so a slow pass can never
    stall a round. ``after_pass`` is a hook for instrumentation.
    """

    def __init__(
        self,
        model: ValueModel,
        seed: int = 0,
        slot: CheckpointSlot | None = None,
        after_pass: Callable[[], None] | None = None,
    ):
        self.model = model
        self.buffer = ReplayBuffer(model.hyper.buffer_capacity)
        self.rng = np.random.default_rng(seed)
        self.slot = slot or CheckpointSlot(model)
        self.after_pass = after_pass
        self._queue: "queue.Queue[list[MatchRun] | None]" = queue.Queue()
        self._thread = threading.Thread(target=self._work, daemon=True)
        self._thread.start()

    def ingest(self, runs: Iterable[MatchRun]) -> None:
        self._queue.put(list(runs))

    def _work(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            self.buffer.insert(label_runs(item, self.model.hyper, self.model.dimension))
            if len(self.buffer):
                train_pass(self.model, self.buffer, self.rng)
                self.slot.publish(self.model)
            if self.after_pass is not None:
                self.after_pass()

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=30)
