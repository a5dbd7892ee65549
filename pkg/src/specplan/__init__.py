"""Speculative planning for dual-agent LLM pipelines.

A fast approximation agent drafts several planning steps ahead while the
authoritative target agent verifies them in parallel; a small online value
model picks how far ahead to speculate. Includes a deterministic virtual
clock simulator, a live OpenAI-compatible client, baseline policies and a
metrics harness.
"""

from .agents import (
    AuthError,
    ConfigError,
    EndpointConfig,
    GeneratorConfig,
    HttpError,
    LiveBackend,
    ParseError,
    SimBackend,
    StepOutOfRange,
    StepScript,
    TaskTrace,
    generate_tasks,
    run_lengths,
    workload_stats,
)
from .baselines import ArmStats, BOPolicy, DynamicPolicy, FixedKPolicy, SequentialPolicy
from .core import (
    Action,
    CallRecord,
    EmptyAction,
    PlanState,
    PriceTable,
    VirtualClock,
    call_cost,
)
from .engine import (
    BackendFailure,
    BaselineCosts,
    Engine,
    LiveScheduler,
    MatchRun,
    PolicyFailure,
    RoundRecord,
    SimScheduler,
    StepOutcome,
    TaskResult,
    extract_runs,
    sequential_baseline,
)
from .metrics import LengthMismatch, MissingRun
from .predictor import (
    AsyncTrainer,
    CheckpointSlot,
    FeatureVector,
    Hyperparams,
    ReplayBuffer,
    SyncTrainer,
    TrainingExample,
    ValueModel,
    expectile_loss,
    featurize,
    label_runs,
    lambda_returns,
    load_checkpoint,
    save_checkpoint,
    train_pass,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ArmStats",
    "AsyncTrainer",
    "AuthError",
    "BOPolicy",
    "BackendFailure",
    "BaselineCosts",
    "CallRecord",
    "CheckpointSlot",
    "ConfigError",
    "DynamicPolicy",
    "EmptyAction",
    "EndpointConfig",
    "Engine",
    "FeatureVector",
    "FixedKPolicy",
    "GeneratorConfig",
    "HttpError",
    "Hyperparams",
    "LengthMismatch",
    "LiveBackend",
    "LiveScheduler",
    "MatchRun",
    "MissingRun",
    "ParseError",
    "PlanState",
    "PolicyFailure",
    "PriceTable",
    "ReplayBuffer",
    "RoundRecord",
    "SequentialPolicy",
    "SimBackend",
    "SimScheduler",
    "StepOutOfRange",
    "StepOutcome",
    "StepScript",
    "SyncTrainer",
    "TaskResult",
    "TaskTrace",
    "TrainingExample",
    "ValueModel",
    "VirtualClock",
    "call_cost",
    "expectile_loss",
    "extract_runs",
    "featurize",
    "generate_tasks",
    "label_runs",
    "lambda_returns",
    "load_checkpoint",
    "run_lengths",
    "save_checkpoint",
    "sequential_baseline",
    "train_pass",
    "workload_stats",
]
