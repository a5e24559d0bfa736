"""Continual learning for pairwise-supervised quality prediction.

A shared plastic trunk with per-task scoring heads is trained on ranked
pairs task after task; replay-free regularizers fight forgetting, task
summaries gate head fusion at inference, and a rank-correlation protocol
scores both plasticity and stability over the stream.
"""

from ._kernels import backend_name
from .core import (
    PairConfig,
    QualitySample,
    RankedPair,
    TaskDataset,
    build_pairs,
    load_samples,
    save_samples,
    thurstone_probability,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import MetricsRecord, evaluate_stream, mpsr, psr, srcc
from .model import ContinualModel, TrunkConfig, init_model, predicted_preference
from .summarizer import TaskSummary, WeightingConfig, kmeans_summarize, predict_quality
from .synthbench import (
    BENCHMARK_ORDERS,
    default_benchmark_spec,
    generate_sequence,
    reorder_tasks,
)
from .trainer import METHODS, RunResult, TrainConfig, run_sequence, train_task

__version__ = "0.1.0"

__all__ = [
    "BENCHMARK_ORDERS",
    "METHODS",
    "ContinualModel",
    "MetricsRecord",
    "PairConfig",
    "QualitySample",
    "RankedPair",
    "RunResult",
    "TaskDataset",
    "TaskSummary",
    "TrainConfig",
    "TrunkConfig",
    "WeightingConfig",
    "__version__",
    "backend_name",
    "build_pairs",
    "default_benchmark_spec",
    "evaluate_stream",
    "generate_sequence",
    "init_model",
    "kmeans_summarize",
    "load_checkpoint",
    "load_samples",
    "mpsr",
    "predict_quality",
    "predicted_preference",
    "psr",
    "reorder_tasks",
    "run_sequence",
    "save_checkpoint",
    "save_samples",
    "srcc",
    "thurstone_probability",
    "train_task",
]
