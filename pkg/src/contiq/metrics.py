"""Rank correlation and the plasticity-stability protocol.

After each task the model is scored on every test set seen so far, filling a
lower-triangular SRCC matrix. PSR compares retained accuracy against what
the model achieved right after learning each task, and MPSR averages over
the stream. Degenerate cases (constant vectors, vanishing denominators) are
flagged through warnings instead of aborting an evaluation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import ContinualModel
from .summarizer import WeightingConfig, predict_quality_batch

__all__ = [
    "PSR_DENOMINATOR_FLOOR",
    "MetricsWarning",
    "SrccMatrix",
    "MetricsRecord",
    "srcc",
    "psr",
    "mpsr",
    "weighted_srcc",
    "evaluate_stream",
    "format_srcc_matrix",
    "record_to_json",
    "record_from_json",
]

PSR_DENOMINATOR_FLOOR = 0.05


class MetricsWarning(UserWarning):
    """Degenerate input to a metric (constant vector, tiny PSR denominator)."""


def fractional_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average position."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    positions = np.empty(values.size)
    positions[order] = np.arange(1, values.size + 1, dtype=np.float64)
    _, inverse = np.unique(values, return_inverse=True)
    sums = np.bincount(inverse, weights=positions)
    counts = np.bincount(inverse)
    return (sums / counts)[inverse]


def srcc(predictions, targets) -> float:
    """Spearman correlation: Pearson correlation of fractional ranks.

    A constant argument has no rank order; such calls score 0 and raise a
    ``MetricsWarning``.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise ValueError("srcc needs two equal-length vectors")
    n = predictions.size
    if n < 2:
        raise ValueError("srcc needs at least two points")
    if np.all(predictions == predictions[0]) or np.all(targets == targets[0]):
        warnings.warn("constant vector in srcc; scoring 0", MetricsWarning, stacklevel=2)
        return 0.0
    rp = fractional_ranks(predictions)
    rt = fractional_ranks(targets)
    rp = rp - rp.mean()
    rt = rt - rt.mean()
    return float(np.dot(rp, rt) / np.sqrt(np.dot(rp, rp) * np.dot(rt, rt)))


@dataclass
class SrccMatrix:
    """Lower-triangular matrix: entry (t, k) scores test set k after task t."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise ValueError("srcc matrix must be square and nonempty")
        lower = np.tril_indices(v.shape[0])
        entries = v[lower]
        if np.any(np.abs(entries[np.isfinite(entries)]) > 1.0 + 1e-12):
            raise ValueError("srcc entries must lie in [-1, 1]")
        self.values = v

    @property
    def tasks(self) -> int:
        return self.values.shape[0]

    def entry(self, t: int, k: int) -> float:
        if not 0 <= k <= t < self.tasks:
            raise IndexError(f"srcc matrix entry ({t}, {k}) is above the diagonal")
        return float(self.values[t, k])


def empty_srcc_matrix(tasks: int) -> SrccMatrix:
    values = np.full((tasks, tasks), np.nan)
    return SrccMatrix(values)


def psr(matrix: SrccMatrix, t: int) -> float:
    """Stability-weighted score after task t.

    First task: the plain SRCC. Later tasks: current SRCC scaled by the mean
    retention ratio against each earlier task's just-learned SRCC. Ratios
    above 1 are credited as-is; denominators below the floor are clamped
    with a warning.
    """
    if not 0 <= t < matrix.tasks:
        raise IndexError(f"task index {t} outside matrix")
    current = matrix.entry(t, t)
    if t == 0:
        return current
    total = 0.0
    for k in range(t):
        denom = matrix.entry(k, k)
        if denom <= PSR_DENOMINATOR_FLOOR:
            warnings.warn(
                f"psr denominator {denom:.4f} for task {k} clamped to "
                f"{PSR_DENOMINATOR_FLOOR}",
                MetricsWarning,
                stacklevel=2,
            )
            denom = PSR_DENOMINATOR_FLOOR
        total += matrix.entry(t, k) / denom
    return (total / t) * current


def mpsr(psr_values) -> float:
    values = np.asarray(psr_values, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("mpsr needs at least one value")
    return float(values.mean())


def weighted_srcc(per_task_srcc, test_set_sizes) -> float:
    values = np.asarray(per_task_srcc, dtype=np.float64)
    sizes = np.asarray(test_set_sizes, dtype=np.float64)
    if values.shape != sizes.shape or values.ndim != 1 or values.size < 1:
        raise ValueError("weighted srcc needs matching nonempty vectors")
    if np.any(sizes <= 0):
        raise ValueError("test set sizes must be positive")
    return float(np.sum(values * sizes) / np.sum(sizes))


@dataclass
class MetricsRecord:
    """Everything the protocol produces for one finished stream."""

    srcc: SrccMatrix
    psr: list[float]
    mpsr: float
    weighted_srcc: float
    test_set_sizes: list[int]
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.psr) != self.srcc.tasks or len(self.test_set_sizes) != self.srcc.tasks:
            raise ValueError("per-task vectors must match the matrix size")
        if abs(self.mpsr - float(np.mean(self.psr))) > 1e-12:
            raise ValueError("mpsr must equal the mean of the psr vector")


def evaluate_stream(
    models,
    tasks,
    config: WeightingConfig,
) -> MetricsRecord:
    """Score a task stream: one matrix row per task, then PSR/MPSR.

    ``models`` is either one model (evaluated on every row) or one snapshot
    per task, where snapshot t is the model right after learning task t.
    """
    if isinstance(models, ContinualModel):
        snapshots = [models] * len(tasks)
    else:
        snapshots = list(models)
    if len(snapshots) != len(tasks):
        raise ValueError("need exactly one model snapshot per task")
    if not tasks:
        raise ValueError("empty task stream")
    for task in tasks:
        if not task.test:
            raise ValueError(f"task {task.name!r} has no test split")

    t_count = len(tasks)
    matrix = empty_srcc_matrix(t_count)
    flags: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MetricsWarning)
        for t in range(t_count):
            model = snapshots[t]
            for k in range(t + 1):
                x = tasks[k].feature_matrix("test")
                targets = np.array([s.mos for s in tasks[k].test])
                oracle = k if config.mode == "oracle" else None
                predictions = predict_quality_batch(model, x, config, oracle)
                matrix.values[t, k] = srcc(predictions, targets)
        psr_values = [psr(matrix, t) for t in range(t_count)]
        for w in caught:
            if issubclass(w.category, MetricsWarning):
                flags.append(str(w.message))

    sizes = [len(task.test) for task in tasks]
    final_row = [matrix.entry(t_count - 1, k) for k in range(t_count)]
    return MetricsRecord(
        srcc=matrix,
        psr=psr_values,
        mpsr=mpsr(psr_values),
        weighted_srcc=weighted_srcc(final_row, sizes),
        test_set_sizes=sizes,
        flags=flags,
    )


def format_srcc_matrix(matrix: SrccMatrix) -> str:
    """Lower-triangular text table, one row per task."""
    lines = []
    for t in range(matrix.tasks):
        row = " ".join(f"{matrix.values[t, k]:+.6f}" for k in range(t + 1))
        lines.append(f"after_task_{t}: {row}")
    return "\n".join(lines) + "\n"


def record_to_json(record: MetricsRecord) -> str:
    """Deterministic JSON for a metrics record (no timestamps, sorted keys)."""
    payload = {
        "srcc_matrix": [
            [float(record.srcc.values[t, k]) for k in range(t + 1)]
            for t in range(record.srcc.tasks)
        ],
        "psr": [float(v) for v in record.psr],
        "mpsr": float(record.mpsr),
        "weighted_srcc": float(record.weighted_srcc),
        "test_set_sizes": [int(s) for s in record.test_set_sizes],
        "flags": list(record.flags),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def record_from_json(text: str) -> MetricsRecord:
    payload = json.loads(text)
    rows = payload["srcc_matrix"]
    t_count = len(rows)
    values = np.full((t_count, t_count), np.nan)
    for t, row in enumerate(rows):
        if len(row) != t + 1:
            raise ValueError("malformed lower-triangular matrix")
        values[t, : t + 1] = row
    return MetricsRecord(
        srcc=SrccMatrix(values),
        psr=[float(v) for v in payload["psr"]],
        mpsr=float(payload["mpsr"]),
        weighted_srcc=float(payload["weighted_srcc"]),
        test_set_sizes=[int(s) for s in payload["test_set_sizes"]],
        flags=[str(f) for f in payload.get("flags", [])],
    )
