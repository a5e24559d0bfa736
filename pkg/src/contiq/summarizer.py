"""Task summaries and head fusion.

After a task is learned, its training samples are compressed into K
centroids over the stable (frozen-prefix, normalized) feature space. At
prediction time each summary contributes a relevance — the distance from the
input to its nearest centroid — and head scores are fused with a softmin
weighting over those distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .model import ContinualModel, Embedding, stable_features_batch, trunk_forward

__all__ = [
    "DEFAULT_K",
    "DEFAULT_TAU",
    "TaskSummary",
    "WeightingConfig",
    "kmeans_summarize",
    "min_distance",
    "adaptive_weights",
    "predict_quality",
    "predict_quality_batch",
    "format_summary",
]

DEFAULT_K = 128
DEFAULT_TAU = 16.0

MAX_LLOYD_ITERATIONS = 100

MODES = ("adaptive", "uniform", "hard", "oracle", "latest")


@dataclass(frozen=True)
class TaskSummary:
    """K centroids standing in for one task's training set."""

    task_index: int
    centroids: np.ndarray  # (k, stable_dim)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be a nonempty 2-d array")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroid entries must be finite")
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class WeightingConfig:
    """Fusion rule: softmin temperature and head-selection mode."""

    tau: float = DEFAULT_TAU
    mode: str = "adaptive"

    def __post_init__(self):
        if self.tau < 0.0:
            raise ValueError("temperature must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown weighting mode {self.mode!r}")


def _kmeans_pp_seeds(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = features.shape[0]
    centroids = np.empty((k, features.shape[1]))
    centroids[0] = features[rng.integers(n)]
    for j in range(1, k):
        _, dmin_sq = K.assign_nearest(features, centroids[:j])
        total = float(dmin_sq.sum())
        if total <= 0.0:
            # fewer distinct points than seeds requested; fall back to uniform
            centroids[j] = features[rng.integers(n)]
            continue
        centroids[j] = features[rng.choice(n, p=dmin_sq / total)]
    return centroids


def _lloyd(features: np.ndarray, k: int, rng: np.random.Generator):
    """Lloyd iteration; returns centroids and the per-iteration objective."""
    centroids = _kmeans_pp_seeds(features, k, rng)
    labels = None
    trace = []
    for _ in range(MAX_LLOYD_ITERATIONS):
        new_labels, dmin_sq = K.assign_nearest(features, centroids)
        trace.append(float(dmin_sq.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, features)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not np.all(nonempty):
            # park each empty cluster on the point it should rescue: the
            # farthest-from-its-centroid point, one per empty slot
            order = np.argsort(-dmin_sq)
            for slot, point in zip(np.flatnonzero(~nonempty), order):
                centroids[slot] = features[point]
    return centroids, trace


def kmeans_summarize(
    features: np.ndarray, k: int, seed: int, *, task_index: int = 0
) -> TaskSummary:
    """Cluster a task's stable features into at most k centroids.

    k is clamped to the number of samples; deterministic in the seed.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.size == 0:
        raise ValueError("cannot summarize an empty feature set")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, features.shape[0])
    rng = np.random.default_rng(np.random.SeedSequence([seed, task_index]))
    centroids, _ = _lloyd(features, k, rng)
    return TaskSummary(task_index=task_index, centroids=centroids)


def min_distance(summary: TaskSummary, e) -> float:
    """Euclidean distance from a stable feature to the nearest centroid."""
    values = e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
    if values.shape != (summary.centroids.shape[1],):
        raise ValueError(
            f"feature dimension {values.shape} does not match centroids "
            f"of width {summary.centroids.shape[1]}"
        )
    _, dmin_sq = K.assign_nearest(values[None, :], summary.centroids)
    return math.sqrt(float(dmin_sq[0]))


def adaptive_weights(distances: np.ndarray, tau: float) -> np.ndarray:
    """Softmin over distances: exp(-tau*d) / sum, computed after a min shift."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.ndim != 1 or distances.size < 1:
        raise ValueError("distances must be a nonempty vector")
    if tau < 0.0:
        raise ValueError("temperature must be >= 0")
    t = distances.size
    if tau == 0.0:
        return np.full(t, 1.0 / t)
    w = np.exp(-tau * (distances - distances.min()))
    return w / w.sum()


def _distance_matrix(model: ContinualModel, stable: np.ndarray) -> np.ndarray:
    """(B, T) distances from stable features to each task's nearest centroid."""
    cols = []
    for summary in model.summaries:
        _, dmin_sq = K.assign_nearest(stable, summary.centroids)
        cols.append(np.sqrt(dmin_sq))
    return np.stack(cols, axis=1)


def predict_quality_batch(
    model: ContinualModel,
    x: np.ndarray,
    config: WeightingConfig,
    oracle_tasks=None,
) -> np.ndarray:
    """Fused quality scores for a batch of raw feature rows."""
    if not model.heads:
        raise ValueError("model has no learned tasks")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_heads = len(model.heads)
    emb = trunk_forward(model, x).emb
    scores = emb @ np.stack(model.heads, axis=1)  # (B, T)

    mode = config.mode
    if mode == "latest":
        return scores[:, n_heads - 1]
    if mode == "oracle":
        if oracle_tasks is None:
            raise ValueError("oracle weighting needs the true task index")
        idx = np.broadcast_to(np.asarray(oracle_tasks, dtype=np.int64), (x.shape[0],))
        if idx.min() < 0 or idx.max() >= n_heads:
            raise IndexError("oracle task index out of range")
        return scores[np.arange(x.shape[0]), idx]
    if mode == "uniform":
        return scores.mean(axis=1)

    if len(model.summaries) != n_heads:
        raise ValueError(
            f"distance weighting needs one summary per head "
            f"(have {len(model.summaries)} summaries, {n_heads} heads)"
        )
    stable = stable_features_batch(model, x)
    dist = _distance_matrix(model, stable)
    if mode == "hard":
        return scores[np.arange(x.shape[0]), np.argmin(dist, axis=1)]
    weights = np.stack([adaptive_weights(row, config.tau) for row in dist])
    return np.sum(weights * scores, axis=1)


def predict_quality(
    model: ContinualModel,
    x: np.ndarray,
    config: WeightingConfig,
    oracle_task: int | None = None,
) -> float:
    """Fused quality score for a single raw feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    oracle = None if oracle_task is None else [oracle_task]
    return float(predict_quality_batch(model, x[None, :], config, oracle)[0])


def format_summary(summary: TaskSummary) -> str:
    """Plain-text table: one line per centroid, components space-separated."""
    lines = []
    for j, row in enumerate(summary.centroids):
        comps = " ".join(f"{v:.10g}" for v in row)
        lines.append(f"{summary.task_index} {j} {comps}")
    return "\n".join(lines) + "\n"
