"""Synthetic task streams with subpopulation shift on a shared quality scale.

Every task draws features from its own Gaussian-mixture subpopulation while
one frozen random network assigns the underlying quality. Task-specific
strictly-increasing maps then rescale that quality, so tasks disagree about
numbers but never about order. Opinion noise is added after the map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import QualitySample, TaskDataset

__all__ = [
    "QualityMap",
    "TaskSpec",
    "SequenceSpec",
    "LatentQualityModel",
    "generate_task",
    "generate_sequence",
    "default_benchmark_spec",
    "BENCHMARK_ORDERS",
    "reorder_tasks",
]

MAP_KINDS = ("identity", "affine", "logistic", "cube_root")

# stream tags for per-task sub-generators
_CENTER_STREAM = 1
_FEATURE_STREAM = 2
_NOISE_STREAM = 3
_LATENT_STREAM = 4

SEPARATION_FACTOR = 4.0


@dataclass(frozen=True)
class QualityMap:
    """A strictly increasing rescaling of the latent quality value."""

    kind: str = "identity"
    a: float = 1.0
    b: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown quality map {self.kind!r}")
        if self.kind == "affine" and self.a <= 0.0:
            raise ValueError("affine slope must be > 0 to keep the map increasing")
        if self.kind == "logistic" and self.scale <= 0.0:
            raise ValueError("logistic scale must be > 0")

    def apply(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if self.kind == "identity":
            return v.copy()
        if self.kind == "affine":
            return self.a * v + self.b
        if self.kind == "logistic":
            return 1.0 / (1.0 + np.exp(-v / self.scale))
        return np.cbrt(v)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "scale": self.scale}


@dataclass(frozen=True)
class TaskSpec:
    """Geometry, rescaling, and noise for one synthetic task."""

    name: str
    feature_dim: int
    shift_offset: np.ndarray
    n_train: int = 600
    n_test: int = 150
    n_clusters: int = 4
    cluster_spread: float = 0.35
    quality_map: QualityMap = field(default_factory=QualityMap)
    noise_std: float = 0.0
    noise_relative: bool = False

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("splits must be nonempty")
        if self.n_clusters < 1:
            raise ValueError("need at least one cluster")
        if self.cluster_spread <= 0.0:
            raise ValueError("cluster spread must be > 0")
        if self.feature_dim < 1:
            raise ValueError("feature dimension must be >= 1")
        if self.noise_std < 0.0:
            raise ValueError("noise std must be >= 0")
        offset = np.asarray(self.shift_offset, dtype=np.float64)
        if offset.shape != (self.feature_dim,):
            raise ValueError("shift offset must match the feature dimension")
        object.__setattr__(self, "shift_offset", offset)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "feature_dim": self.feature_dim,
            "shift_offset": [float(v) for v in self.shift_offset],
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_clusters": self.n_clusters,
            "cluster_spread": self.cluster_spread,
            "quality_map": self.quality_map.to_dict(),
            "noise_std": self.noise_std,
            "noise_relative": self.noise_relative,
        }


@dataclass(frozen=True)
class SequenceSpec:
    """An ordered task stream sharing one latent quality function."""

    tasks: tuple[TaskSpec, ...]
    seed: int = 0
    latent_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("sequence needs at least one task")
        dims = {t.feature_dim for t in self.tasks}
        if len(dims) != 1:
            raise ValueError("all tasks in a sequence must share a feature dimension")
        names = {t.name for t in self.tasks}
        if len(names) != len(self.tasks):
            raise ValueError("task names must be distinct")
        if self.latent_hidden < 1:
            raise ValueError("latent hidden width must be >= 1")


class LatentQualityModel:
    """Frozen two-layer rectifier net mapping features to a scalar quality.

    ``loc``/``scale`` standardize the raw output; a probe pass over the whole
    sequence sets them so the shared scale is comparable across tasks.
    """

    def __init__(self, feature_dim: int, hidden: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _LATENT_STREAM]))
        self.w1 = rng.normal(scale=1.0 / math.sqrt(feature_dim), size=(feature_dim, hidden))
        self.b1 = rng.normal(scale=0.1, size=hidden)
        self.w2 = rng.normal(scale=1.0 / math.sqrt(hidden), size=hidden)
        self.b2 = float(rng.normal(scale=0.1))
        self.loc = 0.0
        self.scale = 1.0

    def raw(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.maximum(x @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2

    def standardize_on(self, probe: np.ndarray) -> None:
        values = self.raw(probe)
        self.loc = float(values.mean())
        spread = float(values.std())
        if spread <= 0.0:
            raise ValueError("latent quality is constant on the probe set")
        self.scale = spread

    def value(self, x: np.ndarray) -> np.ndarray:
        return (self.raw(x) - self.loc) / self.scale


def _draw_centers(spec: TaskSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _CENTER_STREAM]))
    jitter = rng.normal(scale=spec.cluster_spread, size=(spec.n_clusters, spec.feature_dim))
    return spec.shift_offset[None, :] + jitter


def _draw_features(spec: TaskSpec, centers: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _FEATURE_STREAM]))
    n = spec.n_train + spec.n_test
    labels = rng.integers(spec.n_clusters, size=n)
    return centers[labels] + rng.normal(scale=spec.cluster_spread, size=(n, spec.feature_dim))


def _assemble(spec: TaskSpec, seed: int, features: np.ndarray, mos: np.ndarray, sigma: float):
    samples = []
    for i in range(spec.n_train + spec.n_test):
        split = "tr" if i < spec.n_train else "te"
        j = i if i < spec.n_train else i - spec.n_train
        samples.append(
            QualitySample(
                id=f"{spec.name}-s{seed}-{split}-{j:04d}",
                features=features[i],
                mos=float(mos[i]),
                std=sigma,
            )
        )
    return TaskDataset(
        name=spec.name,
        dim=spec.feature_dim,
        train=samples[: spec.n_train],
        test=samples[spec.n_train :],
    )


def generate_task(spec: TaskSpec, latent: LatentQualityModel, seed: int) -> TaskDataset:
    """One task: mixture features, mapped latent quality, then opinion noise.

    Deterministic in (spec, seed); the feature draw is independent of the
    quality map and the noise level, so respecifying either re-labels the
    same feature realization.
    """
    centers = _draw_centers(spec, seed)
    features = _draw_features(spec, centers, seed)
    clean = spec.quality_map.apply(latent.value(features))
    if spec.noise_relative:
        sigma = spec.noise_std * float(clean.max() - clean.min())
    else:
        sigma = spec.noise_std
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, _NOISE_STREAM]))
    noise = noise_rng.normal(size=clean.shape)
    mos = clean + sigma * noise
    return _assemble(spec, seed, features, mos, sigma)


def _check_separation(specs, centers_per_task) -> None:
    for s in range(len(specs)):
        for t in range(s + 1, len(specs)):
            required = SEPARATION_FACTOR * max(
                specs[s].cluster_spread, specs[t].cluster_spread
            )
            diff = centers_per_task[s][:, None, :] - centers_per_task[t][None, :, :]
            closest = float(np.sqrt((diff**2).sum(axis=2)).min())
            if closest < required:
                raise ValueError(
                    f"tasks {specs[s].name!r} and {specs[t].name!r} have cluster "
                    f"centers {closest:.3f} apart; need >= {required:.3f}"
                )


def generate_sequence(spec: SequenceSpec) -> tuple[list[TaskDataset], dict]:
    """All tasks of a stream plus a manifest of everything that shaped them."""
    if len(spec.tasks) < 2:
        raise ValueError("a sequence needs at least two tasks to exhibit shift")
    dim = spec.tasks[0].feature_dim
    latent = LatentQualityModel(dim, spec.latent_hidden, spec.seed)

    task_seeds = [
        int(np.random.SeedSequence([spec.seed, t]).generate_state(1)[0])
        for t in range(len(spec.tasks))
    ]
    centers_per_task = [
        _draw_centers(ts, task_seeds[t]) for t, ts in enumerate(spec.tasks)
    ]
    _check_separation(spec.tasks, centers_per_task)

    features_per_task = [
        _draw_features(ts, centers_per_task[t], task_seeds[t])
        for t, ts in enumerate(spec.tasks)
    ]
    latent.standardize_on(np.vstack(features_per_task))

    datasets = [
        generate_task(ts, latent, task_seeds[t]) for t, ts in enumerate(spec.tasks)
    ]
    manifest = {
        "seed": spec.seed,
        "latent": {
            "hidden": spec.latent_hidden,
            "loc": latent.loc,
            "scale": latent.scale,
        },
        "tasks": [
            {
                **ts.to_dict(),
                "task_seed": task_seeds[t],
                "realized_noise_std": datasets[t].train[0].std,
            }
            for t, ts in enumerate(spec.tasks)
        ],
    }
    return datasets, manifest


def default_benchmark_spec(
    seed: int = 0,
    *,
    feature_dim: int = 32,
    n_train: int = 600,
    n_test: int = 150,
) -> SequenceSpec:
    """Four shifted tasks with cycling quality maps; sizes are adjustable."""
    if feature_dim < 4:
        raise ValueError("the four-task benchmark needs feature_dim >= 4")
    d = feature_dim
    offset_radius = 9.0
    maps = [
        QualityMap("identity"),
        QualityMap("affine", a=3.0, b=-1.0),
        QualityMap("logistic", scale=1.0),
        QualityMap("cube_root"),
    ]
    tasks = []
    for t in range(4):
        offset = np.zeros(d)
        offset[t] = offset_radius
        tasks.append(
            TaskSpec(
                name=f"task{t}-{maps[t].kind}",
                feature_dim=d,
                shift_offset=offset,
                n_train=n_train,
                n_test=n_test,
                n_clusters=4,
                cluster_spread=0.35,
                quality_map=maps[t],
                noise_std=0.05,
                noise_relative=True,
            )
        )
    return SequenceSpec(tasks=tuple(tasks), seed=seed)


# task orders exercised by the order-robustness harness
BENCHMARK_ORDERS = {
    "I": (0, 1, 2, 3),
    "II": (3, 2, 1, 0),
    "III": (2, 0, 3, 1),
    "IV": (1, 3, 0, 2),
}


def reorder_tasks(tasks, order) -> list[TaskDataset]:
    if sorted(order) != list(range(len(tasks))):
        raise ValueError(f"order {order!r} is not a permutation of the task list")
    return [tasks[i] for i in order]
