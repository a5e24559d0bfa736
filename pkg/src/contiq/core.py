"""Sample and pair domain types plus Thurstone ground-truth preferences.

A quality sample carries a feature vector with a mean opinion score and its
standard deviation. Pairwise supervision is derived from two samples under
the Thurstone Case V observer model: the probability that x is preferred to
y is Phi((mu_x - mu_y) / sqrt(sigma_x^2 + sigma_y^2)).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

__all__ = [
    "QualitySample",
    "TaskDataset",
    "PairConfig",
    "RankedPair",
    "std_normal_cdf",
    "thurstone_probability",
    "build_pairs",
    "save_samples",
    "load_samples",
]

# Above this many candidate pairs, uniform sampling without replacement
# switches from index materialization to rejection sampling.
_DENSE_PAIR_LIMIT = 10_000_000


@dataclass(frozen=True)
class QualitySample:
    """One rated item: identifier, feature vector, opinion mean and spread."""

    id: str
    features: np.ndarray
    mos: float
    std: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1 or feats.size == 0:
            raise ValueError(f"sample {self.id!r}: features must be a non-empty vector")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"sample {self.id!r}: features must be finite")
        if not math.isfinite(self.mos):
            raise ValueError(f"sample {self.id!r}: mos must be finite")
        if not (math.isfinite(self.std) and self.std >= 0.0):
            raise ValueError(f"sample {self.id!r}: std must be finite and >= 0")
        object.__setattr__(self, "features", feats)

    @property
    def dim(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class TaskDataset:
    """Train/test splits of one task, all samples sharing a feature dimension."""

    name: str
    dim: int
    train: tuple[QualitySample, ...]
    test: tuple[QualitySample, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        if not self.train:
            raise ValueError(f"task {self.name!r}: empty training split")
        for sample in (*self.train, *self.test):
            if sample.dim != self.dim:
                raise ValueError(
                    f"task {self.name!r}: sample {sample.id!r} has dimension "
                    f"{sample.dim}, expected {self.dim}"
                )
        train_ids = {s.id for s in self.train}
        if len(train_ids) != len(self.train):
            raise ValueError(f"task {self.name!r}: duplicate ids in training split")
        test_ids = {s.id for s in self.test}
        if len(test_ids) != len(self.test):
            raise ValueError(f"task {self.name!r}: duplicate ids in test split")
        overlap = train_ids & test_ids
        if overlap:
            raise ValueError(
                f"task {self.name!r}: train/test splits share ids {sorted(overlap)[:5]}"
            )

    def feature_matrix(self, split: str = "train") -> np.ndarray:
        samples = self.train if split == "train" else self.test
        return np.stack([s.features for s in samples])


@dataclass(frozen=True)
class PairConfig:
    """How many training pairs to draw per task, and with what seed."""

    pairs_per_task: int = 3000
    seed: int = 0

    def __post_init__(self):
        if self.pairs_per_task < 1:
            raise ValueError("pairs_per_task must be >= 1")


@dataclass(frozen=True)
class RankedPair:
    """Indices of two training samples and the ground-truth P(first > second)."""

    first: int
    second: int
    p: float

    def __post_init__(self):
        if self.first == self.second:
            raise ValueError("a pair must reference two distinct samples")
        if self.first < 0 or self.second < 0:
            raise ValueError("pair indices must be non-negative")
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"pair probability {self.p} outside [0, 1]")


def std_normal_cdf(z: float) -> float:
    """Standard normal CDF of a scalar."""
    return 0.5 * (1.0 + math.erf(z * math.sqrt(0.5)))


def thurstone_probability(mu_x: float, sigma_x: float, mu_y: float, sigma_y: float) -> float:
    """P(x preferred to y) for Gaussian opinion models.

    With both sigmas zero the comparison is deterministic: 1, 0 or 1/2
    according to the sign of mu_x - mu_y.
    """
    if sigma_x < 0.0 or sigma_y < 0.0:
        raise ValueError("opinion standard deviations must be >= 0")
    var = sigma_x * sigma_x + sigma_y * sigma_y
    if var == 0.0:
        if mu_x > mu_y:
            return 1.0
        if mu_x < mu_y:
            return 0.0
        return 0.5
    return std_normal_cdf((mu_x - mu_y) / math.sqrt(var))


def _decode_pair_index(m: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # Unrank m in [0, C(n,2)) to (i, j) with i < j, lexicographic by (i, j).
    # Row i starts at offset i*n - i*(i+3)/2 ... solved via the triangular root.
    m = m.astype(np.int64)
    total = n * (n - 1) // 2
    rev = total - 1 - m
    k = ((np.sqrt(8.0 * rev + 1.0) - 1.0) // 2).astype(np.int64)
    # Guard against float rounding at triangle boundaries.
    k = np.where((k + 1) * (k + 2) // 2 <= rev, k + 1, k)
    k = np.where(k * (k + 1) // 2 > rev, k - 1, k)
    i = n - 2 - k
    j = m - (i * (2 * n - i - 1)) // 2 + i + 1
    return i, j


def build_pairs(dataset: TaskDataset, config: PairConfig) -> list[RankedPair]:
    """Draw pairs uniformly without replacement and label them.

    Sampling covers all C(n,2) unordered pairs of the training split; each
    drawn pair (i, j) keeps i < j and carries the Thurstone probability
    computed from the two samples' opinion statistics. Deterministic in
    config.seed.
    """
    n = len(dataset.train)
    total = n * (n - 1) // 2
    if total == 0:
        raise ValueError(f"task {dataset.name!r}: needs >= 2 training samples to pair")
    if config.pairs_per_task > total:
        raise ValueError(
            f"task {dataset.name!r}: requested {config.pairs_per_task} pairs "
            f"but only {total} distinct pairs exist"
        )
    rng = np.random.default_rng(config.seed)
    if total <= _DENSE_PAIR_LIMIT:
        chosen = rng.choice(total, size=config.pairs_per_task, replace=False)
    else:
        seen: set[int] = set()
        picks: list[int] = []
        while len(picks) < config.pairs_per_task:
            cand = int(rng.integers(0, total))
            if cand not in seen:
                seen.add(cand)
                picks.append(cand)
        chosen = np.asarray(picks, dtype=np.int64)
    ii, jj = _decode_pair_index(np.asarray(chosen, dtype=np.int64), n)

    mos = np.array([s.mos for s in dataset.train])
    std = np.array([s.std for s in dataset.train])
    var = std[ii] ** 2 + std[jj] ** 2
    diff = mos[ii] - mos[jj]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(var > 0.0, diff / np.sqrt(np.where(var > 0.0, var, 1.0)), 0.0)
    probs = np.asarray(K.normal_cdf(z))
    degenerate = var == 0.0
    if np.any(degenerate):
        probs = np.where(degenerate & (diff > 0.0), 1.0, probs)
        probs = np.where(degenerate & (diff < 0.0), 0.0, probs)
        probs = np.where(degenerate & (diff == 0.0), 0.5, probs)
    return [
        RankedPair(int(i), int(j), float(p))
        for i, j, p in zip(ii, jj, probs)
    ]


def save_samples(path, samples) -> None:
    """Write samples as a text table: header id,mos,std,f0..f{d-1}.

    Floats are written with full round-trip precision.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty sample table")
    dim = samples[0].dim
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "mos", "std"] + [f"f{i}" for i in range(dim)])
        for s in samples:
            if s.dim != dim:
                raise ValueError(f"sample {s.id!r} has dimension {s.dim}, expected {dim}")
            writer.writerow(
                [s.id, repr(float(s.mos)), repr(float(s.std))]
                + [repr(float(v)) for v in s.features]
            )


def load_samples(path) -> tuple[QualitySample, ...]:
    """Read a sample table; every parse error names the offending line."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: line 1: empty file") from None
        expected_prefix = ["id", "mos", "std"]
        if header[:3] != expected_prefix:
            raise ValueError(
                f"{path}: line 1: header must start with id,mos,std "
                f"(got {','.join(header[:3])})"
            )
        feature_names = header[3:]
        if not feature_names:
            raise ValueError(f"{path}: line 1: header declares no feature columns")
        if feature_names != [f"f{i}" for i in range(len(feature_names))]:
            raise ValueError(f"{path}: line 1: feature columns must be f0..f{{d-1}}")
        dim = len(feature_names)

        samples = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + dim:
                raise ValueError(
                    f"{path}: line {lineno}: expected {3 + dim} fields, got {len(row)}"
                )
            try:
                mos = float(row[1])
                std = float(row[2])
                features = np.array([float(v) for v in row[3:]])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            try:
                samples.append(
                    QualitySample(id=row[0], features=features, mos=mos, std=std)
                )
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return tuple(samples)
