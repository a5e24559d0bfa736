"""Trunk-plus-heads predictor with exact reverse-mode gradients.

The trunk is a stack of dense rectifier layers whose first ``s`` layers may
be frozen (the stable prefix); its output is projected onto the unit
hypersphere. Each learned task owns a bias-free linear head scoring that
embedding. Preferences between two inputs follow a unit-variance Thurstone
comparison of their head scores.

Indices are 0-based: ``head.0`` is the first learned task's head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .core import std_normal_cdf

__all__ = [
    "TrunkConfig",
    "DenseLayer",
    "Embedding",
    "ContinualModel",
    "init_model",
    "add_head",
    "stable_features",
    "embed",
    "head_score",
    "predicted_preference",
    "trunk_forward",
    "trunk_backward",
    "forward_pairs",
    "backward_pairs",
    "forward_scores",
    "backward_scores",
]

# Sub-stream tags for deterministic seed derivation.
_LAYER_STREAM = 1
_HEAD_STREAM = 2


@dataclass(frozen=True)
class TrunkConfig:
    """Architecture and initialization seed of the shared trunk."""

    input_dim: int
    layer_widths: tuple[int, ...] = (256, 128)
    frozen_prefix_layers: int = 0
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if not 0 <= self.frozen_prefix_layers <= len(self.layer_widths):
            raise ValueError("frozen_prefix_layers must lie in [0, number of layers]")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def embedding_dim(self) -> int:
        return self.layer_widths[-1] if self.layer_widths else self.input_dim

    @property
    def stable_dim(self) -> int:
        s = self.frozen_prefix_layers
        return self.layer_widths[s - 1] if s > 0 else self.input_dim


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)


@dataclass(frozen=True)
class Embedding:
    """A (possibly degenerate) point on the unit hypersphere."""

    values: np.ndarray

    @property
    def degenerate(self) -> bool:
        """True when the pre-normalization vector was zero."""
        return not np.any(self.values)


class ContinualModel:
    """Shared trunk, per-task heads, and per-task data summaries."""

    def __init__(self, config: TrunkConfig, layers: list[DenseLayer]):
        self.config = config
        self.layers = layers
        self.heads: list[np.ndarray] = []
        self.summaries: list = []  # TaskSummary instances, owned by summarizer
        self.task_names: list[str] = []

    @property
    def learned_tasks(self) -> int:
        return len(self.summaries)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def named_parameters(self, include_frozen: bool = True) -> dict[str, np.ndarray]:
        """Live parameter views keyed by name (trunk.{i}.{weight,bias}, head.{k})."""
        s = self.config.frozen_prefix_layers
        params: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            if i < s and not include_frozen:
                continue
            params[f"trunk.{i}.weight"] = layer.weight
            params[f"trunk.{i}.bias"] = layer.bias
        for k, head in enumerate(self.heads):
            params[f"head.{k}"] = head
        return params

    def trunk_parameters(self, include_frozen: bool = True) -> dict[str, np.ndarray]:
        return {
            name: arr
            for name, arr in self.named_parameters(include_frozen).items()
            if name.startswith("trunk.")
        }

    def parameter(self, name: str) -> np.ndarray:
        try:
            return self.named_parameters()[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def trunk_size(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def copy(self) -> "ContinualModel":
        """Deep copy of all parameters; summaries are shared (immutable)."""
        dup = ContinualModel(
            self.config,
            [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.layers],
        )
        dup.heads = [h.copy() for h in self.heads]
        dup.summaries = list(self.summaries)
        dup.task_names = list(self.task_names)
        return dup


def init_model(config: TrunkConfig) -> ContinualModel:
    """Fresh model with He fan-in initialized trunk, no heads or summaries."""
    layers = []
    fan_in = config.input_dim
    for i, width in enumerate(config.layer_widths):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _LAYER_STREAM, i]))
        scale = math.sqrt(2.0 / fan_in)
        weight = rng.normal(0.0, scale, size=(fan_in, width))
        layers.append(DenseLayer(weight, np.zeros(width)))
        fan_in = width
    return ContinualModel(config, layers)


def add_head(model: ContinualModel) -> np.ndarray:
    """Append a He-initialized head vector; derivation depends on head index."""
    t = len(model.heads)
    dim = model.embedding_dim
    rng = np.random.default_rng(np.random.SeedSequence([model.config.seed, _HEAD_STREAM, t]))
    head = rng.normal(0.0, math.sqrt(2.0 / dim), size=dim)
    model.heads.append(head)
    return head


# ---------------------------------------------------------------------------
# forward / backward machinery


@dataclass
class TrunkCache:
    """Activations retained by a forward pass for exact backprop."""

    x: np.ndarray  # (n, d) inputs
    pre: list[np.ndarray]  # pre-activations per layer
    act: list[np.ndarray]  # post-activations per layer
    emb: np.ndarray  # (n, D) normalized rows
    norms: np.ndarray  # (n,) pre-normalization row norms


def trunk_forward(model: ContinualModel, x: np.ndarray) -> TrunkCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ValueError(
            f"expected batch of shape (n, {model.config.input_dim}), got {x.shape}"
        )
    pre: list[np.ndarray] = []
    act: list[np.ndarray] = []
    a = x
    for layer in model.layers:
        z = a @ layer.weight + layer.bias
        a = K.relu(z)
        pre.append(z)
        act.append(a)
    emb, norms = K.l2_normalize_rows(a)
    return TrunkCache(x=x, pre=pre, act=act, emb=emb, norms=norms)


def trunk_backward(
    model: ContinualModel, cache: TrunkCache, grad_emb: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the plastic trunk given dL/d(embedding)."""
    grads: dict[str, np.ndarray] = {}
    s = model.config.frozen_prefix_layers
    n_layers = len(model.layers)
    da = K.l2_normalize_backward(cache.emb, cache.norms, grad_emb)
    for i in range(n_layers - 1, s - 1, -1):
        dz = K.relu_backward(cache.pre[i], da)
        a_prev = cache.act[i - 1] if i > 0 else cache.x
        grads[f"trunk.{i}.weight"] = a_prev.T @ dz
        grads[f"trunk.{i}.bias"] = dz.sum(axis=0)
        if i > s:
            da = dz @ model.layers[i].weight.T
    return grads


@dataclass
class PairBatchCache:
    """Forward state for a batch of pairs: x rows stacked above y rows."""

    cache: TrunkCache
    batch: int
    scores: dict[int, np.ndarray] = field(default_factory=dict)  # head -> (2B,)
    phat: dict[int, np.ndarray] = field(default_factory=dict)  # head -> (B,)
    dphat: dict[int, np.ndarray] = field(default_factory=dict)  # head -> (B,), d/ds_x


def forward_pairs(
    model: ContinualModel, xs: np.ndarray, ys: np.ndarray, head_indices
) -> PairBatchCache:
    """Predict preferences for B (x, y) feature pairs under chosen heads."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError("pair sides must have matching shapes")
    b = xs.shape[0]
    if b == 0:
        raise ValueError("empty pair batch")
    cache = trunk_forward(model, np.vstack([xs, ys]))
    pf = PairBatchCache(cache=cache, batch=b)
    for k in head_indices:
        _check_head(model, k)
        s = cache.emb @ model.heads[k]
        phat, dphat = K.pair_pref_forward(s[:b], s[b:])
        pf.scores[k] = s
        pf.phat[k] = phat
        pf.dphat[k] = dphat
    return pf


def backward_pairs(
    model: ContinualModel,
    pf: PairBatchCache,
    seeds: dict[int, np.ndarray],
    include_trunk: bool = True,
) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/dphat seeds per head.

    Heads outside ``seeds`` get no gradient entry; frozen-prefix layers never
    appear in the result.
    """
    grads: dict[str, np.ndarray] = {}
    emb = pf.cache.emb
    b = pf.batch
    grad_emb = np.zeros_like(emb) if include_trunk else None
    for k, seed in seeds.items():
        if k not in pf.phat:
            raise KeyError(f"head {k} was not part of the forward pass")
        ds_x = np.asarray(seed, dtype=np.float64) * pf.dphat[k]
        ds = np.concatenate([ds_x, -ds_x])
        grads[f"head.{k}"] = emb.T @ ds
        if include_trunk:
            grad_emb += ds[:, None] * model.heads[k][None, :]
    if include_trunk:
        grads.update(trunk_backward(model, pf.cache, grad_emb))
    return grads


def forward_scores(
    model: ContinualModel, x: np.ndarray, head_index: int
) -> tuple[np.ndarray, TrunkCache]:
    """Head scores for a plain sample batch (no pairing)."""
    _check_head(model, head_index)
    cache = trunk_forward(model, x)
    return cache.emb @ model.heads[head_index], cache


def backward_scores(
    model: ContinualModel,
    cache: TrunkCache,
    head_index: int,
    dscores: np.ndarray,
    include_trunk: bool = True,
) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/dscore for a plain sample batch."""
    _check_head(model, head_index)
    dscores = np.asarray(dscores, dtype=np.float64)
    grads = {f"head.{head_index}": cache.emb.T @ dscores}
    if include_trunk:
        grad_emb = dscores[:, None] * model.heads[head_index][None, :]
        grads.update(trunk_backward(model, cache, grad_emb))
    return grads


# ---------------------------------------------------------------------------
# scalar convenience surface


def _check_head(model: ContinualModel, t: int) -> None:
    if not 0 <= t < len(model.heads):
        raise IndexError(f"head index {t} out of range (have {len(model.heads)})")


def _as_row(model: ContinualModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != model.config.input_dim:
        raise ValueError(f"expected dimension {model.config.input_dim}, got {x.shape[1]}")
    return x


def stable_features(model: ContinualModel, x) -> Embedding:
    """Frozen-prefix activations of one input, unit-normalized.

    With no frozen prefix this is the normalized input itself. A zero vector
    stays zero and reports ``degenerate``.
    """
    return Embedding(stable_features_batch(model, _as_row(model, x))[0])


def stable_features_batch(model: ContinualModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    a = x
    for layer in model.layers[: model.config.frozen_prefix_layers]:
        a = K.relu(a @ layer.weight + layer.bias)
    unit, _ = K.l2_normalize_rows(a)
    return unit


def embed(model: ContinualModel, x) -> Embedding:
    """Full-trunk embedding of one input on the unit hypersphere."""
    return Embedding(trunk_forward(model, _as_row(model, x)).emb[0])


def head_score(model: ContinualModel, t: int, e) -> float:
    """Inner product of head t with an embedding."""
    _check_head(model, t)
    values = e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
    if values.shape != model.heads[t].shape:
        raise ValueError("embedding dimension does not match head dimension")
    return float(values @ model.heads[t])


def predicted_preference(model: ContinualModel, t: int, x, y) -> float:
    """P(x preferred to y) under head t with unit prediction variance."""
    _check_head(model, t)
    sx = head_score(model, t, embed(model, x))
    sy = head_score(model, t, embed(model, y))
    return std_normal_cdf((sx - sy) * math.sqrt(0.5))
