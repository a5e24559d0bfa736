"""Losses and anti-forgetting regularizers.

New-task supervision is the fidelity loss between Thurstone ground truth and
predicted preferences. Forgetting is fought two ways: pseudo-label replay
(old heads are held to the preferences they produced before the task began)
or a quadratic penalty anchoring important parameters, with EWC/SI/MAS
importance estimators behind one interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .model import (
    ContinualModel,
    backward_pairs,
    backward_scores,
    forward_pairs,
    forward_scores,
    trunk_forward,
)

__all__ = [
    "PROB_CLAMP_LO",
    "PROB_CLAMP_HI",
    "DEFAULT_LAMBDA",
    "SI_DAMPING",
    "LossConfig",
    "PseudoLabelSet",
    "ImportanceState",
    "SiTracker",
    "fidelity_loss",
    "fidelity_loss_batch",
    "lwf_pseudo_labels",
    "lwf_regularizer",
    "quadratic_penalty",
    "quadratic_penalty_grads",
    "importance_init",
    "estimate_importance",
    "fold_importance",
    "minibatch_loss",
    "batch_objective",
]

# Probabilities are clamped to this interval before any square root; caps the
# fidelity gradient magnitude at 500.
PROB_CLAMP_LO = 1e-6
PROB_CLAMP_HI = 1.0 - 1e-6

SI_DAMPING = 1e-3

REGULARIZERS = ("none", "lwf", "ewc", "si", "mas")

DEFAULT_LAMBDA = {"none": 0.0, "lwf": 1.0, "ewc": 1e4, "si": 100.0, "mas": 10.0}


@dataclass(frozen=True)
class LossConfig:
    """Trade-off weight and regularizer family for the training objective."""

    lam: float = 0.0
    regularizer: str = "none"

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")


def fidelity_loss(p: float, p_hat: float) -> float:
    """1 - sqrt(p*p_hat) - sqrt((1-p)(1-p_hat)), with both inputs clamped."""
    cp = min(max(p, PROB_CLAMP_LO), PROB_CLAMP_HI)
    cq = min(max(p_hat, PROB_CLAMP_LO), PROB_CLAMP_HI)
    return 1.0 - math.sqrt(cp * cq) - math.sqrt((1.0 - cp) * (1.0 - cq))


def fidelity_loss_batch(p, p_hat):
    """Vector fidelity loss and its derivative w.r.t. p_hat."""
    return K.fidelity_forward(
        np.asarray(p, dtype=np.float64),
        np.asarray(p_hat, dtype=np.float64),
        PROB_CLAMP_LO,
        PROB_CLAMP_HI,
    )


# ---------------------------------------------------------------------------
# pseudo-label replay


@dataclass(frozen=True)
class PseudoLabelSet:
    """Preferences one old head assigned to the new task's pairs."""

    head_index: int
    labels: dict[tuple[int, int], float]

    def aligned(self, pairs) -> np.ndarray:
        """Label vector in pair-list order; missing entries are a hard error."""
        try:
            return np.array([self.labels[(p.first, p.second)] for p in pairs])
        except KeyError as exc:
            raise KeyError(
                f"pair {exc.args[0]} has no recorded label for head {self.head_index}"
            ) from None


def lwf_pseudo_labels(model: ContinualModel, x: np.ndarray, pairs) -> list[PseudoLabelSet]:
    """Record every existing head's preferences on the new task's pairs.

    Called once before the task's first update; one set per old head, one
    clamped label per pair. Returns an empty list for the first task.
    """
    if not model.heads:
        return []
    x = np.asarray(x, dtype=np.float64)
    ii = np.array([p.first for p in pairs], dtype=np.int64)
    jj = np.array([p.second for p in pairs], dtype=np.int64)
    cache = trunk_forward(model, x)
    sets = []
    for k, head in enumerate(model.heads):
        scores = cache.emb @ head
        phat, _ = K.pair_pref_forward(scores[ii], scores[jj])
        clamped = np.clip(phat, PROB_CLAMP_LO, PROB_CLAMP_HI)
        labels = {
            (int(i), int(j)): float(v) for i, j, v in zip(ii, jj, clamped)
        }
        sets.append(PseudoLabelSet(head_index=k, labels=labels))
    return sets


def lwf_regularizer(model: ContinualModel, x: np.ndarray, pair, label_sets) -> float:
    """Sum over old heads of the fidelity loss to their recorded labels."""
    total = 0.0
    xi = np.asarray(x, dtype=np.float64)
    cache = trunk_forward(model, xi[[pair.first, pair.second]])
    for labels in label_sets:
        recorded = labels.labels.get((pair.first, pair.second))
        if recorded is None:
            raise KeyError(
                f"pair ({pair.first}, {pair.second}) has no recorded label for "
                f"head {labels.head_index}"
            )
        scores = cache.emb @ model.heads[labels.head_index]
        phat, _ = K.pair_pref_forward(scores[:1], scores[1:])
        total += fidelity_loss(recorded, float(phat[0]))
    return total


# ---------------------------------------------------------------------------
# quadratic penalties


@dataclass
class ImportanceState:
    """Per-parameter importance weights, anchors, and running accumulators.

    Covers the full plastic parameter set (plus frozen trunk entries pinned
    at zero importance). ``accum`` holds method-specific running sums; only
    SI uses it.
    """

    method: str
    beta: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]
    accum: dict[str, np.ndarray] = field(default_factory=dict)

    def validate_against(self, model: ContinualModel) -> None:
        params = model.named_parameters()
        for name, arr in self.beta.items():
            if name not in params:
                raise ValueError(f"importance entry {name!r} has no model parameter")
            if arr.shape != params[name].shape or self.anchor[name].shape != arr.shape:
                raise ValueError(f"importance shapes for {name!r} do not match model")
            if np.any(arr < 0.0):
                raise ValueError(f"negative importance for {name!r}")


def _zero_like_params(model: ContinualModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.named_parameters().items()}


def _param_copies(model: ContinualModel) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.named_parameters().items()}


def importance_init(method: str, model: ContinualModel) -> ImportanceState:
    """Empty cumulative state: zero importance, anchors at current values."""
    if method not in ("ewc", "si", "mas"):
        raise ValueError(f"unknown importance method {method!r}")
    return ImportanceState(
        method=method, beta=_zero_like_params(model), anchor=_param_copies(model)
    )


def quadratic_penalty(model: ContinualModel, state: ImportanceState) -> float:
    """sum_i beta_i * (param_i - anchor_i)^2 over every anchored parameter."""
    state.validate_against(model)
    params = model.named_parameters()
    total = 0.0
    for name, beta in state.beta.items():
        delta = params[name] - state.anchor[name]
        total += float(np.sum(beta * delta * delta))
    return total


def quadratic_penalty_grads(
    model: ContinualModel, state: ImportanceState, names=None
) -> dict[str, np.ndarray]:
    """d/dparam of the penalty: 2*beta*(param - anchor), for selected names."""
    params = model.named_parameters()
    out = {}
    for name, beta in state.beta.items():
        if names is not None and name not in names:
            continue
        out[name] = 2.0 * beta * (params[name] - state.anchor[name])
    return out


class SiTracker:
    """Path-integral accumulator for SI, updated at every optimizer step.

    Accumulates the positive part of -grad * delta for each plastic
    parameter; consolidation divides by the task's total squared drift.
    """

    def __init__(self, model: ContinualModel):
        self.start = _param_copies(model)
        self.prev = _param_copies(model)
        self.omega = _zero_like_params(model)

    def note_new_parameter(self, name: str, arr: np.ndarray) -> None:
        """Register a parameter created after tracking began (a new head)."""
        self.start[name] = arr.copy()
        self.prev[name] = arr.copy()
        self.omega[name] = np.zeros_like(arr)

    def record_step(self, model: ContinualModel, grads: dict[str, np.ndarray]) -> None:
        params = model.named_parameters()
        for name, grad in grads.items():
            if name not in self.prev:
                continue
            delta = params[name] - self.prev[name]
            self.omega[name] += np.maximum(-grad * delta, 0.0)
            self.prev[name][...] = params[name]


def estimate_importance(
    method: str,
    model: ContinualModel,
    x: np.ndarray | None = None,
    pairs=None,
    *,
    si_tracker: SiTracker | None = None,
    head_index: int | None = None,
) -> ImportanceState:
    """This task's importance weights, anchored at the current parameters.

    ewc: mean squared per-pair gradient of the new-task fidelity loss.
    mas: mean absolute per-sample gradient of half the squared head score.
    si: accumulated path integral over the task's optimizer steps.
    """
    if method == "ewc":
        beta = _ewc_importance(model, x, pairs, head_index)
    elif method == "mas":
        beta = _mas_importance(model, x, head_index)
    elif method == "si":
        if si_tracker is None:
            raise ValueError("si importance needs the task's step tracker")
        beta = _si_importance(model, si_tracker)
    else:
        raise ValueError(f"unknown importance method {method!r}")
    full = _zero_like_params(model)
    for name, arr in beta.items():
        full[name] = arr
    return ImportanceState(method=method, beta=full, anchor=_param_copies(model))


def fold_importance(total: ImportanceState, task_state: ImportanceState) -> None:
    """Accumulate a finished task additively and move anchors forward."""
    if total.method != task_state.method:
        raise ValueError("importance states use different methods")
    for name, beta in task_state.beta.items():
        if name in total.beta:
            total.beta[name] = total.beta[name] + beta
        else:
            total.beta[name] = beta.copy()
    for name, anchor in task_state.anchor.items():
        total.anchor[name] = anchor.copy()
    total.accum.clear()


def _resolve_head(model: ContinualModel, head_index: int | None) -> int:
    if head_index is None:
        head_index = len(model.heads) - 1
    if not 0 <= head_index < len(model.heads):
        raise IndexError(f"head index {head_index} out of range")
    return head_index


def _ewc_importance(model, x, pairs, head_index) -> dict[str, np.ndarray]:
    if x is None or pairs is None:
        raise ValueError("ewc importance needs the task's samples and pairs")
    k = _resolve_head(model, head_index)
    x = np.asarray(x, dtype=np.float64)
    acc: dict[str, np.ndarray] = {}
    for pair in pairs:
        pf = forward_pairs(model, x[[pair.first]], x[[pair.second]], [k])
        _, dq = fidelity_loss_batch(np.array([pair.p]), pf.phat[k])
        grads = backward_pairs(model, pf, {k: dq})
        for name, g in grads.items():
            if name in acc:
                acc[name] += g * g
            else:
                acc[name] = g * g
    n = float(len(pairs))
    return {name: g / n for name, g in acc.items()}


def _mas_importance(model, x, head_index) -> dict[str, np.ndarray]:
    if x is None:
        raise ValueError("mas importance needs the task's samples")
    k = _resolve_head(model, head_index)
    x = np.asarray(x, dtype=np.float64)
    acc: dict[str, np.ndarray] = {}
    for i in range(x.shape[0]):
        scores, cache = forward_scores(model, x[[i]], k)
        grads = backward_scores(model, cache, k, scores)  # d(s^2/2) = s * ds
        for name, g in grads.items():
            if name in acc:
                acc[name] += np.abs(g)
            else:
                acc[name] = np.abs(g)
    n = float(x.shape[0])
    return {name: g / n for name, g in acc.items()}


def _si_importance(model, tracker: SiTracker) -> dict[str, np.ndarray]:
    params = model.named_parameters()
    out = {}
    for name, omega in tracker.omega.items():
        if name not in params:
            continue
        drift = params[name] - tracker.start[name]
        out[name] = omega / (drift * drift + SI_DAMPING)
    return out


# ---------------------------------------------------------------------------
# combined objective


def batch_objective(
    model: ContinualModel,
    xs: np.ndarray,
    ys: np.ndarray,
    p: np.ndarray,
    config: LossConfig,
    *,
    head_index: int | None = None,
    old_labels: dict[int, np.ndarray] | None = None,
    importance: ImportanceState | None = None,
    want_grads: bool = True,
    include_trunk: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """Mean batch loss and (optionally) its exact parameter gradients.

    ``old_labels`` maps old-head index to that head's recorded labels for the
    batch (same order as the rows). Under lwf, old heads receive gradients
    from their replay term only; under quadratic regularizers the penalty
    gradient reaches trunk parameters only (heads are never anchored while
    they can still move).
    """
    k = _resolve_head(model, head_index)
    p = np.asarray(p, dtype=np.float64)
    reg = config.regularizer
    use_lwf = reg == "lwf" and config.lam > 0.0 and old_labels
    use_quad = reg in ("ewc", "si", "mas") and config.lam > 0.0 and importance is not None

    if use_lwf and k in old_labels:
        raise ValueError("current head cannot carry replay labels")
    heads = [k] + (sorted(old_labels) if use_lwf else [])
    pf = forward_pairs(model, xs, ys, heads)
    b = pf.batch

    new_loss, new_dq = fidelity_loss_batch(p, pf.phat[k])
    loss = float(np.mean(new_loss))
    seeds = {k: new_dq / b}
    if use_lwf:
        for kk, labels in old_labels.items():
            old_loss, old_dq = fidelity_loss_batch(labels, pf.phat[kk])
            loss += config.lam * float(np.mean(old_loss))
            seeds[kk] = config.lam * old_dq / b
    if use_quad:
        loss += config.lam * quadratic_penalty(model, importance)

    if not want_grads:
        return loss, None

    grads = backward_pairs(model, pf, seeds, include_trunk=include_trunk)
    if use_quad and include_trunk:
        trunk_names = set(model.trunk_parameters(include_frozen=False))
        pen = quadratic_penalty_grads(model, importance, names=trunk_names)
        for name, g in pen.items():
            if name in grads:
                grads[name] = grads[name] + config.lam * g
            else:
                grads[name] = config.lam * g
    return loss, grads


def minibatch_loss(
    model: ContinualModel,
    xs: np.ndarray,
    ys: np.ndarray,
    p: np.ndarray,
    config: LossConfig,
    *,
    head_index: int | None = None,
    old_labels: dict[int, np.ndarray] | None = None,
    importance: ImportanceState | None = None,
) -> float:
    """Value of the training objective on one batch (no gradients)."""
    loss, _ = batch_objective(
        model,
        xs,
        ys,
        p,
        config,
        head_index=head_index,
        old_labels=old_labels,
        importance=importance,
        want_grads=False,
    )
    return loss
