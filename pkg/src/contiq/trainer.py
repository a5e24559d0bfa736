"""Sequential training protocol and the method/baseline matrix.

One model learns a stream of tasks under a fixed schedule: a heads-only
warm-up, then joint trunk+head epochs with a stepped learning-rate decay,
Adam throughout. The METHODS table maps every runnable method name to its
structural choices (head layout, regularizer, inference-time weighting),
so ablations differ only by table row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .core import PairConfig, RankedPair, TaskDataset, build_pairs
from .metrics import MetricsRecord, evaluate_stream
from .model import (
    ContinualModel,
    TrunkConfig,
    add_head,
    init_model,
    stable_features_batch,
)
from .objectives import (
    DEFAULT_LAMBDA,
    ImportanceState,
    LossConfig,
    SiTracker,
    batch_objective,
    estimate_importance,
    fold_importance,
    importance_init,
    lwf_pseudo_labels,
)
from .summarizer import DEFAULT_K, DEFAULT_TAU, WeightingConfig, kmeans_summarize

__all__ = [
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "METHODS",
    "AdamState",
    "MethodSpec",
    "RunResult",
    "TrainConfig",
    "optimizer_step",
    "resolved_lambda",
    "run_sequence",
    "train_task",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# seed-stream tags; must stay distinct from the model's layer/head streams
_SHUFFLE_STREAM = 3
_PAIR_STREAM = 4

_QUADRATIC = ("ewc", "si", "mas")


@dataclass(frozen=True)
class MethodSpec:
    """Structural description of one runnable method.

    regularizer picks the anti-forgetting term, multi_head grows one head
    per task (else a single head is reused), fresh_model restarts from a
    new network every task, joint trains once on all tasks together, and
    weight_mode/weight_tau fix the inference-time head weighting.
    """

    regularizer: str = "none"
    multi_head: bool = True
    fresh_model: bool = False
    joint: bool = False
    weight_mode: str = "latest"
    weight_tau: float = DEFAULT_TAU


METHODS: dict[str, MethodSpec] = {
    "SL": MethodSpec(multi_head=False, fresh_model=True),
    "JL": MethodSpec(multi_head=False, joint=True),
    "SH-CL": MethodSpec(multi_head=False),
    "MH-CL": MethodSpec(),
    "MH-CL-AW": MethodSpec(weight_mode="adaptive"),
    "MH-CL-O": MethodSpec(weight_mode="oracle"),
    "LwF": MethodSpec(regularizer="lwf"),
    "LwF-O": MethodSpec(regularizer="lwf", weight_mode="oracle"),
    "LwF-SW": MethodSpec(regularizer="lwf", weight_mode="adaptive", weight_tau=0.0),
    "LwF-HW": MethodSpec(regularizer="lwf", weight_mode="hard"),
    "LwF-AW": MethodSpec(regularizer="lwf", weight_mode="adaptive"),
    "EWC": MethodSpec(regularizer="ewc"),
    "EWC-AW": MethodSpec(regularizer="ewc", weight_mode="adaptive"),
    "SI": MethodSpec(regularizer="si"),
    "SI-AW": MethodSpec(regularizer="si", weight_mode="adaptive"),
    "MAS": MethodSpec(regularizer="mas"),
    "MAS-AW": MethodSpec(regularizer="mas", weight_mode="adaptive"),
}


@dataclass(frozen=True)
class TrainConfig:
    """Protocol constants for one run.

    lam=None defers to the regularizer's default strength; an explicit
    value (including 0.0) overrides it.
    """

    method: str
    epochs: int = 9
    warmup_epochs: int = 3
    lr: float = 3e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 3
    batch_warmup: int = 128
    batch_main: int = 32
    lam: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.lr_decay_factor >= 1:
            raise ValueError("lr_decay_factor must be >= 1")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.batch_warmup < 1 or self.batch_main < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")


def resolved_lambda(config: TrainConfig) -> float:
    """The regularizer strength actually used by this config."""
    if config.lam is not None:
        return float(config.lam)
    return DEFAULT_LAMBDA[METHODS[config.method].regularizer]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter Adam accumulators, created lazily on first gradient.

    Step counters are per parameter, so a parameter first updated after
    warm-up still gets full bias correction on its early steps.
    """

    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def optimizer_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
):
    """One in-place Adam update on every parameter named in grads.

    Parameters absent from grads (frozen layers, untouched heads) are left
    alone entirely: no state is created and their counters do not move.
    """
    for name in sorted(grads):
        param = params[name]
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match {name!r} {param.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
            state.steps[name] = 0
        state.steps[name] += 1
        K.adam_update(
            param,
            grad,
            state.m[name],
            state.v[name],
            state.steps[name],
            lr,
            state.beta1,
            state.beta2,
            state.eps,
        )
    return params, state


# ---------------------------------------------------------------------------
# single-task loop


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr / config.lr_decay_factor ** (epoch // config.lr_decay_every)


def _fit(
    model: ContinualModel,
    x: np.ndarray,
    pairs: list[RankedPair],
    config: TrainConfig,
    loss_config: LossConfig,
    *,
    head_index: int,
    task_position: int,
    old_labels: dict[int, np.ndarray] | None = None,
    importance: ImportanceState | None = None,
    si_tracker: SiTracker | None = None,
) -> list[dict]:
    """Epoch/batch loop over one pair set; returns the per-epoch log."""
    firsts = np.array([p.first for p in pairs])
    seconds = np.array([p.second for p in pairs])
    probs = np.array([p.p for p in pairs])
    n = len(pairs)
    adam = AdamState()
    log = []
    for epoch in range(config.epochs):
        warm = epoch < config.warmup_epochs
        batch_size = config.batch_warmup if warm else config.batch_main
        lr = _epoch_lr(config, epoch)
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, _SHUFFLE_STREAM, task_position, epoch])
        )
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            batch_old = (
                {k: labels[idx] for k, labels in old_labels.items()}
                if old_labels
                else None
            )
            loss, grads = batch_objective(
                model,
                x[firsts[idx]],
                x[seconds[idx]],
                probs[idx],
                loss_config,
                head_index=head_index,
                old_labels=batch_old,
                importance=importance,
                include_trunk=not warm,
            )
            optimizer_step(adam, model.named_parameters(), grads, lr)
            if si_tracker is not None:
                si_tracker.record_step(model, grads)
            loss_sum += loss * idx.size
        log.append(
            {
                "task": task_position,
                "epoch": epoch,
                "phase": "warmup" if warm else "main",
                "loss": loss_sum / n,
                "lr": lr,
            }
        )
    return log


def train_task(
    model: ContinualModel,
    dataset: TaskDataset,
    pairs: list[RankedPair],
    config: TrainConfig,
    *,
    task_position: int = 0,
    importance_total: ImportanceState | None = None,
) -> list[dict]:
    """Learn one task in place and append its summary; returns the epoch log.

    Multi-head methods get a new head first; single-head methods reuse the
    existing one. Pseudo-labels for the old heads are recorded once, before
    any parameter moves. When a cumulative importance state is supplied it
    both shapes the objective (from the second task on) and absorbs this
    task's importance afterwards.
    """
    spec = METHODS[config.method]
    if dataset.dim != model.config.input_dim:
        raise ValueError(
            f"dataset dimension {dataset.dim} does not match model input "
            f"{model.config.input_dim}"
        )
    lam = resolved_lambda(config)
    x = dataset.feature_matrix("train")

    old_labels = None
    if spec.regularizer == "lwf" and lam > 0 and model.heads:
        label_sets = lwf_pseudo_labels(model, x, pairs)
        old_labels = {s.head_index: s.aligned(pairs) for s in label_sets}

    if spec.multi_head or not model.heads:
        add_head(model)
    head_index = len(model.heads) - 1

    si_tracker = None
    if spec.regularizer == "si" and lam > 0:
        si_tracker = SiTracker(model)
    use_importance = (
        spec.regularizer in _QUADRATIC
        and lam > 0
        and importance_total is not None
        and task_position > 0
    )
    log = _fit(
        model,
        x,
        pairs,
        config,
        LossConfig(lam=lam, regularizer=spec.regularizer),
        head_index=head_index,
        task_position=task_position,
        old_labels=old_labels,
        importance=importance_total if use_importance else None,
        si_tracker=si_tracker,
    )

    embedded = stable_features_batch(model, x)
    summary = kmeans_summarize(
        embedded, DEFAULT_K, config.seed, task_index=len(model.summaries)
    )
    model.summaries.append(summary)
    model.task_names.append(dataset.name)

    if spec.regularizer in _QUADRATIC and lam > 0 and importance_total is not None:
        task_state = estimate_importance(
            spec.regularizer,
            model,
            x,
            pairs,
            si_tracker=si_tracker,
            head_index=head_index,
        )
        fold_importance(importance_total, task_state)
    return log


# ---------------------------------------------------------------------------
# full sequence


@dataclass
class RunResult:
    """Everything one sequence run produces."""

    method: str
    record: MetricsRecord
    snapshots: list[ContinualModel]
    logs: list[dict]


def _task_pair_config(base: PairConfig, task_position: int) -> PairConfig:
    seed = int(
        np.random.SeedSequence(
            [base.seed, _PAIR_STREAM, task_position]
        ).generate_state(1)[0]
    )
    return PairConfig(pairs_per_task=base.pairs_per_task, seed=seed)


def _joint_training_set(
    tasks: list[TaskDataset], pair_sets: list[list[RankedPair]]
) -> tuple[np.ndarray, list[RankedPair]]:
    """Concatenated features plus index-shifted pairs over every task."""
    x_all = np.vstack([t.feature_matrix("train") for t in tasks])
    pairs_all: list[RankedPair] = []
    offset = 0
    for task, pairs in zip(tasks, pair_sets):
        for pair in pairs:
            pairs_all.append(
                RankedPair(pair.first + offset, pair.second + offset, pair.p)
            )
        offset += len(task.train)
    return x_all, pairs_all


def run_sequence(
    tasks: list[TaskDataset],
    config: TrainConfig,
    *,
    trunk_config: TrunkConfig | None = None,
    pair_config: PairConfig | None = None,
    weighting: WeightingConfig | None = None,
    progress=None,
) -> RunResult:
    """Train config.method over the task stream and score the result.

    Only the joint-training baseline ever sees more than one dataset at a
    time; every other method's task loop receives exactly the current
    dataset, so older training data is out of reach by construction. The
    optional progress callback receives ("train_start"/"train_end", t)
    around each task's training phase. ``weighting`` overrides the
    method's own inference mode; leave it None to follow the table.
    """
    if not tasks:
        raise ValueError("run_sequence needs at least one task")
    dims = {t.dim for t in tasks}
    if len(dims) != 1:
        raise ValueError("all tasks must share one feature dimension")
    spec = METHODS[config.method]
    if trunk_config is None:
        trunk_config = TrunkConfig(input_dim=tasks[0].dim, seed=config.seed)
    if trunk_config.input_dim != tasks[0].dim:
        raise ValueError("trunk input dimension does not match the tasks")
    base_pairs = pair_config if pair_config is not None else PairConfig()
    pair_sets = [
        build_pairs(task, _task_pair_config(base_pairs, t))
        for t, task in enumerate(tasks)
    ]

    def note(event: str, task_position: int):
        if progress is not None:
            progress(event, task_position)

    logs: list[dict] = []
    snapshots: list[ContinualModel] = []
    if spec.joint:
        model = init_model(trunk_config)
        add_head(model)
        x_all, pairs_all = _joint_training_set(tasks, pair_sets)
        note("train_start", 0)
        logs.extend(
            _fit(
                model,
                x_all,
                pairs_all,
                config,
                LossConfig(lam=0.0, regularizer="none"),
                head_index=0,
                task_position=0,
            )
        )
        note("train_end", 0)
        snapshots.append(model)
        scored = model
    elif spec.fresh_model:
        for t, task in enumerate(tasks):
            model = init_model(trunk_config)
            note("train_start", t)
            logs.extend(
                train_task(model, task, pair_sets[t], config, task_position=t)
            )
            note("train_end", t)
            snapshots.append(model)
        scored = snapshots
    else:
        model = init_model(trunk_config)
        importance_total = None
        if spec.regularizer in _QUADRATIC and resolved_lambda(config) > 0:
            importance_total = importance_init(spec.regularizer, model)
        for t, task in enumerate(tasks):
            note("train_start", t)
            logs.extend(
                train_task(
                    model,
                    task,
                    pair_sets[t],
                    config,
                    task_position=t,
                    importance_total=importance_total,
                )
            )
            note("train_end", t)
            snapshots.append(model.copy())
        scored = snapshots

    if weighting is None:
        weighting = WeightingConfig(tau=spec.weight_tau, mode=spec.weight_mode)
    record = evaluate_stream(scored, tasks, weighting)
    return RunResult(
        method=config.method, record=record, snapshots=snapshots, logs=logs
    )
