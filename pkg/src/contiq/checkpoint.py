"""Self-describing model checkpoints with bit-exact round trips.

A checkpoint is a single ``.npz`` holding every parameter array, the task
summaries, any importance state, and a JSON metadata block (trunk config,
head count, task names). Arrays are stored as float64 and reload exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import ContinualModel, DenseLayer, TrunkConfig
from .objectives import ImportanceState
from .summarizer import TaskSummary

__all__ = ["CheckpointBundle", "save_checkpoint", "load_checkpoint"]

_FORMAT = "contiq-checkpoint"
_VERSION = 1


@dataclass
class CheckpointBundle:
    """Everything a checkpoint restores."""

    model: ContinualModel
    importance: ImportanceState | None
    meta: dict


def save_checkpoint(
    path,
    model: ContinualModel,
    importance: ImportanceState | None = None,
    meta: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters().items():
        arrays[f"param/{name}"] = param
    for summary in model.summaries:
        arrays[f"summary/{summary.task_index}"] = summary.centroids
    if importance is not None:
        for name, beta in importance.beta.items():
            arrays[f"importance/beta/{name}"] = beta
        for name, anchor in importance.anchor.items():
            arrays[f"importance/anchor/{name}"] = anchor

    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "config": {
            "input_dim": model.config.input_dim,
            "layer_widths": list(model.config.layer_widths),
            "frozen_prefix_layers": model.config.frozen_prefix_layers,
            "activation": model.config.activation,
            "seed": model.config.seed,
        },
        "n_heads": len(model.heads),
        "summary_tasks": [s.task_index for s in model.summaries],
        "task_names": list(model.task_names),
        "importance_method": None if importance is None else importance.method,
        "meta": meta or {},
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> CheckpointBundle:
    with np.load(path) as data:
        arrays = {key: data[key] for key in data.files}
    if "__meta__" not in arrays:
        raise ValueError(f"{path}: not a checkpoint (missing metadata block)")
    header = json.loads(bytes(arrays.pop("__meta__")).decode("utf-8"))
    if header.get("format") != _FORMAT:
        raise ValueError(f"{path}: unrecognized checkpoint format")
    if header.get("version") != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")

    cfg = header["config"]
    config = TrunkConfig(
        input_dim=cfg["input_dim"],
        layer_widths=tuple(cfg["layer_widths"]),
        frozen_prefix_layers=cfg["frozen_prefix_layers"],
        activation=cfg["activation"],
        seed=cfg["seed"],
    )
    layers = []
    for i in range(len(config.layer_widths)):
        try:
            weight = arrays[f"param/trunk.{i}.weight"]
            bias = arrays[f"param/trunk.{i}.bias"]
        except KeyError as exc:
            raise ValueError(f"{path}: missing trunk array {exc.args[0]}") from None
        layers.append(DenseLayer(weight=weight.copy(), bias=bias.copy()))
    model = ContinualModel(config, layers)
    for k in range(header["n_heads"]):
        try:
            model.heads.append(arrays[f"param/head.{k}"].copy())
        except KeyError:
            raise ValueError(f"{path}: missing head {k}") from None
    for t in header["summary_tasks"]:
        try:
            centroids = arrays[f"summary/{t}"]
        except KeyError:
            raise ValueError(f"{path}: missing summary for task {t}") from None
        model.summaries.append(TaskSummary(task_index=t, centroids=centroids.copy()))
    model.task_names = [str(n) for n in header["task_names"]]

    importance = None
    method = header.get("importance_method")
    if method is not None:
        beta = {}
        anchor = {}
        for key, value in arrays.items():
            if key.startswith("importance/beta/"):
                beta[key[len("importance/beta/") :]] = value.copy()
            elif key.startswith("importance/anchor/"):
                anchor[key[len("importance/anchor/") :]] = value.copy()
        importance = ImportanceState(method=method, beta=beta, anchor=anchor)
    return CheckpointBundle(model=model, importance=importance, meta=header["meta"])
