"""Command-line front end: generate benchmark data, run the method
matrix, summarize results, and inspect checkpoints.

Everything is driven by one JSON config document; all randomness flows
from the seeds it names, so reruns of the same config are byte-identical.
Result files are written to a temporary name and renamed into place, so an
interrupted run never leaves a half-written document behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core import PairConfig, TaskDataset, load_samples, save_samples
from .metrics import format_srcc_matrix, record_from_json, record_to_json
from .model import TrunkConfig
from .summarizer import WeightingConfig
from .synthbench import BENCHMARK_ORDERS, default_benchmark_spec, generate_sequence, reorder_tasks
from .trainer import METHODS, TrainConfig, run_sequence

__all__ = [
    "RunConfig",
    "cmd_gen",
    "cmd_inspect",
    "cmd_report",
    "cmd_run",
    "load_run_config",
    "main",
]

log = logging.getLogger("contiq")

_BENCHMARK_KEYS = {"seed", "order", "feature_dim", "n_train", "n_test"}
_TRUNK_KEYS = {"layer_widths", "frozen_prefix_layers", "seed"}
_PAIR_KEYS = {"pairs_per_task", "seed"}
_TRAIN_KEYS = {
    "epochs",
    "warmup_epochs",
    "lr",
    "lr_decay_factor",
    "lr_decay_every",
    "batch_warmup",
    "batch_main",
    "lam",
}
_WEIGHTING_KEYS = {"tau", "mode"}
_TOP_KEYS = {
    "out_dir",
    "benchmark",
    "datasets",
    "trunk",
    "pairs",
    "train",
    "weighting",
    "methods",
    "seeds",
}


@dataclass(frozen=True)
class RunConfig:
    """Parsed and validated experiment document.

    Datasets come either from the built-in benchmark generator (the
    `benchmark` section) or from explicit sample files (`datasets`); the
    trunk and pair seeds default to each replicate's seed so replicates
    re-randomize everything.
    """

    out_dir: str
    benchmark: dict | None
    datasets: tuple | None
    trunk: dict
    pairs: dict
    train: dict
    weighting: dict | None
    methods: tuple
    seeds: tuple
    base_dir: Path


def _check_keys(section: str, mapping: dict, allowed: set):
    unknown = set(mapping) - allowed
    if unknown:
        raise ValueError(f"config section {section!r} has unknown keys: {sorted(unknown)}")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    _check_keys("<top level>", doc, _TOP_KEYS)

    benchmark = doc.get("benchmark")
    datasets = doc.get("datasets")
    if benchmark is not None and datasets is not None:
        raise ValueError("config must use either 'benchmark' or 'datasets', not both")
    if benchmark is None and datasets is None:
        benchmark = {}
    if benchmark is not None:
        _check_keys("benchmark", benchmark, _BENCHMARK_KEYS)
        order = benchmark.get("order", "I")
        if order not in BENCHMARK_ORDERS:
            raise ValueError(
                f"benchmark order {order!r} is not one of {sorted(BENCHMARK_ORDERS)}"
            )
    if datasets is not None:
        if not isinstance(datasets, list) or not datasets:
            raise ValueError("'datasets' must be a non-empty list")
        for entry in datasets:
            _check_keys("datasets[]", entry, {"name", "train", "test"})
            for key in ("name", "train", "test"):
                if key not in entry:
                    raise ValueError(f"datasets entry is missing {key!r}")

    trunk = doc.get("trunk", {})
    _check_keys("trunk", trunk, _TRUNK_KEYS)
    pairs = doc.get("pairs", {})
    _check_keys("pairs", pairs, _PAIR_KEYS)
    train = doc.get("train", {})
    _check_keys("train", train, _TRAIN_KEYS)
    weighting = doc.get("weighting")
    if weighting is not None:
        _check_keys("weighting", weighting, _WEIGHTING_KEYS)
        WeightingConfig(**weighting)  # validate eagerly

    methods = tuple(doc.get("methods", ["MH-CL"]))
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r} in config")
    if not methods:
        raise ValueError("config names no methods")
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(
        isinstance(s, int) for s in seeds
    ):
        raise ValueError("'seeds' must be a non-empty list of integers")

    # exercise the training keys once so bad values fail before any work
    TrainConfig(method=methods[0], seed=int(seeds[0]), **train)

    return RunConfig(
        out_dir=doc.get("out_dir", "runs"),
        benchmark=benchmark,
        datasets=tuple(datasets) if datasets is not None else None,
        trunk=trunk,
        pairs=pairs,
        train=train,
        weighting=weighting,
        methods=methods,
        seeds=tuple(int(s) for s in seeds),
        base_dir=path.parent,
    )


# ---------------------------------------------------------------------------
# file plumbing


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _save_samples_atomic(path: Path, samples):
    tmp = path.with_name(path.name + ".tmp")
    save_samples(tmp, samples)
    os.replace(tmp, path)


def _save_checkpoint_atomic(path: Path, model, meta):
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(tmp, model, meta=meta)
    os.replace(tmp, path)


def _out_dir(config: RunConfig, override) -> Path:
    return Path(override) if override else Path(config.out_dir)


def _benchmark_sequence(config: RunConfig):
    section = config.benchmark or {}
    spec = default_benchmark_spec(
        seed=int(section.get("seed", 0)),
        feature_dim=int(section.get("feature_dim", 32)),
        n_train=int(section.get("n_train", 600)),
        n_test=int(section.get("n_test", 150)),
    )
    return generate_sequence(spec)


def _load_split(path) -> tuple:
    samples = load_samples(path)
    if not samples:
        raise ValueError(f"{path}: file holds a header but no samples")
    return samples


def _load_stream(config: RunConfig, out: Path) -> list[TaskDataset]:
    """The task stream cmd_run trains on, in stream order."""
    if config.datasets is not None:
        tasks = []
        for entry in config.datasets:
            train = _load_split(config.base_dir / entry["train"])
            test = _load_split(config.base_dir / entry["test"])
            tasks.append(
                TaskDataset(
                    name=entry["name"],
                    dim=train[0].features.size,
                    train=train,
                    test=test,
                )
            )
        dims = {t.dim for t in tasks}
        if len(dims) != 1:
            raise ValueError(f"dataset files disagree on feature dimension: {sorted(dims)}")
        return tasks

    manifest_path = out / "data" / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"{manifest_path} not found; run the gen command first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    tasks = []
    for entry in manifest["files"]:
        train = _load_split(out / "data" / entry["train"])
        test = _load_split(out / "data" / entry["test"])
        tasks.append(
            TaskDataset(
                name=entry["name"],
                dim=train[0].features.size,
                train=train,
                test=test,
            )
        )
    order = BENCHMARK_ORDERS[(config.benchmark or {}).get("order", "I")]
    return reorder_tasks(tasks, order)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    config = load_run_config(args.config)
    if config.datasets is not None:
        raise ValueError("gen needs a 'benchmark' section; this config lists external datasets")
    out = _out_dir(config, args.out)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    datasets, manifest = _benchmark_sequence(config)
    files = []
    for dataset in datasets:
        train_name = f"{dataset.name}.train.csv"
        test_name = f"{dataset.name}.test.csv"
        _save_samples_atomic(data_dir / train_name, dataset.train)
        _save_samples_atomic(data_dir / test_name, dataset.test)
        files.append({"name": dataset.name, "train": train_name, "test": test_name})
        log.info("wrote %s (%d train / %d test)", dataset.name, len(dataset.train), len(dataset.test))
    doc = {"generator": manifest, "files": files}
    _write_atomic(
        data_dir / "manifest.json",
        (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8"),
    )
    print(f"wrote {2 * len(datasets)} dataset files + manifest to {data_dir}")
    return 0


def _cell_train_config(config: RunConfig, method: str, seed: int) -> TrainConfig:
    return TrainConfig(method=method, seed=seed, **config.train)


def _cell_trunk_config(config: RunConfig, dim: int, seed: int) -> TrunkConfig:
    section = config.trunk
    return TrunkConfig(
        input_dim=dim,
        layer_widths=tuple(section.get("layer_widths", (256, 128))),
        frozen_prefix_layers=int(section.get("frozen_prefix_layers", 0)),
        seed=int(section.get("seed", seed)),
    )


def _cell_pair_config(config: RunConfig, seed: int) -> PairConfig:
    section = config.pairs
    return PairConfig(
        pairs_per_task=int(section.get("pairs_per_task", 3000)),
        seed=int(section.get("seed", seed)),
    )


def cmd_run(args) -> int:
    config = load_run_config(args.config)
    out = _out_dir(config, args.out)
    methods = args.methods.split(",") if args.methods else list(config.methods)
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(config.seeds)
    tasks = _load_stream(config, out)
    weighting = WeightingConfig(**config.weighting) if config.weighting else None

    for method in methods:
        for seed in seeds:
            log.info("running %s seed %d", method, seed)
            result = run_sequence(
                tasks,
                _cell_train_config(config, method, seed),
                trunk_config=_cell_trunk_config(config, tasks[0].dim, seed),
                pair_config=_cell_pair_config(config, seed),
                weighting=weighting,
            )
            cell = out / "results" / method / f"seed{seed}"
            cell.mkdir(parents=True, exist_ok=True)
            _write_atomic(cell / "metrics.json", record_to_json(result.record).encode("utf-8"))
            _write_atomic(
                cell / "srcc_matrix.txt", format_srcc_matrix(result.record.srcc).encode("utf-8")
            )
            _write_atomic(
                cell / "train_log.jsonl",
                "".join(json.dumps(e, sort_keys=True) + "\n" for e in result.logs).encode("utf-8"),
            )
            ckpt_dir = cell / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            for t, snapshot in enumerate(result.snapshots):
                _save_checkpoint_atomic(
                    ckpt_dir / f"task{t:02d}.npz",
                    snapshot,
                    {"method": method, "seed": seed, "task": t},
                )
            print(f"{method} seed {seed}: mpsr={result.record.mpsr:+.4f} "
                  f"weighted_srcc={result.record.weighted_srcc:+.4f}")
    return 0


def _collect_records(root: Path) -> dict[str, list[tuple[int, object]]]:
    """metrics.json files grouped by method, each as (seed, record)."""
    found: dict[str, list[tuple[int, object]]] = {}
    for path in sorted(root.glob("**/metrics.json")):
        cell = path.parent
        if not cell.name.startswith("seed"):
            continue
        try:
            seed = int(cell.name[len("seed"):])
        except ValueError:
            continue
        method = cell.parent.name
        record = record_from_json(path.read_text(encoding="utf-8"))
        found.setdefault(method, []).append((seed, record))
    for rows in found.values():
        rows.sort(key=lambda pair: pair[0])
    return found


def _summary_table(found: dict) -> str:
    lines = [f"{'method':<10} {'seeds':>5} {'MPSR':>17} {'weighted-SRCC':>17}"]
    for method in sorted(found):
        rows = found[method]
        m = np.array([rec.mpsr for _, rec in rows])
        w = np.array([rec.weighted_srcc for _, rec in rows])
        lines.append(
            f"{method:<10} {len(rows):>5} "
            f"{m.mean():+.4f} ± {m.max() - m.min():.4f} "
            f"{w.mean():+.4f} ± {w.max() - w.min():.4f}"
        )
    return "\n".join(lines) + "\n"


def _psr_plot(found: dict, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "contiq"
    plt.rcParams["svg.fonttype"] = "none"  # keep legend text as text
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(found):
        rows = found[method]
        lengths = {len(rec.psr) for _, rec in rows}
        if len(lengths) != 1:
            raise ValueError(f"method {method!r} has inconsistent PSR lengths across seeds")
        curve = np.mean([rec.psr for _, rec in rows], axis=0)
        ax.plot(range(len(curve)), curve, marker="o", label=method)
    ax.set_xlabel("task index")
    ax.set_ylabel("PSR")
    ax.set_title("stability-weighted rank correlation over the task stream")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)


def cmd_report(args) -> int:
    root = Path(args.dir)
    found = _collect_records(root)
    if not found:
        raise ValueError(f"no metrics.json files under {root}")
    report_dir = root / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    table = _summary_table(found)
    _write_atomic(report_dir / "summary.txt", table.encode("utf-8"))
    _psr_plot(found, report_dir / "psr.svg")
    sys.stdout.write(table)
    print(f"report written to {report_dir}")
    return 0


def cmd_inspect(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    cfg = model.config
    print(
        f"trunk: input_dim={cfg.input_dim} widths={cfg.layer_widths} "
        f"frozen_prefix={cfg.frozen_prefix_layers} seed={cfg.seed}"
    )
    if model.task_names:
        print("tasks: " + ", ".join(model.task_names))
    for i, layer in enumerate(model.layers):
        print(f"layer {i}: shape={layer.weight.shape} weight-norm={np.linalg.norm(layer.weight):.4f}")
    for k, head in enumerate(model.heads):
        print(f"head {k}: dim={head.size} norm={np.linalg.norm(head):.4f}")
    for summary in model.summaries:
        norms = np.linalg.norm(summary.centroids, axis=1)
        print(
            f"summary {summary.task_index}: k={summary.k} "
            f"mean-centroid-norm={norms.mean():.4f}"
        )
    if bundle.importance is not None:
        total = sum(float(b.sum()) for b in bundle.importance.beta.values())
        print(f"importance: {bundle.importance.method} (total weight {total:.4g})")
    else:
        print("importance: none")
    if bundle.meta:
        print(f"meta: {json.dumps(bundle.meta, sort_keys=True)}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contiq",
        description="continual quality-ranking experiments: generate, run, report",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate the synthetic benchmark datasets")
    gen.add_argument("--config", required=True, help="path to the JSON run config")
    gen.add_argument("--out", help="output directory (overrides the config)")
    gen.set_defaults(func=cmd_gen)

    runp = sub.add_parser("run", help="train methods over the task stream")
    runp.add_argument("--config", required=True, help="path to the JSON run config")
    runp.add_argument("--methods", help="comma-separated method names (overrides the config)")
    runp.add_argument("--seeds", help="comma-separated replicate seeds (overrides the config)")
    runp.add_argument("--out", help="output directory (overrides the config)")
    runp.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarize finished runs into a table and plot")
    rep.add_argument("--dir", required=True, help="run output directory")
    rep.set_defaults(func=cmd_report)

    ins = sub.add_parser("inspect", help="pretty-print a checkpoint")
    ins.add_argument("--checkpoint", required=True, help="checkpoint file to describe")
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    level_name = os.environ.get("CONTIQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
