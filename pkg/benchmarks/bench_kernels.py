"""Timing comparison between the compiled kernels and the numpy fallback.

Micro-benchmarks call both implementations directly on training-shaped
inputs; the end-to-end probe re-launches this script in a subprocess with
CONTIQ_KERNELS pinned, so the whole training path runs on one backend.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from contiq._kernels import _ref

try:
    from contiq._kernels import _native
except ImportError:
    _native = None

RNG = np.random.default_rng(0)


def timed(fn, *args, repeats=200):
    fn(*args)  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def micro_cases():
    """(name, args) on the shapes the trainer actually produces."""
    batch = 64  # 32 pairs -> 64 rows through the trunk
    emb = RNG.normal(size=(batch, 128))
    z = RNG.normal(size=(batch, 256))
    scores = RNG.normal(size=32)
    p = RNG.uniform(size=32)
    unit, norms = _ref.l2_normalize_rows(emb)
    param = RNG.normal(size=(256, 128))
    state = (
        np.zeros_like(param),
        np.zeros_like(param),
        1,
        3e-4,
        0.9,
        0.999,
        1e-8,
    )
    features = RNG.normal(size=(600, 128))
    centroids = RNG.normal(size=(128, 128))
    yield "normal_cdf", (RNG.normal(size=600),)
    yield "pair_pref_forward", (scores, RNG.normal(size=32))
    yield "fidelity_forward", (p, RNG.uniform(size=32), 1e-6, 1 - 1e-6)
    yield "relu", (z,)
    yield "relu_backward", (z, RNG.normal(size=z.shape))
    yield "l2_normalize_rows", (emb,)
    yield "l2_normalize_backward", (unit, norms, RNG.normal(size=emb.shape))
    yield "adam_update", (param, RNG.normal(size=param.shape), *state)
    yield "assign_nearest", (features, centroids)


def run_micro(repeats):
    print(f"{'kernel':<24} {'numpy':>12} {'native':>12} {'speedup':>9}")
    for name, args in micro_cases():
        def call(impl):
            fresh = [np.copy(a) if isinstance(a, np.ndarray) else a for a in args]
            return timed(getattr(impl, name), *fresh, repeats=repeats)

        ref_t = call(_ref)
        if _native is None:
            print(f"{name:<24} {ref_t * 1e6:>10.1f}us {'-':>12} {'-':>9}")
            continue
        nat_t = call(_native)
        print(
            f"{name:<24} {ref_t * 1e6:>10.1f}us {nat_t * 1e6:>10.1f}us "
            f"{ref_t / nat_t:>8.2f}x"
        )


def train_probe():
    """One small two-task training run; prints elapsed seconds."""
    from contiq.core import PairConfig
    from contiq.model import TrunkConfig
    from contiq.synthbench import default_benchmark_spec, generate_sequence
    from contiq.trainer import TrainConfig, run_sequence

    spec = default_benchmark_spec(seed=0, feature_dim=16, n_train=200, n_test=50)
    tasks, _ = generate_sequence(spec)
    config = TrainConfig(method="LwF-AW", epochs=6, warmup_epochs=2, seed=0)
    start = time.perf_counter()
    run_sequence(
        tasks[:2],
        config,
        trunk_config=TrunkConfig(input_dim=16, layer_widths=(256, 128), seed=0),
        pair_config=PairConfig(pairs_per_task=800, seed=0),
    )
    print(f"{time.perf_counter() - start:.3f}")


def run_end_to_end():
    print("\nend-to-end (2-task LwF-AW run, one backend per process):")
    for backend in ("python", "native"):
        if backend == "native" and _native is None:
            print(f"  {backend:<8} unavailable")
            continue
        env = dict(os.environ)
        env["CONTIQ_KERNELS"] = backend
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--train-probe"],
            capture_output=True,
            text=True,
            env=env,
        )
        if proc.returncode != 0:
            print(f"  {backend:<8} failed:\n{proc.stderr}")
            continue
        print(f"  {backend:<8} {float(proc.stdout.strip()):.3f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--train-probe", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.train_probe:
        train_probe()
        return
    if _native is None:
        print("compiled backend unavailable; timing the numpy fallback only\n")
    run_micro(args.repeats)
    run_end_to_end()


if __name__ == "__main__":
    main()
