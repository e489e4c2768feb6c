"""Compare the compiled kernel backend against the pure-numpy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--rows 4096] [--dim 64] [--repeat 200]

Each kernel is timed over ``repeat`` calls after a warmup pass, on both
backends, and the table reports the median per-call time plus the speedup.
A second section times one full desk-scale training step (forward + backward
through the autodiff graph) under each backend, which is the number that
actually matters for the experiments.
"""

import argparse
import importlib
import os
import statistics
import subprocess
import sys
import time

import numpy as np


def _load_backend(pure):
    """(Re-)import cmt.kernels with the backend pinned via the environment."""
    os.environ["CMT_PURE_KERNELS"] = "1" if pure else "0"
    for name in [n for n in list(sys.modules) if n.startswith("cmt")]:
        del sys.modules[name]
    kernels = importlib.import_module("cmt.kernels")
    return kernels


def _bench(fn, repeat):
    fn()  # warmup
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(kernels, rows, dim, rng):
    x = rng.standard_normal((rows, dim)).astype(np.float32)
    gy = rng.standard_normal((rows, dim)).astype(np.float32)
    pos = rng.integers(0, 512, size=rows).astype(np.float64)
    logits = rng.standard_normal((rows, 75)).astype(np.float32)
    targets = rng.integers(0, 75, size=rows)
    gloss = rng.standard_normal(rows).astype(np.float32)
    y = kernels.softmax_fwd(x)
    yn, inv = kernels.rmsnorm_fwd(x, 1e-6)
    _, probs = kernels.xent_fwd(logits, targets)
    return [
        ("softmax_fwd", lambda: kernels.softmax_fwd(x)),
        ("softmax_bwd", lambda: kernels.softmax_bwd(y, gy)),
        ("rmsnorm_fwd", lambda: kernels.rmsnorm_fwd(x, 1e-6)),
        ("rmsnorm_bwd", lambda: kernels.rmsnorm_bwd(yn, inv, gy)),
        ("rope_fwd", lambda: kernels.rope_fwd(x, pos, 10000.0)),
        ("silu_fwd", lambda: kernels.silu_fwd(x)),
        ("silu_bwd", lambda: kernels.silu_bwd(x, gy)),
        ("xent_fwd", lambda: kernels.xent_fwd(logits, targets)),
        ("xent_bwd", lambda: kernels.xent_bwd(probs, targets, gloss)),
    ]


def bench_kernels(rows, dim, repeat):
    results = {}
    backends = {}
    for pure in (False, True):
        kernels = _load_backend(pure)
        key = "pure" if pure else "default"
        backends[key] = kernels.BACKEND
        rng = np.random.default_rng(0)
        for name, fn in kernel_cases(kernels, rows, dim, rng):
            results.setdefault(name, {})[key] = _bench(fn, repeat)
    if backends["default"] == "pure":
        print("compiled backend not built; both columns run the pure fallback")
    print(f"\nper-kernel median seconds ({rows} rows x {dim} features, {repeat} reps)")
    print(f"{'kernel':<14} {backends['default']:>12} {'pure':>12} {'speedup':>9}")
    for name, r in results.items():
        sp = r["pure"] / r["default"] if r["default"] > 0 else float("inf")
        print(f"{name:<14} {r['default']:>12.3e} {r['pure']:>12.3e} {sp:>8.2f}x")


def bench_train_step():
    """One real training step per backend, in subprocesses so the import is clean."""
    code = r"""
import time
import numpy as np
from cmt.config import ModelConfig, TrainConfig
from cmt.corpus import gen_synthetic
from cmt.pipeline import build_model, learning_phase
from cmt import kernels

model = build_model(ModelConfig(), seed=0)
model.freeze_lm()
train = gen_synthetic(0, 16, split="train")
valid = gen_synthetic(0, 4, split="valid")
tcfg = TrainConfig(epochs=2, batch_size=8, grad_accum=1, valid_interval=10**9)
learning_phase(model, train, valid, tcfg)  # warmup (2 epochs, 4 steps)
t0 = time.perf_counter()
tcfg = TrainConfig(epochs=8, batch_size=8, grad_accum=1, valid_interval=10**9)
learning_phase(model, train, valid, tcfg)
dt = (time.perf_counter() - t0) / 16
print(f"{kernels.BACKEND} {dt:.4f}")
"""
    print("\nfull training step (batch 8, desk scale), seconds per optimizer step")
    for pure in ("0", "1"):
        env = dict(os.environ, CMT_PURE_KERNELS=pure)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(out.stderr.strip())
            raise SystemExit(1)
        backend, dt = out.stdout.split()[-2:]
        print(f"  {backend:<10} {float(dt):.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-train-step", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.rows, args.dim, args.repeat)
    if not args.skip_train_step:
        bench_train_step()


if __name__ == "__main__":
    main()
