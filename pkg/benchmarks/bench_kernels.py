"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--rows 2000]

Shapes follow the reference experiment: 2000 test samples, 6 sources,
a 512-token vocabulary and a 32-wide model. Each kernel is called once
before timing so JIT compilation is excluded. Outputs of both paths are
compared before timing; a mismatch aborts the run.
"""
import argparse
import sys
import timeit

import numpy as np

from sesom import kernels
from sesom._accel import HAVE_NUMBA


def cases(rows, rng):
    v, d, T = 512, 32, 6
    logits = rng.normal(size=(rows * T, v)) * 5
    x = rng.normal(size=(rows, d))
    p = kernels.softmax_rows_np(logits)
    gp = rng.normal(size=p.shape)
    gain, bias = rng.normal(size=d), rng.normal(size=d)
    _, xhat, inv = kernels.layer_norm_rows_np(x, gain, bias, 1e-5)
    keys = np.array([2, 3], dtype=np.int64)
    vals = np.array([0, 1], dtype=np.int64)
    seqs = rng.normal(size=(12, d))
    preds = rng.integers(0, 2, size=(rows, T)).astype(np.int64)
    return {
        "softmax_rows": (logits,),
        "softmax_rows_backward": (p, gp),
        "layer_norm_rows": (x, gain, bias, 1e-5),
        "layer_norm_rows_backward": (rng.normal(size=x.shape), xhat, inv, gain),
        "map_logits_rows": (logits, keys, vals),
        "max_pool_rows": (seqs,),
        "vote_counts": (preds, 2),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--rows", type=int, default=2000)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, inputs in cases(args.rows, rng).items():
        f_np = getattr(kernels, f"{name}_np")
        f_nb = getattr(kernels, f"{name}_nb")
        if not _same(f_np(*inputs), f_nb(*inputs)):
            print(f"{name}: numba and numpy outputs differ", file=sys.stderr)
            return 2
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=1, repeat=args.repeat))
        print(f"{name:<26}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
