"""Benchmark the compiled conv kernels against the numpy/BLAS fallback.

Run:  python benchmarks/bench_kernels.py [--reps 20]

Shapes cover the hot paths: probe down-blocks (stride-2, fat channel
kernels) and toy-denoiser blocks (stride-1, including the skinny
patchified stem where the direct loops beat BLAS's im2col packing).
The crossover motivates the ``auto`` dispatch in ``attnprobe.kernels``.
"""

import argparse
import time

import numpy as np

from attnprobe.kernels import _numpy, _pad

try:
    from attnprobe.kernels import _native
except ImportError:
    _native = None

CASES = [
    # label, B, Ci, H, Co, stride
    ("probe block entry", 32, 32, 16, 32, 2),
    ("probe residual", 32, 32, 8, 32, 1),
    ("probe deep block", 32, 64, 4, 128, 2),
    ("toy stem (skinny K)", 32, 6, 16, 32, 1),
    ("toy residual", 32, 32, 16, 32, 1),
    ("single partial (B=1)", 1, 32, 16, 32, 1),
]


def bench(fn, *args, reps):
    fn(*args)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps * 1e3


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = parser.parse_args()
    if _native is None:
        print("compiled backend not available; nothing to compare")
        return
    dtype = np.dtype(args.dtype)
    rng = np.random.default_rng(0)
    header = (f"{'case':<24}{'op':<8}{'K':>5}{'numpy ms':>10}{'native ms':>11}{'winner':>9}")
    print(header)
    print("-" * len(header))
    for label, b, ci, h, co, stride in CASES:
        x = rng.standard_normal((b, ci, h, h)).astype(dtype)
        w = rng.standard_normal((co, ci, 3, 3)).astype(dtype)
        xp = _pad(x, 1)
        gy = rng.standard_normal(_numpy.conv2d_forward(xp, w, stride).shape).astype(dtype)
        k_dim = ci * 9
        rows = [
            ("fwd", lambda m: m.conv2d_forward(xp, w, stride)),
            ("bw_w", lambda m: m.conv2d_backward_weight(xp, gy, stride, 3, 3)),
            ("bw_x", lambda m: m.conv2d_backward_input(w, gy, stride, xp.shape[2], xp.shape[3])),
        ]
        for op, call in rows:
            t_np = bench(call, _numpy, reps=args.reps)
            t_nat = bench(call, _native, reps=args.reps)
            winner = "native" if t_nat < t_np else "numpy"
            print(f"{label:<24}{op:<8}{k_dim:>5}{t_np:>10.3f}{t_nat:>11.3f}{winner:>9}")


if __name__ == "__main__":
    main()
