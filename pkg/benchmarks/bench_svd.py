"""Benchmark the compiled Jacobi sweep kernel against the numpy fallback.

Runs the full SVD through both backends over the shapes the adaptation
engine actually sees (prediction matrices, feature batches) plus the largest
shapes the test suite exercises, checks that the two backends agree, and
prints a timing table.

Usage: python benchmarks/bench_svd.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from svp_tta._kernels import fallback
from svp_tta.linalg import _svd_with_kernel

try:
    from svp_tta._kernels import _core
except ImportError:
    _core = None

SHAPES = [
    (64, 8),    # prediction matrix, default batch x classes
    (200, 10),  # large batch, 10-class prediction matrix
    (64, 32),   # feature batch
    (200, 64),  # largest suite shape
]


def time_kernel(kernel, matrices, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for m in matrices:
            _svd_with_kernel(m, kernel)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--per-shape", type=int, default=20,
                        help="matrices per shape")
    args = parser.parse_args()

    if _core is None:
        print("compiled kernel not available; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'shape':>10} {'ext':>12} {'python':>12} {'speedup':>9}   agreement")
    for shape in SHAPES:
        matrices = [rng.standard_normal(shape) for _ in range(args.per_shape)]
        t_ext = time_kernel(_core.jacobi_sweeps, matrices, args.repeats)
        t_py = time_kernel(fallback.jacobi_sweeps, matrices, args.repeats)

        worst = 0.0
        for m in matrices:
            a = _svd_with_kernel(m, _core.jacobi_sweeps)
            b = _svd_with_kernel(m, fallback.jacobi_sweeps)
            worst = max(worst, float(np.abs(a.sigma - b.sigma).max()))
        per_ext = t_ext / args.per_shape * 1e3
        per_py = t_py / args.per_shape * 1e3
        print(f"{str(shape):>10} {per_ext:>9.3f} ms {per_py:>9.3f} ms "
              f"{t_py / t_ext:>8.1f}x   max |dsigma| {worst:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
