"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--samples N] [--repeat R]

Sizes mimic one full-resolution batch: six 189x252 frames read from and
written to a reconstruction raster a few times larger than a frame.
"""

import argparse
import sys
import timeit

import numpy as np

from mesostitch import _kernels
from mesostitch._kernels import _pykernels


def cases(n, grid=(700, 900), channels=4, dtype=np.float64, seed=0):
    rng = np.random.default_rng(seed)
    H, W = grid
    img = rng.random((channels, H, W)).astype(dtype)
    x = rng.uniform(-2, W + 1, n).astype(dtype)
    y = rng.uniform(-2, H + 1, n).astype(dtype)
    visited = (rng.random(grid) > 0.05).astype(np.uint8)
    g = rng.random((channels, n)).astype(dtype)
    valid = _kernels.gather_bilinear(img, x, y, visited, impl=_pykernels)[3]
    idx = np.where(valid, np.floor(y + 0.5) * W + np.floor(x + 0.5), -1).astype(np.int64)
    return {
        "gather_bilinear": lambda impl: _kernels.gather_bilinear(img, x, y, visited, impl=impl),
        "scatter_bilinear": lambda impl: _kernels.scatter_bilinear(g, x, y, valid, grid, impl=impl),
        "scatter_sum": lambda impl: _kernels.scatter_sum(idx, g, H * W, impl=impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=6 * 189 * 252)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--float32", action="store_true")
    args = ap.parse_args(argv)
    if _kernels.BACKEND != "cython":
        print("compiled kernels are not built; run `pip install -e .` first", file=sys.stderr)
        return 1
    from mesostitch._kernels import _ckernels

    dtype = np.float32 if args.float32 else np.float64
    print(f"{args.samples} samples, {np.dtype(dtype).name}, best of {args.repeat}")
    print(f"{'kernel':<18}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, fn in cases(args.samples, dtype=dtype).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:<18}{py * 1e3:10.2f}{cy * 1e3:11.2f}{py / cy:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
