"""Per-sample kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built and importable; setting
``MESOSTITCH_PURE_PYTHON=1`` forces the numpy fallback.

All kernels take contiguous float32 or float64 arrays; both backends return
identical results up to floating-point summation order.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MESOSTITCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def gather_bilinear(img, x, y, visited=None, with_grad=True, impl=None):
    """Bilinear read of ``img`` (C, H, W) at float cell coords ``x`` (column), ``y`` (row).

    Returns ``(values, d_values/dx, d_values/dy, valid)``; a sample is valid when it
    lies in the grid and all four neighbouring cells are marked in ``visited``.
    """
    impl = impl or _impl
    dt = img.dtype if img.dtype in (np.float32, np.float64) else np.float64
    if visited is None:
        visited = np.ones(img.shape[1:], dtype=np.uint8)
    return impl.gather_bilinear(_c(img, dt), _c(x, dt).ravel(), _c(y, dt).ravel(),
                                _c(visited, np.uint8), bool(with_grad))


def scatter_bilinear(g, x, y, valid, shape, impl=None):
    impl = impl or _impl
    dt = g.dtype if g.dtype in (np.float32, np.float64) else np.float64
    H, W = shape
    return impl.scatter_bilinear(_c(g, dt), _c(x, dt).ravel(), _c(y, dt).ravel(),
                                 _c(valid, np.uint8), int(H), int(W))


def scatter_sum(idx, vals, n_cells, impl=None):
    """Sum ``vals`` (C, N) into ``n_cells`` bins; returns float64 sums and int64 counts."""
    impl = impl or _impl
    dt = vals.dtype if vals.dtype in (np.float32, np.float64) else np.float64
    return impl.scatter_sum(_c(idx, np.int_), _c(vals, dt), int(n_cells))


__all__ = ["BACKEND", "gather_bilinear", "scatter_bilinear", "scatter_sum"]
