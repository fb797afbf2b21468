# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled per-sample kernels: bilinear gather, its adjoint, and binned scatter."""

import numpy as np

from libc.math cimport floor

ctypedef fused real:
    float
    double


def gather_bilinear(real[:, :, ::1] img, real[::1] x, real[::1] y,
                    const unsigned char[:, ::1] visited, bint with_grad=True):
    cdef Py_ssize_t C = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef Py_ssize_t N = x.shape[0]
    dt = np.float32 if real is float else np.float64
    out_np = np.zeros((C, N), dtype=dt)
    cdef Py_ssize_t GC = C if with_grad else 0
    cdef Py_ssize_t GN = N if with_grad else 0
    gx_np = np.zeros((GC, GN), dtype=dt)
    gy_np = np.zeros((GC, GN), dtype=dt)
    valid_np = np.zeros(N, dtype=np.uint8)
    cdef real[:, ::1] out = out_np
    cdef real[:, ::1] gx = gx_np
    cdef real[:, ::1] gy = gy_np
    cdef unsigned char[::1] valid = valid_np
    cdef Py_ssize_t n, c, x0, y0
    cdef double xf, yf, fx, fy, v00, v01, v10, v11
    for n in range(N):
        xf = x[n]
        yf = y[n]
        if not (xf >= 0.0 and yf >= 0.0 and xf <= W - 1 and yf <= H - 1):
            continue
        x0 = <Py_ssize_t>floor(xf)
        y0 = <Py_ssize_t>floor(yf)
        if x0 > W - 2:
            x0 = W - 2
        if y0 > H - 2:
            y0 = H - 2
        if x0 < 0 or y0 < 0:
            continue
        if not (visited[y0, x0] and visited[y0, x0 + 1]
                and visited[y0 + 1, x0] and visited[y0 + 1, x0 + 1]):
            continue
        valid[n] = 1
        fx = xf - x0
        fy = yf - y0
        for c in range(C):
            v00 = img[c, y0, x0]
            v01 = img[c, y0, x0 + 1]
            v10 = img[c, y0 + 1, x0]
            v11 = img[c, y0 + 1, x0 + 1]
            out[c, n] = <real>((1 - fy) * ((1 - fx) * v00 + fx * v01)
                               + fy * ((1 - fx) * v10 + fx * v11))
            if with_grad:
                gx[c, n] = <real>((1 - fy) * (v01 - v00) + fy * (v11 - v10))
                gy[c, n] = <real>((1 - fx) * (v10 - v00) + fx * (v11 - v01))
    return out_np, gx_np, gy_np, valid_np.astype(bool)


def scatter_bilinear(real[:, ::1] g, real[::1] x, real[::1] y,
                     const unsigned char[::1] valid, Py_ssize_t H, Py_ssize_t W):
    """Adjoint of ``gather_bilinear`` with respect to the image."""
    cdef Py_ssize_t C = g.shape[0], N = g.shape[1]
    acc_np = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] acc = acc_np
    cdef Py_ssize_t n, c, x0, y0
    cdef double fx, fy, gv
    for n in range(N):
        if not valid[n]:
            continue
        x0 = <Py_ssize_t>floor(x[n])
        y0 = <Py_ssize_t>floor(y[n])
        if x0 > W - 2:
            x0 = W - 2
        if y0 > H - 2:
            y0 = H - 2
        fx = x[n] - x0
        fy = y[n] - y0
        for c in range(C):
            gv = g[c, n]
            acc[c, y0, x0] += gv * (1 - fy) * (1 - fx)
            acc[c, y0, x0 + 1] += gv * (1 - fy) * fx
            acc[c, y0 + 1, x0] += gv * fy * (1 - fx)
            acc[c, y0 + 1, x0 + 1] += gv * fy * fx
    return acc_np


def scatter_sum(const long[::1] idx, real[:, ::1] vals, Py_ssize_t n_cells):
    """Per-cell sums (float64) and visit counts; ``idx < 0`` marks dropped samples."""
    cdef Py_ssize_t C = vals.shape[0], N = vals.shape[1]
    sums_np = np.zeros((C, n_cells), dtype=np.float64)
    counts_np = np.zeros(n_cells, dtype=np.int64)
    cdef double[:, ::1] sums = sums_np
    cdef long long[::1] counts = counts_np
    cdef Py_ssize_t n, c
    cdef long k
    for n in range(N):
        k = idx[n]
        if k < 0:
            continue
        counts[k] += 1
        for c in range(C):
            sums[c, k] += vals[c, n]
    return sums_np, counts_np
