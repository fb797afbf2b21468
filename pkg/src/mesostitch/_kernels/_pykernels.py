"""Pure-numpy versions of the compiled kernels (same signatures and results)."""

import numpy as np


def _corners(x, y, H, W):
    inside = (x >= 0) & (y >= 0) & (x <= W - 1) & (y <= H - 1)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(ys).astype(np.int64), H - 2)
    inside &= (x0 >= 0) & (y0 >= 0)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    return inside, x0, y0, xs - x0, ys - y0


def gather_bilinear(img, x, y, visited, with_grad=True):
    C, H, W = img.shape
    inside, x0, y0, fx, fy = _corners(x, y, H, W)
    vis = visited.astype(bool)
    valid = inside & vis[y0, x0] & vis[y0, x0 + 1] & vis[y0 + 1, x0] & vis[y0 + 1, x0 + 1]
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x0 + 1]
    v10 = img[:, y0 + 1, x0]
    v11 = img[:, y0 + 1, x0 + 1]
    out = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    out = np.where(valid, out, 0).astype(img.dtype)
    if not with_grad:
        empty = np.zeros((0, 0), dtype=img.dtype)
        return out, empty, empty, valid
    gx = np.where(valid, (1 - fy) * (v01 - v00) + fy * (v11 - v10), 0).astype(img.dtype)
    gy = np.where(valid, (1 - fx) * (v10 - v00) + fx * (v11 - v01), 0).astype(img.dtype)
    return out, gx, gy, valid


def scatter_bilinear(g, x, y, valid, H, W):
    C = g.shape[0]
    valid = valid.astype(bool)
    _, x0, y0, fx, fy = _corners(x, y, H, W)
    x0, y0, fx, fy = x0[valid], y0[valid], fx[valid], fy[valid]
    gv = g[:, valid].astype(np.float64)
    acc = np.zeros((C, H * W), dtype=np.float64)
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        flat = (y0 + dy) * W + (x0 + dx)
        for c in range(C):
            acc[c] += np.bincount(flat, weights=gv[c] * w, minlength=H * W)
    return acc.reshape(C, H, W)


def scatter_sum(idx, vals, n_cells):
    keep = idx >= 0
    k = idx[keep]
    counts = np.bincount(k, minlength=n_cells).astype(np.int64)
    sums = np.zeros((vals.shape[0], n_cells), dtype=np.float64)
    for c in range(vals.shape[0]):
        sums[c] = np.bincount(k, weights=vals[c, keep].astype(np.float64), minlength=n_cells)
    return sums, counts
