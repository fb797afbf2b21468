"""Differentiable primitives.

Elementwise functions accept plain numbers/arrays too, in which case they
return numpy results without touching the tape; this lets the geometry code
run unchanged on floats, arrays and tensors.
"""

import numpy as np

from .. import _kernels
from .tensor import ShapeMismatch, Tensor, as_tensor, get_default_dtype, make_node, unbroadcast

LEAKY_SLOPE = 0.2


def _unary(x, fwd, deriv):
    if not isinstance(x, Tensor):
        return fwd(np.asarray(x, dtype=float) if np.isscalar(x) else x)
    xd = x.data
    out = fwd(xd)
    return make_node(out, (x,), lambda g: (g * deriv(xd, out),))


def sin(x):
    return _unary(x, np.sin, lambda x, y: np.cos(x))


def cos(x):
    return _unary(x, np.cos, lambda x, y: -np.sin(x))


def exp(x):
    return _unary(x, np.exp, lambda x, y: y)


def log(x):
    return _unary(x, np.log, lambda x, y: 1.0 / x)


def sqrt(x):
    return _unary(x, np.sqrt, lambda x, y: 0.5 / y)


def square(x):
    return _unary(x, np.square, lambda x, y: 2.0 * x)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return _unary(x, lambda v: np.where(v > 0, v, slope * v),
                  lambda v, y: np.where(v > 0, 1.0, slope).astype(v.dtype))


def where(cond, a, b):
    """Select elementwise; ``cond`` is a constant boolean mask."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.where(cond, a, b)
    dt = np.result_type(*[t.dtype for t in (a, b) if isinstance(t, Tensor)])
    ad = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=dt)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=dt)
    out = np.where(cond, ad, bd).astype(dt)
    sa, sb = np.shape(ad), np.shape(bd)

    def adjoint(g):
        return (unbroadcast(np.where(cond, g, 0), sa) if isinstance(a, Tensor) else None,
                unbroadcast(np.where(cond, 0, g), sb) if isinstance(b, Tensor) else None)

    return make_node(out, (a, b), adjoint)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(tensors), adjoint)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc

    def adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tuple(tensors), adjoint)


def take(x, indices):
    """Rows ``x[indices]`` along axis 0 (adjoint accumulates repeated indices)."""
    indices = np.asarray(indices, dtype=np.int64)
    xd = x.data

    def adjoint(g):
        out = np.zeros_like(xd)
        np.add.at(out, indices, g)
        return (out,)

    return make_node(xd[indices], (x,), adjoint)


# -- convolution ---------------------------------------------------------------

def _im2col(xp, K, stride, Ho, Wo):
    N, C = xp.shape[:2]
    cols = np.empty((N, C, K, K, Ho, Wo), dtype=xp.dtype)
    for i in range(K):
        for j in range(K):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(N, C * K * K, Ho * Wo)


def _col2im(cols, shape, K, stride, Ho, Wo):
    N, C, Hp, Wp = shape
    cols = cols.reshape(N, C, K, K, Ho, Wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(K):
        for j in range(K):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    return out


def conv2d(x, weight, bias=None, stride=1):
    """'Same'-padded 2D convolution (cross-correlation), NCHW layout.

    ``weight`` has shape (C_out, C_in, K, K) with odd K; zero padding of K//2.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=weight.dtype)
    wd = weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1] or wd.shape[2] % 2 == 0:
        raise ShapeMismatch(f"conv2d input {xd.shape} with kernel {wd.shape}")
    N, C, H, W = xd.shape
    Co, _, K, _ = wd.shape
    p = K // 2
    Ho = (H + 2 * p - K) // stride + 1
    Wo = (W + 2 * p - K) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, K, stride, Ho, Wo)
    wmat = wd.reshape(Co, -1)
    out = np.matmul(wmat, cols).reshape(N, Co, Ho, Wo)
    parents = [x, weight]
    if bias is not None:
        out += bias.data.reshape(1, Co, 1, 1)
        parents.append(bias)

    def adjoint(g):
        gm = g.reshape(N, Co, Ho * Wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gx = None
        if isinstance(x, Tensor) and x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            gxp = _col2im(gcols, xp.shape, K, stride, Ho, Wo)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_node(out, tuple(parents), adjoint)


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.1, eps=1e-5):
    """Per-channel normalization of an NCHW tensor.

    In training mode batch statistics are used and the running buffers (plain
    arrays) are updated in place; otherwise the running statistics are used.
    """
    xd = x.data
    C = xd.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batch_norm over {C} channels with gamma {gamma.shape}")
    axes = (0, 2, 3)
    shape = (1, C, 1, 1)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        n = xd.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def adjoint(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)) * inv.reshape(shape)
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, ggamma, gbeta

    return make_node(out.astype(xd.dtype), (x, gamma, beta), adjoint)


def _up_axis(a, axis):
    n = a.shape[axis]
    idx = np.arange(n)
    prev = np.take(a, np.maximum(idx - 1, 0), axis=axis)
    nxt = np.take(a, np.minimum(idx + 1, n - 1), axis=axis)
    even = 0.25 * prev + 0.75 * a
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_adjoint(g, axis):
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    even = np.take(g, 0, axis=axis + 1)
    odd = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    sl = [slice(None)] * out.ndim

    def at(i):
        s = list(sl)
        s[axis] = i
        return tuple(s)

    # even[i] pulls 0.25 from a[i-1] (clamped); odd[i] pulls 0.25 from a[i+1] (clamped)
    out[at(slice(0, n - 1))] += 0.25 * even[at(slice(1, n))]
    out[at(0)] += 0.25 * even[at(0)]
    out[at(slice(1, n))] += 0.25 * odd[at(slice(0, n - 1))]
    out[at(n - 1)] += 0.25 * odd[at(n - 1)]
    return out


def upsample2x(x):
    """2x bilinear upsampling (half-pixel centres, edge clamped) of an NCHW tensor."""
    xd = x.data
    out = _up_axis(_up_axis(xd, 2), 3)
    return make_node(out, (x,), lambda g: (_up_axis_adjoint(_up_axis_adjoint(g, 3), 2),))


def pad_reflect(x, pad_h, pad_w):
    """Reflect-pad the bottom/right of an NCHW array or tensor."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    H, W = xd.shape[2:]
    out = np.pad(xd, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    if not isinstance(x, Tensor):
        return out
    rows = np.pad(np.arange(H), (0, pad_h), mode="reflect")
    cols = np.pad(np.arange(W), (0, pad_w), mode="reflect")

    def adjoint(g):
        gr = np.zeros(g.shape[:2] + (H, g.shape[3]), dtype=g.dtype)
        np.add.at(gr, (slice(None), slice(None), rows), g)
        gx = np.zeros(g.shape[:2] + (H, W), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
        return (gx,)

    return make_node(out, (x,), adjoint)


# -- sampling ------------------------------------------------------------------

def gather_bilinear(img, x, y, visited=None):
    """Bilinear read of ``img`` (C, H, W) at cell coordinates (``x`` column, ``y`` row).

    Returns ``(values, valid)`` with values shaped ``(C,) + x.shape``. Samples
    outside the grid or touching an unvisited cell read 0 and are invalid.
    Gradients flow to ``img`` and to both coordinate tensors.
    """
    dt = _sampling_dtype(img, x, y)
    imgd = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=dt)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=dt)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=dt)
    if xd.shape != yd.shape or imgd.ndim != 3:
        raise ShapeMismatch(f"gather image {imgd.shape}, coords {xd.shape} / {yd.shape}")
    shape = xd.shape
    C, H, W = imgd.shape
    need = any(isinstance(t, Tensor) and t.requires_grad for t in (x, y))
    vals, gx, gy, valid = _kernels.gather_bilinear(
        imgd.astype(dt, copy=False), xd.astype(dt, copy=False), yd.astype(dt, copy=False),
        visited, with_grad=need)
    out = vals.reshape((C,) + shape)

    def adjoint(g):
        g2 = g.reshape(C, -1)
        gimg = None
        if isinstance(img, Tensor) and img.requires_grad:
            gimg = _kernels.scatter_bilinear(g2.astype(dt), xd, yd, valid, (H, W))
        gxx = (g2 * gx).sum(axis=0).reshape(shape) if need else None
        gyy = (g2 * gy).sum(axis=0).reshape(shape) if need else None
        return gimg, gxx, gyy

    return make_node(out, (img, x, y), adjoint), valid.reshape(shape)


def _sampling_dtype(*xs):
    for t in xs:
        if isinstance(t, Tensor):
            return t.dtype
    for t in xs:
        a = np.asarray(t)
        if a.dtype in (np.float32, np.float64):
            return a.dtype
    return get_default_dtype()


def nearest_cells(x, y, shape):
    """Flat nearest-cell index for float cell coords; -1 where outside the grid."""
    H, W = shape
    xd = np.asarray(x.data if isinstance(x, Tensor) else x)
    yd = np.asarray(y.data if isinstance(y, Tensor) else y)
    ix = np.floor(xd + 0.5)
    iy = np.floor(yd + 0.5)
    ok = (ix >= 0) & (iy >= 0) & (ix < W) & (iy < H) & np.isfinite(ix) & np.isfinite(iy)
    flat = np.where(ok, iy * W + ix, -1)
    return flat.astype(np.int64).ravel()


def scatter_mean(values, cells, n_cells):
    """Average ``values`` (C, N) into ``n_cells`` bins given flat cell indices.

    Returns ``(means (C, n_cells), counts)``; unvisited bins hold 0. The adjoint
    of each contributing value is ``1 / count`` of its bin.
    """
    vd = values.data if isinstance(values, Tensor) else np.asarray(values)
    C = vd.shape[0]
    cells = np.asarray(cells, dtype=np.int64).ravel()
    sums, counts = _kernels.scatter_sum(cells, vd.reshape(C, -1), n_cells)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    means = (sums * inv).astype(vd.dtype)
    if not isinstance(values, Tensor):
        return means, counts
    keep = cells >= 0

    def adjoint(g):
        gv = np.zeros((C, cells.size), dtype=g.dtype)
        gv[:, keep] = g[:, cells[keep]] * inv[cells[keep]]
        return (gv.reshape(vd.shape),)

    return make_node(means, (values,), adjoint), counts


def piecewise_linear(samples, r, delta):
    """Linear interpolation of node values spaced ``delta`` apart, evaluated at ``r``.

    Radii at or beyond the last node return the last node value (zero slope).
    Node indices are constants; gradients flow to ``samples`` and ``r``.
    Returns ``(values, n_clamped)``.
    """
    sd = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=float)
    rd = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=sd.dtype)
    n = sd.shape[0]
    t = rd / delta
    clamped = t >= n - 1
    idx = np.clip(np.floor(t), 0, n - 2).astype(np.int64)
    frac = np.where(clamped, 1.0, t - idx).astype(sd.dtype)
    lo, hi = sd[idx], sd[idx + 1]
    out = ((1 - frac) * lo + frac * hi).astype(np.result_type(sd.dtype, rd.dtype))
    n_clamped = int(clamped.sum())
    if not isinstance(samples, Tensor) and not isinstance(r, Tensor):
        return out, n_clamped

    def adjoint(g):
        gs = None
        if isinstance(samples, Tensor):
            gs = (np.bincount(idx.ravel(), weights=(g * (1 - frac)).ravel(), minlength=n)
                  + np.bincount(idx.ravel() + 1, weights=(g * frac).ravel(), minlength=n))
        gr = None
        if isinstance(r, Tensor):
            gr = np.where(clamped, 0.0, g * (hi - lo) / delta)
        return gs, gr

    return make_node(out, (samples, r), adjoint), n_clamped


def total_variation(h):
    """Isotropic TV of a (..., H, W) map with forward differences (zero past the edge).

    Where the gradient magnitude vanishes the subgradient 0 is used.
    """
    hd = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=float)
    dx = np.zeros_like(hd)
    dy = np.zeros_like(hd)
    dx[..., :, :-1] = hd[..., :, 1:] - hd[..., :, :-1]
    dy[..., :-1, :] = hd[..., 1:, :] - hd[..., :-1, :]
    mag = np.sqrt(dx * dx + dy * dy)
    out = np.asarray(mag.sum(dtype=np.float64), dtype=hd.dtype)
    if not isinstance(h, Tensor):
        return out

    def adjoint(g):
        safe = np.where(mag > 0, mag, 1.0)
        ux = np.where(mag > 0, dx / safe, 0.0) * g
        uy = np.where(mag > 0, dy / safe, 0.0) * g
        gh = np.zeros_like(hd)
        gh[..., :, 1:] += ux[..., :, :-1]
        gh[..., :, :-1] -= ux[..., :, :-1]
        gh[..., 1:, :] += uy[..., :-1, :]
        gh[..., :-1, :] -= uy[..., :-1, :]
        return (gh,)

    return make_node(out, (h,), adjoint)
