"""Joint registration, undistortion and height estimation.

Each step backprojects a batch of frames into a shared world raster,
updates that raster with a running average, reads it back at the same
coordinates and penalizes the mismatch. The raster is treated as a fixed
target within a step (its dependence on the parameters is cut), which keeps
memory flat and lets batches stand in for the whole sequence.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.signal import fftconvolve

from . import autodiff as ad
from . import dipnet, fileio
from .autodiff import Tape, Tensor
from .distortion import (PolynomialUndistortion, RadialUndistortion, default_spacing,
                         format_profile)
from .geometry import AutofocusContext, CameraPose, normal_from_tilt, taylor_xy

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class NoValidSamples(PipelineError):
    pass


class NonFiniteGradient(PipelineError):
    pass


class NumericalFailure(PipelineError):
    pass


class CorrelationPeakAmbiguous(PipelineError):
    pass


# -- configuration ---------------------------------------------------------------

@dataclass
class Config:
    M_0: float = None
    pixel_pitch: float = 0.0224
    f_eff: float = 4.3
    iterations: int = 10000
    batch_size: int = 6
    n_r: int = 30
    momentum: float = 0.5
    architecture: tuple = dipnet.DEFAULT_FILTERS
    height_scale: float = 1.0
    height_mode: str = "cnn"
    undistortion: str = "piecewise"
    lambda_h: float = 0.1
    lambda_tv: float = 0.0
    schedule: tuple = (8, 4, 2, 1)
    fractions: tuple = (0.2, 0.2, 0.2, 0.4)
    init: str = "cross-correlation"
    seed: int = 0
    lr_xy: float = 1e-2
    lr_z: float = 1e-2
    lr_tilt: float = 3e-4
    lr_theta: float = 3e-4
    lr_undist: float = 3e-4
    lr_center: float = 1e-2
    lr_cnn: float = 1e-3
    lr_height: float = 1e-3
    lr_decay: float = 0.1
    prefilter: float = 0.5
    fine_factor: int = 2
    margin: float = 0.15
    regrow_fraction: float = 0.01
    downsample: int = 1
    log_every: int = 10

    def validate(self):
        if self.M_0 is None:
            raise ConfigError("magnification required: set M_0 (magnification of the first frame)")
        for name in ("M_0", "pixel_pitch", "f_eff", "height_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0 or self.batch_size < 1 or self.n_r < 2 or self.downsample < 1:
            raise ConfigError("iterations, batch_size, n_r or downsample out of range")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.lambda_h < 0 or self.lambda_tv < 0:
            raise ConfigError("loss weights must be non-negative")
        if len(self.schedule) != len(self.fractions) or not self.schedule:
            raise ConfigError("schedule and fractions must have equal, non-zero length")
        if any(f < 1 for f in self.schedule) or any(f < 0 for f in self.fractions):
            raise ConfigError("bad schedule")
        if self.height_mode not in ("cnn", "direct", "none"):
            raise ConfigError(f"unknown height_mode {self.height_mode!r}")
        if self.init not in ("same-position", "cross-correlation"):
            raise ConfigError(f"unknown init {self.init!r}")
        parse_undistortion(self.undistortion)
        try:
            dipnet.Architecture(self.architecture)
        except dipnet.InvalidArchitecture as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def ctx(self):
        return AutofocusContext(self.f_eff, self.M_0)

    @property
    def base_pitch(self):
        """Object-plane raster pitch matched to the native pixel size."""
        return self.pixel_pitch * self.downsample / self.M_0

    def stage_iterations(self):
        frac = np.asarray(self.fractions, dtype=float)
        frac = frac / frac.sum() if frac.sum() > 0 else frac
        counts = np.floor(frac * self.iterations).astype(int)
        counts[-1] += self.iterations - counts.sum()
        return [int(c) for c in counts]

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(fileio.parse_keyvalue(text))

    @classmethod
    def from_mapping(cls, kv):
        known = {f.name: f for f in fields(cls)}
        out = {}
        for key, raw in kv.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = known[key].default
            try:
                if key in ("architecture", "schedule"):
                    out[key] = tuple(int(v) for v in str(raw).strip("[]() ").split(",") if v.strip())
                elif key == "fractions":
                    out[key] = tuple(float(v) for v in str(raw).strip("[]() ").split(",") if v.strip())
                elif isinstance(default, bool):
                    out[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    out[key] = int(raw)
                elif isinstance(default, str):
                    out[key] = str(raw)
                else:
                    out[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**out)

    def to_text(self):
        kv = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kv[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else v
        return fileio.format_keyvalue(kv)


def parse_undistortion(name):
    """``'piecewise'`` or ``'polyN'`` with even N; returns (kind, order)."""
    if name == "piecewise":
        return "piecewise", 0
    if name.startswith("poly"):
        try:
            order = int(name[4:])
        except ValueError:
            order = -1
        if order >= 2 and order % 2 == 0:
            return "poly", order
    raise ConfigError(f"unknown undistortion model {name!r}")


# -- optimizer -------------------------------------------------------------------

def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)``. ``step`` counts from 1."""
    grad = np.asarray(grad)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains NaN or inf")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** step)
    vhat = v / (1 - beta2 ** step)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(t, float(lr)) for t, lr in groups]
        self.betas = (beta1, beta2)
        self.eps = eps
        self.m = [np.zeros_like(t.data, dtype=np.float64) for t, _ in self.groups]
        self.v = [np.zeros_like(t.data, dtype=np.float64) for t, _ in self.groups]
        self.t = 0

    def step(self, scale=1.0):
        grads = [np.zeros(t.shape) if t.grad is None else t.grad for t, _ in self.groups]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("gradient contains NaN or inf")
        self.t += 1
        for k, ((t, lr), g) in enumerate(zip(self.groups, grads)):
            new, self.m[k], self.v[k] = adam_step(t.data.astype(np.float64), g, self.m[k],
                                                  self.v[k], self.t, lr * scale, *self.betas,
                                                  self.eps)
            t.data[...] = new
        for t, _ in self.groups:
            t.grad = None


# -- parameters ------------------------------------------------------------------

class UndistortionParams:
    """Optimizable radial undistortion (piecewise-linear or even polynomial)."""

    def __init__(self, kind, image_shape, n_r=30, order=4):
        self.kind = kind
        self.image_shape = tuple(image_shape)
        self.center = Tensor(np.zeros(2), True, np.float64)
        if kind == "piecewise":
            self.delta_r = default_spacing(image_shape, n_r)
            self.values = Tensor(np.ones(n_r), True, np.float64)
        else:
            H, W = image_shape
            self.r_norm = 0.5 * np.hypot(H - 1, W - 1)
            self.values = Tensor(np.zeros(order // 2), True, np.float64)
        self.clamped = 0

    @classmethod
    def from_name(cls, name, image_shape, n_r=30):
        kind, order = parse_undistortion(name)
        return cls(kind, image_shape, n_r, order)

    def apply(self, px, py):
        """Undistorted pixel offsets for raw offsets ``px``, ``py`` (arrays)."""
        dx = px - self.center[0]
        dy = py - self.center[1]
        r2 = dx * dx + dy * dy
        if self.kind == "piecewise":
            M, clamped = ad.piecewise_linear(self.values, ad.sqrt(r2 + 1e-12), self.delta_r)
            self.clamped += clamped
        else:
            u = r2 * (1.0 / self.r_norm ** 2)
            M, term = 1.0, 1.0
            for j in range(self.values.size):
                term = term * u
                M = M + self.values[j] * term
        return M * dx + self.center[0], M * dy + self.center[1]

    def normalize(self):
        if self.kind == "piecewise":
            self.values.data /= self.values.data.max()

    def model(self):
        c = self.center.data.copy()
        if self.kind == "piecewise":
            return RadialUndistortion(self.values.data.copy(), self.delta_r, c)
        return PolynomialUndistortion(self.values.data.copy(), self.r_norm, c)

    def is_invertible(self):
        if self.kind == "piecewise":
            return self.model().is_invertible()
        r = np.linspace(0, 1.2 * self.r_norm, 512)
        return bool(np.all(np.diff(r * self.model().magnification_at(r)) > 0))


class DeformationParams:
    """Per-frame poses plus the shared undistortion; frame 0 fixes the gauge."""

    def __init__(self, n_frames, ctx, undist):
        self.ctx = ctx
        self.xy = Tensor(np.zeros((n_frames, 2)), True, np.float64)
        self.z = Tensor(np.full(n_frames, ctx.Z_0), True, np.float64)
        self.tilt = Tensor(np.zeros((n_frames, 2)), True, np.float64)
        self.theta = Tensor(np.zeros(n_frames), True, np.float64)
        self.undist = undist

    @property
    def n_frames(self):
        return self.xy.shape[0]

    def pose_tensors(self):
        return [self.xy, self.z, self.tilt, self.theta]

    def anchor_gauge(self):
        """Zero frame 0's pose gradients so its pose never changes."""
        for t in self.pose_tensors():
            if t.grad is not None:
                t.grad[0] = 0.0

    def poses(self):
        out = []
        for i in range(self.n_frames):
            nx, ny = self.tilt.data[i]
            nz = -np.sqrt(1.0 - nx * nx - ny * ny)
            out.append(CameraPose(float(self.xy.data[i, 0]), float(self.xy.data[i, 1]),
                                  float(self.z.data[i]), (float(nx), float(ny), float(nz)),
                                  float(self.theta.data[i]), self.ctx.f_ph))
        return out

    def set_poses(self, poses):
        for i, p in enumerate(poses):
            self.xy.data[i] = (p.X, p.Y)
            self.z.data[i] = p.Z
            self.tilt.data[i] = p.normal[:2]
            self.theta.data[i] = p.theta

    def to_text(self):
        lines = []
        for i, p in enumerate(self.poses()):
            nx, ny, nz = p.normal
            vals = " ".join(repr(float(v)) for v in (p.X, p.Y, p.Z, nx, ny, nz, p.theta))
            lines.append(f"pose_{i:03d} = {vals}")
        lines.append(f"f_eff = {float(self.ctx.f_eff)!r}")
        lines.append(f"M_0 = {float(self.ctx.M_0)!r}")
        return "\n".join(lines) + "\n"


# -- reconstruction raster ---------------------------------------------------------

@dataclass
class Reconstruction:
    grid: np.ndarray
    pitch: float
    origin: tuple
    visited: np.ndarray = None
    counts: np.ndarray = None
    dropped: int = 0

    def __post_init__(self):
        if self.visited is None:
            self.visited = np.zeros(self.grid.shape[1:], dtype=bool)

    @classmethod
    def empty(cls, bounds, pitch, channels=4, margin=0.0, anchor=(0.0, 0.0)):
        """Raster covering ``bounds`` with a cell centre on ``anchor``."""
        x0, x1, y0, y1 = bounds
        mx, my = margin * (x1 - x0), margin * (y1 - y0)
        x0, x1, y0, y1 = x0 - mx, x1 + mx, y0 - my, y1 + my
        ax, ay = anchor
        ox = ax + np.floor((x0 - ax) / pitch) * pitch
        oy = ay + np.floor((y0 - ay) / pitch) * pitch
        cols = int(np.ceil((x1 - ox) / pitch)) + 1
        rows = int(np.ceil((y1 - oy) / pitch)) + 1
        return cls(np.zeros((channels, rows, cols)), float(pitch), (float(ox), float(oy)))

    def like(self):
        return Reconstruction(np.zeros_like(self.grid), self.pitch, self.origin)

    @property
    def shape(self):
        return self.grid.shape[1:]

    @property
    def n_cells(self):
        return self.shape[0] * self.shape[1]

    def cell_coords(self, x, y):
        return (x - self.origin[0]) * (1.0 / self.pitch), (y - self.origin[1]) * (1.0 / self.pitch)

    def height_map(self):
        h = np.where(self.visited, self.grid[3], np.nan)
        return fileio.HeightMap(h.astype(np.float32), self.pitch, self.origin)

    def rgb(self):
        return np.where(self.visited[None], self.grid[:3], 0.0)


def scatter_average(cx, cy, values, recon):
    """Nearest-cell average of ``values`` (C, N) at cell coords into a fresh raster."""
    cells = ad.nearest_cells(cx, cy, recon.shape)
    means, counts = ad.scatter_mean(np.asarray(values, dtype=np.float64), cells, recon.n_cells)
    out = recon.like()
    C = out.grid.shape[0]
    out.grid = means.reshape(C, *recon.shape)
    out.counts = counts.reshape(recon.shape)
    out.visited = out.counts > 0
    out.dropped = int(np.sum(cells < 0))
    return out


def running_average_update(recon, cx, cy, values, m):
    """Momentum blend of the batch's per-cell means into the visited cells.

    Cells not hit by the batch keep their exact previous values; a cell's
    first visit blends with the zero fill. ``values`` may be a tensor, in
    which case the returned grid is a tensor too (used to test gradient
    blocking); the recon object itself is updated with plain values.
    """
    cells = ad.nearest_cells(cx, cy, recon.shape)
    C = recon.grid.shape[0]
    means, counts = ad.scatter_mean(values, cells, recon.n_cells)
    hit = counts > 0
    flat = recon.grid.reshape(C, -1)
    if isinstance(means, Tensor):
        blended = ad.where(hit[None], m * Tensor(flat, dtype=means.dtype) + (1 - m) * means,
                           Tensor(flat, dtype=means.dtype))
        new = blended.data
    else:
        blended = None
        new = flat.copy()
        new[:, hit] = m * flat[:, hit] + (1 - m) * means[:, hit]
    recon.grid = new.reshape(recon.grid.shape)
    recon.visited = recon.visited | hit.reshape(recon.shape)
    recon.dropped = int(np.sum(cells < 0))
    return recon, (None if blended is None else blended.reshape(C, *recon.shape))


def reproject(grid, cx, cy, visited, block=True):
    """Bilinear read of the raster at the batch coordinates.

    With ``block`` the raster is a constant for differentiation.
    """
    g = grid if isinstance(grid, Tensor) else Tensor(grid, dtype=np.float64)
    if block:
        g = ad.stop_gradient(g)
    return ad.gather_bilinear(g, cx, cy, visited)


@dataclass
class LossWeights:
    lambda_h: float = 0.1
    lambda_tv: float = 0.0

    def __post_init__(self):
        if self.lambda_h < 0 or self.lambda_tv < 0:
            raise ConfigError("loss weights must be non-negative")


def _scalar(v):
    return float(np.asarray(v.data if isinstance(v, Tensor) else v))


def loss(pred, rgb, heights, valid, weights, height_maps=None):
    """Mean over valid samples of RGB squared error plus weighted height error, plus TV.

    ``pred`` is (4, N); ``rgb`` (3, N); ``heights`` (N,) (tensor or array).
    ``height_maps`` (..., H, W) feeds the TV term, normalized per pixel.
    Returns ``(loss, parts)``.
    """
    valid = np.asarray(valid).ravel()
    n = int(valid.sum())
    if n == 0:
        raise NoValidSamples("no sample landed on a visited part of the raster")
    w = valid.astype(np.float64) / n
    d_rgb = pred[:3] - rgb
    rgb_term = (ad.square(d_rgb).sum(axis=0) * w).sum(dtype=np.float64)
    d_h = pred[3] - heights
    h_term = (ad.square(d_h) * w).sum(dtype=np.float64)
    total = rgb_term + weights.lambda_h * h_term
    tv = 0.0
    if weights.lambda_tv > 0 and height_maps is not None:
        npx = height_maps.size
        tv_t = ad.total_variation(height_maps).sum(dtype=np.float64) * (1.0 / npx)
        total = total + weights.lambda_tv * tv_t
        tv = _scalar(tv_t)
    parts = {"rgb_mse": _scalar(rgb_term), "h_mse": _scalar(h_term), "tv": tv, "n_valid": n}
    return total, parts


# -- backprojection ------------------------------------------------------------------

def backproject_frames(params, idx, pixels, pixel_pitch, heights=None, blind_radius=0.0):
    """World coordinates (B, N) of the raw pixel offsets ``pixels`` (N, 2) for frames ``idx``.

    Undistort, scale to mm, rotate, second-order tilted backprojection,
    translate, then orthorectify with ``heights`` (B, N) if given. Points
    within ``blind_radius`` of their frame's vanishing point are not moved.
    """
    idx = np.asarray(idx)
    ux, uy = params.undist.apply(pixels[:, 0], pixels[:, 1])
    qx, qy = ux * pixel_pitch, uy * pixel_pitch
    xy = params.xy[idx]
    X, Y = xy[:, 0:1], xy[:, 1:2]
    Z = params.z[idx].reshape(-1, 1)
    tilt = params.tilt[idx]
    nx, ny = tilt[:, 0:1], tilt[:, 1:2]
    nz = normal_from_tilt(nx, ny)
    th = params.theta[idx].reshape(-1, 1)
    c, s = ad.cos(th), ad.sin(th)
    rx = qx * c - qy * s
    ry = qx * s + qy * c
    ox, oy = taylor_xy(rx, ry, Z, params.ctx.f_ph, nx, ny, nz)
    if heights is not None:
        k = -heights / params.ctx.effective_height(Z)
        if blind_radius > 0:
            blind = np.hypot(ox.data, oy.data) < blind_radius
            k = ad.where(blind, 0.0, k)
        ox = ox + k * ox
        oy = oy + k * oy
    return X + ox, Y + oy


def frame_bounds(params, shape, pixel_pitch, step=8):
    """World bounding box of all frames' (flat) footprints."""
    H, W = shape
    ys = np.r_[np.arange(0, H, step), H - 1] - (H - 1) / 2.0
    xs = np.r_[np.arange(0, W, step), W - 1] - (W - 1) / 2.0
    edge = np.concatenate([np.stack([xs, np.full_like(xs, ys[0])], 1),
                           np.stack([xs, np.full_like(xs, ys[-1])], 1),
                           np.stack([np.full_like(ys, xs[0]), ys], 1),
                           np.stack([np.full_like(ys, xs[-1]), ys], 1)])
    with ad.no_grad():
        x, y = backproject_frames(params, np.arange(params.n_frames), edge, pixel_pitch)
    return float(x.data.min()), float(x.data.max()), float(y.data.min()), float(y.data.max())


# -- initialization ------------------------------------------------------------------

def _gray(img):
    return np.asarray(img, dtype=np.float64).mean(axis=0)


def ncc_surface(a, b, min_overlap=0.25):
    """Normalized cross-correlation of ``b`` against ``a`` for every integer shift.

    Entry ``[dy + H - 1, dx + W - 1]`` scores ``b(p) ~ a(p - (dx, dy))``; shifts
    whose overlap is below ``min_overlap`` of the frame get -inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ones = np.ones_like(a)

    def xc(f, g):
        # sum_p f(p - d) g(p)
        return fftconvolve(g, f[::-1, ::-1], mode="full")

    n = np.round(xc(ones, ones))
    sa, sb = xc(a, ones), xc(ones, b)
    saa, sbb = xc(a * a, ones), xc(ones, b * b)
    sab = xc(a, b)
    nn = np.maximum(n, 1)
    num = sab - sa * sb / nn
    den = np.sqrt(np.maximum((saa - sa * sa / nn) * (sbb - sb * sb / nn), 1e-18))
    out = num / den
    out[n < min_overlap * a.size] = -np.inf
    return out


def _parabolic(m1, c0, p1):
    den = m1 - 2 * c0 + p1
    return 0.0 if den >= 0 or not np.isfinite(den) else 0.5 * (m1 - p1) / den


def estimate_shift(a, b, min_overlap=0.25, ambiguity=0.97, exclusion=3):
    """Sub-pixel shift ``(dx, dy)`` such that ``b(p) ~ a(p - (dx, dy))``."""
    a, b = (_gray(v) if np.ndim(v) == 3 else np.asarray(v, float) for v in (a, b))
    surf = ncc_surface(a, b, min_overlap)
    H, W = a.shape
    k = int(np.argmax(surf))
    iy, ix = divmod(k, surf.shape[1])
    peak = surf[iy, ix]
    if not np.isfinite(peak):
        raise CorrelationPeakAmbiguous("no admissible overlap")
    rest = surf.copy()
    rest[max(iy - exclusion, 0):iy + exclusion + 1, max(ix - exclusion, 0):ix + exclusion + 1] = -np.inf
    second = rest.max()
    if peak <= 0 or (np.isfinite(second) and second > ambiguity * peak):
        raise CorrelationPeakAmbiguous(f"peak {peak:.3f} vs runner-up {second:.3f}")
    fy = fx = 0.0
    if 0 < iy < surf.shape[0] - 1:
        fy = _parabolic(surf[iy - 1, ix], peak, surf[iy + 1, ix])
    if 0 < ix < surf.shape[1] - 1:
        fx = _parabolic(surf[iy, ix - 1], peak, surf[iy, ix + 1])
    fx = fx if np.isfinite(fx) else 0.0
    fy = fy if np.isfinite(fy) else 0.0
    return ix - (W - 1) + fx, iy - (H - 1) + fy


def init_poses(frames, config, mode=None, undist=None):
    """Starting parameters: identical poses, or sequential correlation offsets.

    Correlation runs at the coarsest scale of the schedule. An image shift of
    ``d`` pixels corresponds to a lateral move of ``d * pitch / M_0`` (the
    image is inverted, so content and camera move the same way in world terms).
    """
    mode = mode or config.init
    ctx = config.ctx
    n, _, H, W = frames.shape
    undist = undist or UndistortionParams.from_name(config.undistortion, (H, W), config.n_r)
    params = DeformationParams(n, ctx, undist)
    if mode == "same-position":
        return params
    if mode != "cross-correlation":
        raise ConfigError(f"unknown init mode {mode!r}")
    f = config.schedule[0]
    small = [_gray(fileio.downsample_image(fr, f)) for fr in frames]
    scale = f * config.pixel_pitch / ctx.M_0
    for i in range(1, n):
        try:
            dx, dy = estimate_shift(small[i - 1], small[i])
        except CorrelationPeakAmbiguous as exc:
            log.warning("frame %d: correlation ambiguous (%s); keeping previous position", i, exc)
            dx = dy = 0.0
        params.xy.data[i] = params.xy.data[i - 1] + scale * np.array([dx, dy])
    return params


# -- the optimization -------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    parts: dict
    grads: dict = field(default_factory=dict)


class Optimizer:
    """Holds the full optimization state; :meth:`run` executes the schedule."""

    def __init__(self, frames, config, params=None, network=None, sink=None):
        self.config = config.validate()
        self.frames = np.ascontiguousarray(frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ConfigError(f"frames must be (N, 3, H, W), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ConfigError("need at least one frame")
        self.shape = self.frames.shape[2:]
        self.rng = np.random.default_rng(config.seed)
        self.params = params or init_poses(self.frames, config)
        self.weights = LossWeights(config.lambda_h, config.lambda_tv)
        self.network = None
        self.height_maps = None
        if config.height_mode == "cnn":
            with ad.default_dtype(np.float32):
                self.network = network or dipnet.build(dipnet.Architecture(config.architecture),
                                                       seed=config.seed,
                                                       height_scale=config.height_scale)
        elif config.height_mode == "direct":
            self.height_maps = Tensor(np.zeros((self.n_frames,) + self.shape), True, np.float64)
        self.sink = sink
        self.history = []
        self.iteration = 0
        self.non_invertible = 0
        self.recon = None
        self.factor = None
        self.heights_active = False
        self._build_optimizer()

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def _build_optimizer(self):
        c, p = self.config, self.params
        groups = [(p.xy, c.lr_xy), (p.z, c.lr_z), (p.tilt, c.lr_tilt), (p.theta, c.lr_theta),
                  (p.undist.values, c.lr_undist), (p.undist.center, c.lr_center)]
        self.adam = Adam(groups)
        self.height_adam = None
        if self.network is not None:
            self.height_adam = Adam([(t, c.lr_cnn) for t in self.network.parameters()])
        elif self.height_maps is not None:
            self.height_adam = Adam([(self.height_maps, c.lr_height)])

    # -- per-scale data --------------------------------------------------------------
    def set_scale(self, factor, heights=False):
        self.factor = factor
        self.heights_active = heights and self.config.height_mode != "none"
        self.scaled = np.stack([fileio.downsample_image(f, factor, self.config.prefilter)
                                for f in self.frames])
        h, w = self.scaled.shape[2:]
        H, W = self.shape
        xs = np.arange(w) * factor + (factor - 1) / 2.0 - (W - 1) / 2.0
        ys = np.arange(h) * factor + (factor - 1) / 2.0 - (H - 1) / 2.0
        xx, yy = np.meshgrid(xs, ys)
        self.pixels = np.stack([xx.ravel(), yy.ravel()], axis=1)
        self.pitch = self.config.base_pitch * factor
        self.rebuild()

    def heights_for(self, idx, training=True):
        """Camera-centric heights (B, N) at the current scale, or None when inactive."""
        if not self.heights_active:
            return None
        idx = np.asarray(idx)
        if self.network is not None:
            out = self.network(self.frames[idx], training=training)
            hmap = out.reshape(len(idx), *self.shape)
        else:
            hmap = self.height_maps[idx]
        if self.factor > 1:
            raise PipelineError("heights are only evaluated at full resolution")
        return hmap

    def _coords(self, idx, heights):
        hflat = None if heights is None else heights.reshape(len(idx), -1)
        x, y = backproject_frames(self.params, idx, self.pixels, self.config.pixel_pitch,
                                  hflat, blind_radius=self.pitch / 2)
        return x, y, hflat

    def _anchor(self):
        # cell centres sit on the gauge frame's nominal pixel centres; with pixels landing
        # on cell boundaries, nearest-cell binning of that frame is decided by rounding noise
        x0, y0 = self.params.xy.data[0]
        px, py = self.pixels[0] * self.config.base_pitch
        return float(x0 - px), float(y0 - py)

    def rebuild(self, margin=None):
        """Regrow the raster around the current footprints and refill it from every frame."""
        margin = self.config.margin if margin is None else margin
        bounds = frame_bounds(self.params, self.shape, self.config.pixel_pitch)
        template = Reconstruction.empty(bounds, self.pitch, margin=margin, anchor=self._anchor())
        with ad.no_grad():
            idx = np.arange(self.n_frames)
            heights = self.heights_for(idx)
            x, y, hflat = self._coords(idx, heights)
            cx, cy = template.cell_coords(x.data, y.data)
            values = self._values(idx, hflat)
        self.recon = scatter_average(cx, cy, values, template)
        return self.recon

    def _values(self, idx, hflat):
        rgb = self.scaled[idx].transpose(1, 0, 2, 3).reshape(3, -1).astype(np.float64)
        if hflat is None:
            h = np.zeros((1, rgb.shape[1]))
        else:
            h = np.asarray(hflat.data if isinstance(hflat, Tensor) else hflat,
                           dtype=np.float64).reshape(1, -1)
        return np.concatenate([rgb, h], axis=0)

    # -- one step ----------------------------------------------------------------------
    def draw_batch(self):
        k = min(self.config.batch_size, self.n_frames)
        return np.sort(self.rng.choice(self.n_frames, size=k, replace=False))

    def forward(self, idx, tape_values=False, block=True, perturb=None):
        """Backproject, update the raster, reproject and score one batch.

        Must run under a tape to get gradients. ``tape_values`` routes the
        raster update through differentiable ops; ``block=False`` then lets
        gradients flow through the raster (for testing the blocking).
        ``perturb(grid_tensor, x, y)`` may modify the raster after the update.
        """
        heights = self.heights_for(idx)
        x, y, hflat = self._coords(idx, heights)
        cx, cy = self.recon.cell_coords(x, y)
        values = self._values(idx, hflat)
        if hflat is not None and tape_values:
            rgbT = Tensor(values[:3], dtype=np.float64)
            vals_t = ad.concat([rgbT, hflat.reshape(1, -1) * 1.0], axis=0)
            _, grid_t = running_average_update(self.recon, cx.data, cy.data, vals_t,
                                               self.config.momentum)
        else:
            running_average_update(self.recon, cx.data, cy.data, values, self.config.momentum)
            grid_t = Tensor(self.recon.grid, dtype=np.float64)
        if perturb is not None:
            grid_t = perturb(grid_t, x, y)
        pred, valid = reproject(grid_t, cx.reshape(-1), cy.reshape(-1), self.recon.visited,
                                block=block)
        hvec = 0.0 if hflat is None else hflat.reshape(-1)
        tv_maps = heights if (self.weights.lambda_tv > 0 and heights is not None) else None
        total, parts = loss(pred, values[:3], hvec, valid, self.weights, tv_maps)
        return total, parts

    def leaves(self):
        out = [self.params.xy, self.params.z, self.params.tilt, self.params.theta,
               self.params.undist.values, self.params.undist.center]
        if self.heights_active:
            if self.network is not None:
                out += self.network.parameters()
            elif self.height_maps is not None:
                out.append(self.height_maps)
        return out

    def gradients(self, idx, **kw):
        """Loss and leaf gradients for one batch without updating parameters."""
        leaves = self.leaves()
        for t in leaves:
            t.grad = None
        with Tape() as tape:
            total, parts = self.forward(idx, **kw)
        tape.backward(total, leaves=leaves)
        self.params.anchor_gauge()
        return StepResult(float(total.data), parts, {id(t): t.grad for t in leaves})

    def step(self, progress=0.0):
        """One optimizer step; ``progress`` in [0, 1) sets the in-stage learning-rate decay."""
        scale = 1.0 - (1.0 - self.config.lr_decay) * progress
        idx = self.draw_batch()
        res = self.gradients(idx)
        if self.factor > self.config.fine_factor:
            # tilt, height and lens terms are barely observable on coarse rasters
            p = self.params
            for t in (p.z, p.tilt, p.undist.values, p.undist.center):
                t.grad = None
        if self.recon.dropped > self.config.regrow_fraction * len(idx) * len(self.pixels):
            log.info("iteration %d: %d samples off the raster, regrowing", self.iteration,
                     self.recon.dropped)
            self.rebuild()
        try:
            self.adam.step(scale)
            if self.heights_active and self.height_adam is not None:
                self.height_adam.step(scale)
        except NonFiniteGradient:
            log.error("iteration %d: non-finite gradient, step skipped", self.iteration)
            for t in self.leaves():
                t.grad = None
            res.parts["skipped"] = True
        self.params.undist.normalize()
        if not self.params.undist.is_invertible():
            self.non_invertible += 1
        self.iteration += 1
        return res

    def _record(self, stage, res):
        rec = {"iteration": self.iteration, "stage": stage, "factor": self.factor,
               "loss": res.loss, "rgb_mse": res.parts["rgb_mse"], "h_mse": res.parts["h_mse"],
               "tv": res.parts["tv"]}
        self.history.append(rec)
        if self.sink is not None and (self.iteration % self.config.log_every == 0):
            self.sink.write(json.dumps(rec) + "\n")

    def run(self, callback=None):
        counts = self.config.stage_iterations()
        last = len(counts) - 1
        for stage, (factor, n_iter) in enumerate(zip(self.config.schedule, counts)):
            self.set_scale(factor, heights=(stage == last and factor == 1))
            res = None
            for k in range(n_iter):
                res = self.step(k / n_iter)
                self._record(stage, res)
                if callback is not None:
                    callback(self, res)
            if res is not None and not np.isfinite(res.loss):
                raise NumericalFailure(f"stage {stage} ended with loss {res.loss}: "
                                       f"{self.diagnostics()}")
        return self.finish()

    def diagnostics(self):
        p = self.params
        return {"xy": p.xy.data.tolist(), "z": p.z.data.tolist(), "tilt": p.tilt.data.tolist(),
                "theta": p.theta.data.tolist(), "undist": p.undist.values.data.tolist(),
                "center": p.undist.center.data.tolist(), "clamped": p.undist.clamped}

    def final_heights(self):
        """Full-resolution camera-centric heights for every frame (N, H, W) or None."""
        if self.config.height_mode == "none":
            return None
        with ad.no_grad():
            if self.network is not None:
                out = self.network(self.frames, training=True).data
                return out.reshape(self.n_frames, *self.shape).astype(np.float64)
            return self.height_maps.data.copy()

    def finish(self):
        """Full-resolution reconstruction from one averaging pass over all frames."""
        factor = 1
        self.factor = factor
        self.scaled = self.frames
        H, W = self.shape
        xs = np.arange(W) - (W - 1) / 2.0
        ys = np.arange(H) - (H - 1) / 2.0
        xx, yy = np.meshgrid(xs, ys)
        self.pixels = np.stack([xx.ravel(), yy.ravel()], axis=1)
        self.pitch = self.config.base_pitch
        heights = self.final_heights()
        bounds = frame_bounds(self.params, self.shape, self.config.pixel_pitch)
        template = Reconstruction.empty(bounds, self.pitch, margin=0.02, anchor=self._anchor())
        idx = np.arange(self.n_frames)
        with ad.no_grad():
            hflat = None if heights is None else heights.reshape(self.n_frames, -1)
            x, y = backproject_frames(self.params, idx, self.pixels, self.config.pixel_pitch,
                                      hflat, blind_radius=self.pitch / 2)
        cx, cy = template.cell_coords(x.data, y.data)
        self.recon = scatter_average(cx, cy, self._values(idx, hflat), template)
        return RunResult(self.recon, self.params, self.network, self.history, heights, self)


@dataclass
class RunResult:
    reconstruction: Reconstruction
    params: DeformationParams
    network: object
    history: list
    heights: np.ndarray
    optimizer: Optimizer = None


def run(frames, config, params=None, sink=None, callback=None):
    """Run the staged optimization on ``frames`` (N, 3, H, W) in [0, 1]."""
    if np.shape(frames)[0] < 2:
        log.warning("single frame: registration is degenerate")
    opt = Optimizer(frames, config, params=params, sink=sink)
    return opt.run(callback=callback)


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(directory, result, config):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.txt"), "w") as fh:
        fh.write(config.to_text())
    with open(os.path.join(directory, "params.txt"), "w") as fh:
        fh.write(result.params.to_text())
    with open(os.path.join(directory, "distortion.txt"), "w") as fh:
        fh.write(format_profile(result.params.undist.model()))
    if result.network is not None:
        result.network.save(os.path.join(directory, "network.bin"))
    rec = result.reconstruction
    np.savez(os.path.join(directory, "reconstruction.npz"), grid=rec.grid, visited=rec.visited,
             pitch=rec.pitch, origin=np.asarray(rec.origin))
