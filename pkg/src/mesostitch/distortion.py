"""Radial undistortion models.

The optimized direction is *undistortion*: raw pixel offsets (from the image
centre) are mapped to ideal pinhole offsets by scaling about the principal
point with a radially varying relative magnification.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import piecewise_linear

DEFAULT_NODES = 30


class DistortionError(ValueError):
    pass


class NotInvertible(DistortionError):
    pass


class OutOfRange(DistortionError):
    pass


def default_spacing(image_shape, n_nodes=DEFAULT_NODES, margin=0.10):
    """Node spacing so the nodes cover the half-diagonal plus ``margin``."""
    H, W = image_shape
    half_diag = 0.5 * np.hypot(H - 1, W - 1)
    return (1.0 + margin) * half_diag / (n_nodes - 1)


@dataclass
class RadialUndistortion:
    """Piecewise-linear relative magnification sampled every ``delta_r`` pixels."""

    samples: np.ndarray
    delta_r: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    clamp_count: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        if self.samples.ndim != 1 or self.samples.size < 2:
            raise DistortionError("need at least two magnification samples")
        if not self.delta_r > 0:
            raise DistortionError("delta_r must be positive")

    @classmethod
    def identity(cls, image_shape=None, n_nodes=DEFAULT_NODES, delta_r=None):
        if delta_r is None:
            delta_r = default_spacing(image_shape, n_nodes)
        return cls(np.ones(n_nodes), delta_r)

    @property
    def n_nodes(self):
        return self.samples.size

    @property
    def max_radius(self):
        return (self.n_nodes - 1) * self.delta_r

    def magnification_at(self, r, strict=False):
        """Interpolated magnification; radii past the last node clamp (and are counted)."""
        r = np.asarray(r, dtype=float)
        out, clamped = piecewise_linear(self.samples, r, self.delta_r)
        if clamped and strict:
            raise OutOfRange(f"{clamped} radii at or beyond {self.max_radius}")
        self.clamp_count += clamped
        return out

    def undistort(self, p):
        p = np.asarray(p, dtype=float)
        d = p - self.center
        r = np.hypot(d[..., 0], d[..., 1])
        return self.magnification_at(r)[..., None] * d + self.center

    def _radial_map(self):
        """Node radii and ``r * M(r)`` at the nodes."""
        rn = np.arange(self.n_nodes) * self.delta_r
        return rn, rn * self.samples

    def is_invertible(self):
        m = self.samples
        if np.any(m <= 0):
            return False
        t = np.arange(self.n_nodes - 1)
        dm = np.diff(m)
        # r*M(r) is quadratic per segment; its slope is linear, so checking both ends suffices
        return bool(np.all(m[:-1] + t * dm > 0) and np.all(m[1:] + (t + 1) * dm > 0))

    def distort(self, p):
        """Exact inverse of :meth:`undistort` (per-segment closed form, no iteration)."""
        if not self.is_invertible():
            raise NotInvertible("r * M(r) is not strictly increasing")
        p = np.asarray(p, dtype=float)
        d = p - self.center
        rho = np.hypot(d[..., 0], d[..., 1])
        _, g = self._radial_map()
        m, dr = self.samples, self.delta_r
        seg = np.clip(np.searchsorted(g, rho, side="right") - 1, 0, self.n_nodes - 2)
        slope = (m[seg + 1] - m[seg]) / dr
        a = m[seg] - seg * dr * slope
        # b r^2 + a r - rho = 0, stable root
        r = 2.0 * rho / (a + np.sqrt(np.maximum(a * a + 4.0 * slope * rho, 0.0)))
        beyond = rho >= g[-1]
        r = np.where(beyond, rho / m[-1], r)
        scale = np.where(rho > 0, r / np.where(rho > 0, rho, 1.0), 1.0 / m[0])
        return scale[..., None] * d + self.center

    def normalize(self):
        """Rescale so the largest sample is exactly 1; returns the divisor."""
        peak = float(self.samples.max())
        self.samples = self.samples / peak
        return peak

    def profile(self, n=None):
        r = np.arange(self.n_nodes) * self.delta_r if n is None else np.linspace(
            0, self.max_radius, n)
        return r, np.interp(r, np.arange(self.n_nodes) * self.delta_r, self.samples)


@dataclass
class PolynomialUndistortion:
    """Even polynomial ``1 + sum_j a_j (r / r_norm)^(2j)``; order is ``2 * len(coeffs)``."""

    coeffs: np.ndarray
    r_norm: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self.center = np.asarray(self.center, dtype=float).reshape(2)

    @classmethod
    def identity(cls, order, image_shape):
        if order % 2 or order < 2:
            raise DistortionError("polynomial order must be a positive even number")
        H, W = image_shape
        return cls(np.zeros(order // 2), 0.5 * np.hypot(H - 1, W - 1))

    @property
    def order(self):
        return 2 * self.coeffs.size

    def magnification_at(self, r):
        u = (np.asarray(r, dtype=float) / self.r_norm) ** 2
        out = np.ones_like(u)
        term = np.ones_like(u)
        for a in self.coeffs:
            term = term * u
            out = out + a * term
        return out

    def undistort(self, p):
        p = np.asarray(p, dtype=float)
        d = p - self.center
        r = np.hypot(d[..., 0], d[..., 1])
        return self.magnification_at(r)[..., None] * d + self.center

    def distort(self, p, iters=60):
        """Inverse by bisection on ``r * M(r)`` (assumed increasing on the bracket)."""
        p = np.asarray(p, dtype=float)
        d = p - self.center
        rho = np.hypot(d[..., 0], d[..., 1])
        lo = np.zeros_like(rho)
        hi = np.maximum(4.0 * rho, 1e-12)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = mid * self.magnification_at(mid) < rho
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        r = 0.5 * (lo + hi)
        scale = np.where(rho > 0, r / np.where(rho > 0, rho, 1.0), 1.0)
        return scale[..., None] * d + self.center

    def profile(self, n=64):
        r = np.linspace(0, self.r_norm * 1.1, n)
        return r, self.magnification_at(r)


def fit_report(model, n=None):
    """Radial profile table ``(r, M(r))`` and the principal point of a model."""
    r, m = model.profile(n) if n is not None else model.profile()
    return {"r": r, "magnification": m, "center": np.asarray(model.center, dtype=float)}


def format_profile(model):
    """Plain-text serialization: header lines then one ``r M`` pair per line."""
    buf = io.StringIO()
    if isinstance(model, RadialUndistortion):
        buf.write("# model piecewise\n")
        buf.write(f"# delta_r {float(model.delta_r)!r}\n")
    else:
        buf.write(f"# model polynomial {model.order}\n")
        buf.write(f"# r_norm {float(model.r_norm)!r}\n")
        buf.write("# coeffs " + " ".join(repr(float(a)) for a in model.coeffs) + "\n")
    cx, cy = (float(v) for v in model.center)
    buf.write(f"# center {cx!r} {cy!r}\n")
    r, m = model.profile()
    for ri, mi in zip(r, m):
        buf.write(f"{float(ri)!r} {float(mi)!r}\n")
    return buf.getvalue()


def parse_profile(text):
    header = {}
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            header[parts[0]] = parts[1:]
        else:
            rows.append([float(v) for v in line.split()])
    if "model" not in header or "center" not in header:
        raise DistortionError("profile is missing its model/center header")
    center = np.array([float(v) for v in header["center"]])
    if header["model"][0] == "piecewise":
        table = np.array(rows)
        return RadialUndistortion(table[:, 1], float(header["delta_r"][0]), center)
    return PolynomialUndistortion([float(v) for v in header.get("coeffs", [])],
                                  float(header["r_norm"][0]), center)
