"""Camera model and coordinate transforms.

Conventions
-----------
* Lengths are millimetres. Image-plane coordinates are measured from the
  image centre; multiply pixel offsets by the sensor pitch to get mm.
* The object-plane normal seen from the camera has ``n_z < 0``;
  ``(0, 0, -1)`` is a camera parallel to the object plane. The zero-order
  magnification is therefore negative (the image is inverted) and is kept
  that way throughout, including in the synthetic renderer.
* In-plane rotation multiplies the row vector ``(x, y)`` by ``R(theta)``,
  which turns points counterclockwise.
* ``(X, Y)`` is where the optical axis meets the object plane; it is also
  used as the vanishing point for height rectification.

The private ``*_xy`` helpers take coordinates and parameters as separate
arguments and only use arithmetic plus :mod:`mesostitch.autodiff` functions,
so the same code runs on floats, numpy arrays and tensors.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import cos, sin, sqrt

MAX_TILT = 0.3
DEGENERATE_TILT = 1e-12


class GeometryError(ValueError):
    pass


class DegenerateTilt(GeometryError):
    pass


class GrazingRay(GeometryError):
    pass


class DegenerateReference(GeometryError):
    pass


class InvalidPose(GeometryError):
    pass


@dataclass
class CameraPose:
    X: float = 0.0
    Y: float = 0.0
    Z: float = 75.0
    n_im: tuple = (0.0, 0.0, -1.0)
    theta: float = 0.0
    f_ph: float = 4.3

    @classmethod
    def from_tilt(cls, nx=0.0, ny=0.0, **kw):
        """Pose whose normal has the given lateral components and ``n_z < 0``."""
        return cls(n_im=(nx, ny, -float(np.sqrt(1.0 - nx * nx - ny * ny))), **kw)

    @property
    def normal(self):
        return np.asarray(self.n_im, dtype=float)

    def validate(self):
        n = self.normal
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise InvalidPose(f"orientation must be a unit 3-vector, got {n}")
        if abs(n[0]) > MAX_TILT or abs(n[1]) > MAX_TILT:
            raise InvalidPose(f"tilt components exceed {MAX_TILT}: {n[:2]}")
        if not self.Z > 0 or not self.f_ph > 0:
            raise InvalidPose("Z and f_ph must be positive")
        return self


@dataclass
class ReferenceFrame:
    R_ref: tuple = (0.0, 0.0)
    Z_ref: float = float("inf")

    def __post_init__(self):
        if not self.Z_ref > 0:
            raise DegenerateReference("Z_ref must be positive (or infinite)")

    @property
    def is_orthographic(self):
        return np.isinf(self.Z_ref)


@dataclass
class AutofocusContext:
    """Thin-lens bookkeeping for a sequence whose first frame has magnification ``M_0``.

    ``Z_0`` and the pinhole focal length follow from the thin-lens equation
    with ``M_0 = f_ph,0 / Z_0``.
    """

    f_eff: float = 4.3
    M_0: float = 0.06
    Z_0: float = field(default=None)

    def __post_init__(self):
        if not self.M_0 > 0 or not self.f_eff > 0:
            raise ValueError("f_eff and M_0 must be positive")
        expected = self.f_eff * (1.0 + 1.0 / self.M_0)
        if self.Z_0 is None:
            self.Z_0 = expected
        elif abs(self.Z_0 - expected) > 1e-9 * expected:
            raise ValueError(f"Z_0={self.Z_0} inconsistent with thin lens (expected {expected})")

    @classmethod
    def from_height(cls, f_eff, Z_0):
        return cls(f_eff=f_eff, M_0=f_eff / (Z_0 - f_eff))

    @property
    def f_ph(self):
        return self.f_eff * (1.0 + self.M_0)

    def effective_height(self, Z_i):
        """The length multiplying the relative shift in the autofocus height estimate."""
        return self.f_eff * (1.0 + Z_i / (self.M_0 * self.Z_0))


# -- in-plane rotation ---------------------------------------------------------

def rotate_xy(x, y, theta):
    c, s = cos(theta), sin(theta)
    return x * c - y * s, x * s + y * c


def rotate_in_plane(p, theta):
    p = np.asarray(p, dtype=float)
    x, y = rotate_xy(p[..., 0], p[..., 1], theta)
    return np.stack([x, y], axis=-1)


# -- backprojection ------------------------------------------------------------

def taylor_xy(x, y, Z, f_ph, nx, ny, nz, variant="corrected"):
    """Second-order expansion of the tilted backprojection about zero tilt.

    ``variant="literal"`` keeps ``n_x`` in the ``f_ph**2`` term of the y
    expansion, as it is sometimes written; ``"corrected"`` uses ``n_y`` there,
    which is what the exact expression expands to.
    """
    lin = nx * x + ny * y
    scale = Z / (f_ph * nz)
    f2 = f_ph * f_ph
    lin2 = lin * lin
    ny_term = nx if variant == "literal" else ny
    xo = scale * (x + x * lin / f_ph + (f2 * nx * lin + 2 * x * lin2) / (2 * f2))
    yo = scale * (y + y * lin / f_ph + (f2 * ny_term * lin + 2 * y * lin2) / (2 * f2))
    return xo, yo


def exact_xy(x, y, Z, f_ph, nx, ny, nz):
    s2 = nx * nx + ny * ny
    dot = nx * x + ny * y + nz * f_ph
    den = nz * s2 * dot
    xo = Z * (1 + nz) * ((ny * ny + nz - 1) * x - nx * ny * y) / den
    yo = Z * (1 + nz) * ((nx * nx + nz - 1) * y - nx * ny * x) / den
    return xo, yo


def backproject_exact(p_im, pose):
    """Closed-form tilted backprojection (relative to the optical-axis footprint).

    Unstable near zero tilt; production code uses :func:`backproject_taylor`.
    """
    p = np.asarray(p_im, dtype=float)
    nx, ny, nz = pose.normal
    if nx * nx + ny * ny <= DEGENERATE_TILT:
        raise DegenerateTilt("closed form undefined for a parallel camera")
    x, y = p[..., 0], p[..., 1]
    dot = nx * x + ny * y + nz * pose.f_ph
    if np.any(np.abs(dot) < 1e-9 * np.sqrt(x * x + y * y + pose.f_ph ** 2)):
        raise GrazingRay("ray parallel to the object plane")
    return np.stack(exact_xy(x, y, pose.Z, pose.f_ph, nx, ny, nz), axis=-1)


def backproject_taylor(p_im, pose, variant="corrected"):
    p = np.asarray(p_im, dtype=float)
    nx, ny, nz = pose.normal
    return np.stack(taylor_xy(p[..., 0], p[..., 1], pose.Z, pose.f_ph, nx, ny, nz, variant),
                    axis=-1)


def camera_to_world_rotation(n):
    """Rotation taking the camera-frame plane normal ``n`` to ``(0, 0, -1)``.

    This is the rotation by ``arccos(-n_z)`` about ``(-n_y, n_x, 0)``, written
    without the ``1/(n_x^2 + n_y^2)`` factor so it stays finite at zero tilt.
    """
    nx, ny, nz = (float(v) for v in n)
    a = np.array([-ny, nx, 0.0])
    skew = np.array([[0.0, 0.0, nx], [0.0, 0.0, ny], [-nx, -ny, 0.0]])
    return -nz * np.eye(3) + skew + np.outer(a, a) / (1.0 - nz)


def backproject_ray(p_im, pose):
    """Backprojection by explicit 3D construction (valid at any tilt).

    Intersects the ray through ``(x, y, f_ph)`` with ``{r : n . r = Z}``, rotates
    into the world frame and re-references to the optical-axis footprint.
    """
    p = np.asarray(p_im, dtype=float)
    n = pose.normal
    rot = camera_to_world_rotation(n)
    r = np.stack([p[..., 0], p[..., 1], np.full(p.shape[:-1], pose.f_ph)], axis=-1)
    lam = pose.Z / (r @ n)
    world = (lam[..., None] * r) @ rot.T
    axis = (pose.Z / n[2]) * rot[:, 2]
    return world[..., :2] - axis[:2]


def project_ray(r_obj, pose):
    """Inverse of :func:`backproject_ray`: object-plane offset to image-plane coords."""
    r = np.asarray(r_obj, dtype=float)
    n = pose.normal
    rot = camera_to_world_rotation(n)
    axis = (pose.Z / n[2]) * rot[:, 2]
    w = np.stack([r[..., 0] + axis[0], r[..., 1] + axis[1],
                  np.full(r.shape[:-1], axis[2])], axis=-1)
    cam = w @ rot
    return pose.f_ph * cam[..., :2] / cam[..., 2:3]


def backproject_pipeline(p_px, pose, undist=None, pixel_pitch=1.0, variant="corrected"):
    """Raw pixel offsets to object-plane world coordinates (flat scene).

    Undistort, scale to length, rotate in plane, backproject, translate by
    ``(X, Y)``, in that order.
    """
    p = np.asarray(p_px, dtype=float)
    if undist is not None:
        p = undist.undistort(p)
    q = rotate_in_plane(p * pixel_pitch, pose.theta)
    return backproject_taylor(q, pose, variant) + np.array([pose.X, pose.Y])


# -- height rectification ------------------------------------------------------

@dataclass
class Rectification:
    vector: np.ndarray
    blind_spot: np.ndarray


def ortho_rectify_xy(dx, dy, h, Z_i, ctx):
    """Rectification of an object-plane offset ``(dx, dy)`` from the vanishing point.

    Moves the point by ``-h (r - R) / L`` with ``L`` the autofocus effective
    height, which makes the height estimate at the rectified location equal ``h``.
    """
    k = -h / ctx.effective_height(Z_i)
    return k * dx, k * dy


def ortho_rectify(r_obj, h, pose, ctx, grid_pitch=0.0):
    """Orthorectification vectors for object-plane points with heights ``h``.

    Points within half a grid pitch of the vanishing point are blind spots:
    their vector is zero and they are flagged.
    """
    r = np.asarray(r_obj, dtype=float)
    h = np.asarray(h, dtype=float)
    d = r - np.array([pose.X, pose.Y])
    vx, vy = ortho_rectify_xy(d[..., 0], d[..., 1], h, pose.Z, ctx)
    vec = np.stack(np.broadcast_arrays(vx, vy), axis=-1)
    blind = (np.hypot(d[..., 0], d[..., 1]) < grid_pitch / 2) & (h != 0)
    vec = np.where(blind[..., None], 0.0, vec)
    return Rectification(vec, blind)


def height_from_shift(shift_ratio, Z_i, ctx):
    """Height implied by a signed rectification shift ``dr / |r - R|``."""
    return -ctx.effective_height(Z_i) * np.asarray(shift_ratio, dtype=float)


def rectify_to_reference(r_obj, h, pose, ref):
    """Vector warping object-plane points of one camera to a reference perspective."""
    r = np.asarray(r_obj, dtype=float)
    h = np.asarray(h, dtype=float)[..., None]
    R_i = np.array([pose.X, pose.Y])
    if ref.is_orthographic:
        return -(h / pose.Z) * (r - R_i)
    Z_ref = float(ref.Z_ref)
    if np.any(np.abs(Z_ref - h) < 1e-9 * Z_ref):
        raise DegenerateReference("reference projection centre at the surface height")
    R_ref = np.asarray(ref.R_ref, dtype=float)
    return ((h / pose.Z) * (pose.Z - Z_ref) / (Z_ref - h) * (r - R_i)
            + h / (Z_ref - h) * (R_i - R_ref))


def normal_from_tilt(nx, ny):
    """``n_z`` (negative) for lateral normal components; works on tensors."""
    return -sqrt(1.0 - nx * nx - ny * ny)
