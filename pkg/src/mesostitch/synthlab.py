"""Synthetic scenes, a forward renderer for them and height-map scoring.

The renderer is the ground truth the reconstruction is tested against. It
uses the exact tilted-plane geometry (not the second-order expansion) and
displaces each scene point by the linear parallax model with the camera's
lateral position as vanishing point.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import fileio
from .distortion import RadialUndistortion, format_profile, parse_profile
from .geometry import (AutofocusContext, CameraPose, backproject_ray, project_ray,
                       rotate_in_plane)

CARD_HEIGHTS_UM = (295, 350, 420, 485, 555, 625)


class SynthError(ValueError):
    pass


class OverlapError(SynthError):
    pass


class FootprintExceedsScene(SynthError):
    pass


class EmptyRegion(SynthError):
    pass


@dataclass
class Camera:
    shape: tuple = (189, 252)
    pixel_pitch: float = 0.0224
    blur: float = 0.7  # optical point spread, sigma in pixels

    def pixel_offsets(self, factor=1):
        """Pixel centres relative to the image centre, in full-resolution pixels.

        With ``factor > 1`` these are the centres of ``factor``-sized blocks.
        """
        H, W = self.shape
        h, w = H // factor, W // factor
        x = np.arange(w) * factor + (factor - 1) / 2.0 - (W - 1) / 2.0
        y = np.arange(h) * factor + (factor - 1) / 2.0 - (H - 1) / 2.0
        xx, yy = np.meshgrid(x, y)
        return np.stack([xx, yy], axis=-1)


@dataclass
class Scene:
    texture: np.ndarray
    height: np.ndarray
    pitch: float
    origin: tuple = (0.0, 0.0)
    labels: np.ndarray = None
    region_heights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.texture.shape[1:] != self.height.shape:
            raise SynthError("texture and heightfield must be congruent")
        if self.labels is None:
            self.labels = np.zeros(self.height.shape, dtype=np.int32)

    @property
    def shape(self):
        return self.height.shape

    def extent(self):
        rows, cols = self.shape
        x0, y0 = self.origin
        return x0, x0 + (cols - 1) * self.pitch, y0, y0 + (rows - 1) * self.pitch

    def _cells(self, xy):
        xy = np.asarray(xy, dtype=float)
        return ((xy[..., 1] - self.origin[1]) / self.pitch,
                (xy[..., 0] - self.origin[0]) / self.pitch)

    def contains(self, xy):
        r, c = self._cells(xy)
        rows, cols = self.shape
        return (r >= 0) & (c >= 0) & (r <= rows - 1) & (c <= cols - 1)

    def height_at(self, xy):
        r, c = self._cells(xy)
        return ndimage.map_coordinates(self.height, [r, c], order=0, mode="nearest")

    def label_at(self, xy):
        r, c = self._cells(xy)
        return ndimage.map_coordinates(self.labels, [r, c], order=0, mode="nearest")

    def color_at(self, xy):
        r, c = self._cells(xy)
        return np.stack([ndimage.map_coordinates(ch, [r, c], order=1, mode="nearest")
                         for ch in self.texture])


@dataclass
class Plateau:
    x: float
    y: float
    width: float
    length: float
    height_um: float

    def bounds(self):
        return (self.x - self.width / 2, self.x + self.width / 2,
                self.y - self.length / 2, self.y + self.length / 2)


@dataclass
class PhantomSpec:
    plateaus: list = field(default_factory=list)
    extent: tuple = (-76.0, 76.0, -56.0, 56.0)
    pitch: float = 0.18
    seed: int = 0
    feature_sizes: tuple = (1.0, 2.0, 5.0)

    def validate(self):
        x0, x1, y0, y1 = self.extent
        boxes = [p.bounds() for p in self.plateaus]
        for p, b in zip(self.plateaus, boxes):
            if p.width <= 0 or p.length <= 0:
                raise SynthError(f"plateau with non-positive size: {p}")
            if b[0] < x0 or b[1] > x1 or b[2] < y0 or b[3] > y1:
                raise SynthError(f"plateau outside the scene: {p}")
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                if a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]:
                    raise OverlapError(f"plateaus {i} and {j} overlap")
        return self


def card_spec(seed=0, heights_um=CARD_HEIGHTS_UM):
    """Six square cards (10-14 mm) in two rows around the scene centre."""
    rng = np.random.default_rng(seed)
    centers = [(-22.0, -10.0), (0.0, -10.0), (22.0, -10.0),
               (-22.0, 10.0), (0.0, 10.0), (22.0, 10.0)]
    plateaus = []
    for (x, y), h in zip(centers, heights_um):
        side = float(rng.uniform(10.0, 14.0))
        plateaus.append(Plateau(x + rng.uniform(-1, 1), y + rng.uniform(-1, 1), side, side, h))
    return PhantomSpec(plateaus, seed=seed)


def _noise_texture(shape, rng, sizes_cells):
    out = np.zeros(shape)
    for k, s in enumerate(sizes_cells):
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        layer -= layer.mean()
        out += layer / (layer.std() + 1e-12) / (k + 1)
    return out / out.std()


def make_phantom(spec):
    """Textured flat background with raised rectangular plateaus and their label map."""
    spec.validate()
    x0, x1, y0, y1 = spec.extent
    cols = int(np.floor((x1 - x0) / spec.pitch)) + 1
    rows = int(np.floor((y1 - y0) / spec.pitch)) + 1
    rng = np.random.default_rng(spec.seed)
    sizes = [s / spec.pitch for s in spec.feature_sizes]
    base = np.stack([_noise_texture((rows, cols), rng, sizes) for _ in range(3)])
    texture = 0.5 + 0.14 * base
    height = np.zeros((rows, cols))
    labels = np.zeros((rows, cols), dtype=np.int32)
    xs = x0 + spec.pitch * np.arange(cols)
    ys = y0 + spec.pitch * np.arange(rows)
    region_heights = {0: 0.0}
    for k, p in enumerate(spec.plateaus, 1):
        bx0, bx1, by0, by1 = p.bounds()
        mask = ((ys[:, None] >= by0) & (ys[:, None] < by1)
                & (xs[None, :] >= bx0) & (xs[None, :] < bx1))
        tint = rng.uniform(-0.12, 0.12, size=3)
        rr, cc = np.nonzero(mask)
        if rr.size:
            box = (slice(rr.min(), rr.max() + 1), slice(cc.min(), cc.max() + 1))
            sub = mask[box]
            for c in range(3):
                card = _noise_texture(sub.shape, rng, sizes)
                texture[c][box][sub] = 0.5 + tint[c] + 0.14 * card[sub]
        height[mask] = p.height_um * 1e-3
        labels[mask] = k
        region_heights[k] = p.height_um * 1e-3
    texture = np.clip(texture, 0.02, 0.98)
    return Scene(texture, height, spec.pitch, (x0, y0), labels, region_heights)


# -- rendering ----------------------------------------------------------------------

def pixel_to_flat(p_px, pose, undist, camera):
    """Raw pixel offsets to flat object-plane points with exact geometry."""
    u = undist.undistort(p_px) if undist is not None else np.asarray(p_px, dtype=float)
    q = rotate_in_plane(u * camera.pixel_pitch, pose.theta)
    return backproject_ray(q, pose) + np.array([pose.X, pose.Y])


def parallax_source(r_flat, pose, scene, iters=8):
    """Scene point seen at flat-plane position ``r_flat`` (fixed-point solve of the parallax model)."""
    R = np.array([pose.X, pose.Y])
    s = r_flat
    for _ in range(iters):
        h = scene.height_at(s)
        s = r_flat - (h / pose.Z)[..., None] * (r_flat - R)
    return s


def render_frame(scene, pose, undist=None, camera=None, parallax=True, noise=0.0, rng=None):
    """RGB frame (3, H, W) of ``scene`` as seen by ``pose`` through ``undist``'s inverse."""
    camera = camera or Camera()
    r_flat = pixel_to_flat(camera.pixel_offsets(), pose, undist, camera)
    s = parallax_source(r_flat, pose, scene) if parallax else r_flat
    if not np.all(scene.contains(s)):
        raise FootprintExceedsScene(f"camera at ({pose.X:.2f}, {pose.Y:.2f}) sees past the scene")
    img = scene.color_at(s)
    if camera.blur > 0:
        img = ndimage.gaussian_filter(img, (0, camera.blur, camera.blur), mode="nearest")
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def project_points(xy, h, pose, undist=None, camera=None):
    """Raw pixel offsets at which scene points ``xy`` of height ``h`` are imaged."""
    camera = camera or Camera()
    xy = np.asarray(xy, dtype=float)
    R = np.array([pose.X, pose.Y])
    h = np.asarray(h, dtype=float)[..., None]
    r_flat = R + (xy - R) / (1.0 - h / pose.Z)
    q = project_ray(r_flat - R, pose)
    u = rotate_in_plane(q, -pose.theta) / camera.pixel_pitch
    return undist.distort(u) if undist is not None else u


# -- generating profiles -----------------------------------------------------------

def barrel_profile(image_shape, strength=0.04, center=(0.0, 0.0), n_nodes=241, n_r=30):
    """Smooth barrel undistortion, densely sampled and scaled so the outermost node is 1.

    The outer radius matches the reconstruction's node span, so the true profile
    already satisfies max-normalization there.
    """
    H, W = image_shape
    r_max = 1.1 * 0.5 * np.hypot(H - 1, W - 1)
    r = np.linspace(0.0, r_max, n_nodes)
    m = 1.0 + strength * (r / r_max) ** 2
    return RadialUndistortion(m / m[-1], r_max / (n_nodes - 1), np.asarray(center, float))


def kinked_profile(image_shape, knee=0.45, drop=0.035, center=(0.0, 0.0), n_nodes=241):
    """Flat out to ``knee`` of the node span, then a linear fall of ``drop``."""
    H, W = image_shape
    r_max = 1.1 * 0.5 * np.hypot(H - 1, W - 1)
    r = np.linspace(0.0, r_max, n_nodes)
    t = np.clip((r / r_max - knee) / (1.0 - knee), 0.0, None)
    return RadialUndistortion(1.0 - drop * t, r_max / (n_nodes - 1), np.asarray(center, float))


# -- sequences ----------------------------------------------------------------------

SCAN_POSITIONS = ((0.0, 0.0), (9.0, 1.0), (18.0, 0.0), (18.0, 10.0), (9.0, 11.0),
                  (0.0, 10.0), (-9.0, 11.0), (-18.0, 10.0), (-18.0, 0.0), (-9.0, -1.0))


@dataclass
class Sequence:
    frames: np.ndarray
    poses: list
    undist: object
    ctx: AutofocusContext
    camera: Camera
    scene: Scene = None

    @property
    def n_frames(self):
        return len(self.poses)


def make_poses(n_frames, ctx, seed=0, tilt=0.02, z_jitter=0.02, theta_jitter=0.03,
               positions=SCAN_POSITIONS, spread=1.0):
    """Lateral scan poses; frame 0 sits exactly at the gauge pose."""
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n_frames):
        x, y = positions[i % len(positions)]
        x, y = x * spread, y * spread
        if i == 0:
            poses.append(CameraPose(0.0, 0.0, ctx.Z_0, (0.0, 0.0, -1.0), 0.0, ctx.f_ph))
            continue
        nx, ny = rng.uniform(-tilt, tilt, size=2)
        pose = CameraPose.from_tilt(
            nx, ny, X=x + rng.uniform(-1, 1), Y=y + rng.uniform(-1, 1),
            Z=ctx.Z_0 * (1.0 + rng.uniform(-z_jitter, z_jitter)),
            theta=rng.uniform(-theta_jitter, theta_jitter), f_ph=ctx.f_ph)
        poses.append(pose.validate())
    return poses


def make_sequence(scene, n_frames=10, undist=None, camera=None, ctx=None, seed=0,
                  noise=0.0, **pose_kw):
    camera = camera or Camera()
    ctx = ctx or AutofocusContext.from_height(4.3, 75.0)
    poses = make_poses(n_frames, ctx, seed=seed, **pose_kw)
    rng = np.random.default_rng(seed + 1)
    frames = np.stack([render_frame(scene, p, undist, camera, noise=noise, rng=rng)
                       for p in poses])
    return Sequence(frames.astype(np.float32), poses, undist, ctx, camera, scene)


# -- dataset directories --------------------------------------------------------------

def save_dataset(seq, directory):
    """Frames as PNG plus a manifest, the distortion profile and ground truth."""
    os.makedirs(directory, exist_ok=True)
    lines = {
        "n_frames": seq.n_frames,
        "rows": seq.camera.shape[0],
        "cols": seq.camera.shape[1],
        "pixel_pitch": repr(float(seq.camera.pixel_pitch)),
        "f_eff": repr(float(seq.ctx.f_eff)),
        "M_0": repr(float(seq.ctx.M_0)),
        "Z_0": repr(float(seq.ctx.Z_0)),
    }
    text = fileio.format_keyvalue(lines)
    for i, (img, p) in enumerate(zip(seq.frames, seq.poses)):
        name = f"frame_{i:03d}.png"
        fileio.write_rgb(os.path.join(directory, name), img)
        nx, ny, nz = p.normal
        vals = " ".join(repr(float(v)) for v in (p.X, p.Y, p.Z, nx, ny, nz, p.theta))
        text += f"pose_{i:03d} = {name} {vals}\n"
    if seq.scene is not None:
        sc = seq.scene
        text += (f"scene_pitch = {float(sc.pitch)!r}\n"
                 f"scene_origin = {float(sc.origin[0])!r} {float(sc.origin[1])!r}\n")
        for k, h in sorted(sc.region_heights.items()):
            text += f"region_{k} = {float(h)!r}\n"
        fileio.write_height_map(os.path.join(directory, "truth_height.mesoh"),
                                fileio.HeightMap(sc.height, sc.pitch, sc.origin))
        fileio.write_labels(os.path.join(directory, "labels.pgm"), sc.labels)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write(text)
    if seq.undist is not None:
        with open(os.path.join(directory, "distortion.txt"), "w") as fh:
            fh.write(format_profile(seq.undist))


@dataclass
class GroundTruth:
    poses: list
    undist: object
    labels: np.ndarray
    label_pitch: float
    label_origin: tuple
    region_heights: dict
    height: object = None


def load_ground_truth(directory):
    path = os.path.join(directory, "manifest.txt")
    with open(path) as fh:
        kv = fileio.parse_keyvalue(fh.read())
    f_ph = float(kv["f_eff"]) * (1.0 + float(kv["M_0"]))
    poses = []
    for i in range(int(kv["n_frames"])):
        parts = kv[f"pose_{i:03d}"].split()
        X, Y, Z, nx, ny, nz, th = (float(v) for v in parts[1:8])
        poses.append(CameraPose(X, Y, Z, (nx, ny, nz), th, f_ph))
    undist = None
    dpath = os.path.join(directory, "distortion.txt")
    if os.path.exists(dpath):
        with open(dpath) as fh:
            undist = parse_profile(fh.read())
    labels, pitch, origin, heights, truth = None, None, None, {}, None
    if "scene_pitch" in kv:
        pitch = float(kv["scene_pitch"])
        origin = tuple(float(v) for v in kv["scene_origin"].split())
        labels = fileio.read_labels(os.path.join(directory, "labels.pgm"))
        heights = {int(k.split("_")[1]): float(v) for k, v in kv.items()
                   if k.startswith("region_")}
        truth = fileio.read_height_map(os.path.join(directory, "truth_height.mesoh"))
    return GroundTruth(poses, undist, labels, pitch, origin, heights, truth)


# -- evaluation ----------------------------------------------------------------------

@dataclass
class HeightEvaluation:
    regions: list
    truth: np.ndarray
    means: np.ndarray
    accuracy: np.ndarray
    precision: np.ndarray
    counts: np.ndarray
    shift: float
    rescale: float

    def as_rows(self):
        return [(int(k), float(t), float(m), float(a), float(p), int(n))
                for k, t, m, a, p, n in zip(self.regions, self.truth, self.means,
                                            self.accuracy, self.precision, self.counts)]

    def format(self, unit=1e-3, unit_name="um"):
        scale = 1e-3 / unit
        lines = [f"{'region':>6} {'truth':>9} {'mean':>9} {'accuracy':>9} {'precision':>9} "
                 f"{'cells':>7}   [{unit_name}]"]
        for k, t, m, a, p, n in self.as_rows():
            lines.append(f"{k:6d} {t * scale * 1e3:9.1f} {m * scale * 1e3:9.1f} "
                         f"{a * scale * 1e3:9.1f} {p * scale * 1e3:9.1f} {n:7d}")
        lines.append(f"global shift {self.shift * 1e3:.1f} um, rescale factor {self.rescale:.4f}")
        return "\n".join(lines)


def region_labels_on(estimate, labels, label_pitch, label_origin, erode=0.0):
    """Label of each estimate cell (nearest label cell); -1 off the label raster.

    ``erode`` (mm) shrinks every region so boundary cells are ignored.
    """
    labels = np.asarray(labels)
    if erode > 0:
        it = max(1, int(round(erode / label_pitch)))
        eroded = np.full(labels.shape, -1, dtype=np.int32)
        for k in np.unique(labels):
            m = ndimage.binary_erosion(labels == k, iterations=it, border_value=1)
            eroded[m] = k
        labels = eroded
    xx, yy = estimate.cell_centers()
    c = np.round((xx - label_origin[0]) / label_pitch).astype(int)
    r = np.round((yy - label_origin[1]) / label_pitch).astype(int)
    ok = (r >= 0) & (c >= 0) & (r < labels.shape[0]) & (c < labels.shape[1])
    out = np.full(estimate.shape, -1, dtype=np.int32)
    out[ok] = labels[r[ok], c[ok]]
    return out


def evaluate_heights(h_est, region_map, truths, rescale=True):
    """Per-region accuracy/precision of ``h_est`` after removing the best global shift.

    ``region_map`` labels each cell of ``h_est`` (negative = ignored) and
    ``truths`` maps region label to its true height. The shift is the mean over
    regions of ``truth - mean(h_est)``; NaN cells are ignored.
    """
    h_est = np.asarray(h_est, dtype=float)
    region_map = np.asarray(region_map)
    if h_est.shape != region_map.shape:
        raise SynthError(f"estimate {h_est.shape} and mask {region_map.shape} differ")
    regions = sorted(truths)
    means, stds, counts = [], [], []
    for k in regions:
        v = h_est[(region_map == k) & np.isfinite(h_est)]
        if v.size == 0:
            raise EmptyRegion(f"region {k} has no valid cells")
        means.append(v.mean())
        stds.append(v.std())
        counts.append(v.size)
    truth = np.array([truths[k] for k in regions], dtype=float)
    means = np.array(means)
    shift = float(np.mean(truth - means))
    acc = np.abs(means + shift - truth)
    factor = float("nan")
    if rescale and means.size > 1 and np.var(means) > 0:
        factor = float(np.cov(truth, means, bias=True)[0, 1] / np.var(means))
    return HeightEvaluation(regions, truth, means, acc, np.array(stds), np.array(counts),
                            shift, factor)
