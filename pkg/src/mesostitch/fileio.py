"""On-disk formats: height rasters, images and key=value configuration text."""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

HEIGHT_MAGIC = "MESOH1"


class FormatError(ValueError):
    pass


@dataclass
class HeightMap:
    data: np.ndarray
    pitch: float
    origin: tuple = (0.0, 0.0)

    @property
    def shape(self):
        return self.data.shape

    def cell_centers(self):
        rows, cols = self.data.shape
        x = self.origin[0] + self.pitch * np.arange(cols)
        y = self.origin[1] + self.pitch * np.arange(rows)
        return np.meshgrid(x, y)


def encode_height_map(hm):
    data = np.asarray(hm.data, dtype="<f4")
    if data.ndim != 2:
        raise FormatError("height map must be 2D")
    rows, cols = data.shape
    header = (f"{HEIGHT_MAGIC} {rows} {cols} {float(hm.pitch)!r} "
              f"{float(hm.origin[0])!r} {float(hm.origin[1])!r}\n")
    return header.encode("ascii") + data.tobytes()


def decode_height_map(blob):
    try:
        nl = blob.index(b"\n")
        fields = blob[:nl].decode("ascii").split()
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError("missing height map header") from exc
    if len(fields) != 6 or fields[0] != HEIGHT_MAGIC:
        raise FormatError(f"bad height map header: {fields[:6]}")
    rows, cols = int(fields[1]), int(fields[2])
    payload = blob[nl + 1:]
    if len(payload) != rows * cols * 4:
        raise FormatError(f"payload is {len(payload)} bytes, expected {rows * cols * 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return HeightMap(data, float(fields[3]), (float(fields[4]), float(fields[5])))


def write_height_map(path, hm):
    with open(path, "wb") as fh:
        fh.write(encode_height_map(hm))


def read_height_map(path):
    with open(path, "rb") as fh:
        return decode_height_map(fh.read())


# -- images ---------------------------------------------------------------------

def read_rgb(path):
    """8-bit RGB (PNG/PPM/...) as float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_rgb(path, img):
    arr = np.asarray(img, dtype=float)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
    arr = np.nan_to_num(arr, nan=0.0)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[..., 0]
    Image.fromarray(u8).save(path)


def read_labels(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int32)


def write_labels(path, labels):
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def list_frames(directory):
    exts = (".png", ".ppm", ".pnm")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(exts))
    return [os.path.join(directory, n) for n in names]


def downsample_image(img, factor, blur=0.0):
    """Block-average a (C, H, W) image by an integer factor (trailing rows/cols dropped).

    ``blur`` adds a Gaussian prefilter of ``blur * factor`` pixels against aliasing.
    """
    if factor == 1:
        return img
    if blur > 0:
        img = ndimage.gaussian_filter(img, (0, blur * factor, blur * factor), mode="nearest")
    C, H, W = img.shape
    h, w = H // factor, W // factor
    return img[:, :h * factor, :w * factor].reshape(C, h, factor, w, factor).mean(axis=(2, 4))


# -- key=value text ----------------------------------------------------------------

def parse_keyvalue(text):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_keyvalue(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())
