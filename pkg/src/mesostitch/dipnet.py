"""Untrained encoder-decoder CNN that maps RGB frames to camera-centric height maps.

Down block: 3x3 conv stride 2, BN, leaky ReLU, 3x3 conv, BN, leaky ReLU.
Up block: 2x bilinear upsample, 3x3 conv, BN, leaky ReLU, 1x1 conv, BN, leaky ReLU.
The decoder mirrors the encoder's filter list; there are no skip connections.
A linear 1x1 head maps the last block to one channel; it is not part of the
published parameter counts and is initialized to zero, so an untrained
network predicts a flat height map.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_FILTERS = (16, 16, 16, 32, 32)
MAGIC = "MESONET1"


class InvalidArchitecture(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    filters: tuple = DEFAULT_FILTERS
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(k) for k in self.filters))
        if not self.filters or any(k <= 0 for k in self.filters):
            raise InvalidArchitecture(f"filter counts must be positive: {self.filters}")
        if self.in_channels <= 0:
            raise InvalidArchitecture("in_channels must be positive")

    @property
    def depth(self):
        return len(self.filters)

    @classmethod
    def parse(cls, text):
        try:
            return cls(tuple(int(v) for v in str(text).strip("[] ").split(",") if v.strip()))
        except ValueError as exc:
            raise InvalidArchitecture(f"cannot parse architecture {text!r}") from exc


def _conv_params(k_in, k_out, K):
    return k_out * (k_in * K * K + 1)


def param_count(arch):
    """Parameters in the down/up blocks: conv weights+biases and 4 per BN channel."""
    total = 0
    k_in = arch.in_channels
    for k in arch.filters:
        total += _conv_params(k_in, k, 3) + 4 * k + _conv_params(k, k, 3) + 4 * k
        k_in = k
    for k in reversed(arch.filters):
        total += _conv_params(k_in, k, 3) + 4 * k + _conv_params(k, k, 1) + 4 * k
        k_in = k
    return total


class _ConvBN:
    def __init__(self, k_in, k_out, K, stride, rng, dtype):
        fan_in = k_in * K * K
        std = np.sqrt(2.0 / ((1 + ad.LEAKY_SLOPE ** 2) * fan_in))
        self.weight = Tensor(rng.normal(0.0, std, (k_out, k_in, K, K)), True, dtype)
        self.bias = Tensor(np.zeros(k_out), True, dtype)
        self.gamma = Tensor(np.ones(k_out), True, dtype)
        self.beta = Tensor(np.zeros(k_out), True, dtype)
        self.running_mean = np.zeros(k_out, dtype=np.float64)
        self.running_var = np.ones(k_out, dtype=np.float64)
        self.stride = stride

    def __call__(self, x, training):
        y = ad.conv2d(x, self.weight, self.bias, stride=self.stride)
        y = ad.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=training)
        return ad.leaky_relu(y)

    def parameters(self):
        return [self.weight, self.bias, self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]


@dataclass
class Network:
    arch: Architecture
    seed: int = 0
    height_scale: float = 1.0
    dtype: type = np.float32
    down: list = field(default_factory=list)
    up: list = field(default_factory=list)
    head_weight: Tensor = None
    head_bias: Tensor = None

    def parameters(self):
        out = []
        for block in self.down + self.up:
            for layer in block:
                out.extend(layer.parameters())
        return out + [self.head_weight, self.head_bias]

    def layers(self):
        return [layer for block in self.down + self.up for layer in block]

    def block_parameter_count(self):
        """Trainable block parameters plus the two BN running-statistic buffers."""
        return sum(t.size for layer in self.layers() for t in layer.parameters()) + sum(
            b.size for layer in self.layers() for b in layer.buffers())

    def forward(self, images, training=True):
        return forward(self, images, training)

    __call__ = forward

    # -- serialization -------------------------------------------------------
    def to_bytes(self):
        arrays = [t.data for t in self.parameters()]
        arrays += [b for layer in self.layers() for b in layer.buffers()]
        header = (f"{MAGIC} arch={','.join(map(str, self.arch.filters))} seed={self.seed} "
                  f"s_h={float(self.height_scale)!r} in={self.arch.in_channels} "
                  f"count={sum(a.size for a in arrays)}\n")
        payload = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
        return header.encode("ascii") + payload

    @classmethod
    def from_bytes(cls, blob):
        nl = blob.index(b"\n")
        fields = blob[:nl].decode("ascii").split()
        if not fields or fields[0] != MAGIC:
            raise ValueError("not a network blob")
        kv = dict(f.split("=", 1) for f in fields[1:])
        arch = Architecture(tuple(int(v) for v in kv["arch"].split(",")), int(kv["in"]))
        net = build(arch, seed=int(kv["seed"]), height_scale=float(kv["s_h"]))
        data = np.frombuffer(blob[nl + 1:], dtype="<f4")
        if data.size != int(kv["count"]):
            raise ValueError("network blob is truncated")
        pos = 0
        for t in net.parameters():
            t.data[...] = data[pos:pos + t.size].reshape(t.shape)
            pos += t.size
        for layer in net.layers():
            for b in layer.buffers():
                b[...] = data[pos:pos + b.size]
                pos += b.size
        return net

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build(arch, seed=0, height_scale=1.0, dtype=None):
    """Instantiate a network with seeded He-style weights and a zero head."""
    dtype = dtype or ad.get_default_dtype()
    rng = np.random.default_rng(seed)
    net = Network(arch, seed, float(height_scale), dtype)
    k_in = arch.in_channels
    for k in arch.filters:
        net.down.append([_ConvBN(k_in, k, 3, 2, rng, dtype), _ConvBN(k, k, 3, 1, rng, dtype)])
        k_in = k
    for k in reversed(arch.filters):
        net.up.append([_ConvBN(k_in, k, 3, 1, rng, dtype), _ConvBN(k, k, 1, 1, rng, dtype)])
        k_in = k
    net.head_weight = Tensor(np.zeros((1, k_in, 1, 1)), True, dtype)
    net.head_bias = Tensor(np.zeros(1), True, dtype)
    return net


def forward(net, images, training=True):
    """Height maps (N, 1, H, W) for RGB frames (N, 3, H, W), scaled by ``height_scale``.

    Frames are reflect-padded to a multiple of ``2**depth`` and cropped back.
    ``training=True`` normalizes with batch statistics.
    """
    x = images if isinstance(images, Tensor) else np.asarray(images, dtype=net.dtype)
    if x.ndim != 4 or x.shape[1] != net.arch.in_channels:
        raise ad.ShapeMismatch(f"expected (N, {net.arch.in_channels}, H, W), got {x.shape}")
    H, W = x.shape[2:]
    m = 2 ** net.arch.depth
    ph, pw = (-H) % m, (-W) % m
    if ph or pw:
        x = ad.pad_reflect(x, ph, pw)
    for conv1, conv2 in net.down:
        x = conv2(conv1(x, training), training)
    for conv1, conv2 in net.up:
        x = conv2(conv1(ad.upsample2x(x), training), training)
    y = ad.conv2d(x, net.head_weight, net.head_bias)
    if ph or pw:
        y = y[:, :, :H, :W]
    return y * net.height_scale


def describe(arch):
    buf = io.StringIO()
    buf.write(f"architecture {list(arch.filters)}: {param_count(arch)} block parameters\n")
    return buf.getvalue()
