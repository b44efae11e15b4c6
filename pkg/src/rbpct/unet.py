"""Untrained U-net generator ``G(w; z)``.

Layout for ``depth`` levels with channel widths ``ch[l] = min(base * 2**l, cap)``::

    encoder l:   conv(k) -> act -> [skip l] -> strided conv(k, stride 2)
    bottleneck:  conv(k) -> act -> conv(k) -> act
    decoder l:   upsample2x -> concat(skip l) -> conv(k) -> act
    head:        conv(1x1) -> 1 channel, linear

The outer skip ``c = z + G(w; z)`` and the residual back projection live in
:mod:`rbpct.rbpdip`, not here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class UNetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    kernel_size: int = 3
    activation_slope: float = 0.1
    seed: int = 0
    max_channels: int = 128
    downsample: str = "strided"  # or "avgpool"

    def __post_init__(self):
        if self.depth < 1:
            raise UNetConfigError("depth must be >= 1")
        if self.base_channels < 1 or self.max_channels < 1:
            raise UNetConfigError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise UNetConfigError("kernel_size must be odd")
        if not 0.0 <= self.activation_slope < 1.0:
            raise UNetConfigError("activation_slope must be in [0, 1)")
        if self.downsample not in ("strided", "avgpool"):
            raise UNetConfigError("downsample must be 'strided' or 'avgpool'")

    @property
    def widths(self) -> list[int]:
        return [min(self.base_channels * 2**level, self.max_channels) for level in range(self.depth)]

    def check_input(self, height: int, width: int) -> None:
        m = 2**self.depth
        if height % m or width % m:
            raise UNetConfigError(f"input {height}x{width} is not divisible by 2**depth = {m}")


@dataclass
class UNet:
    config: UNetConfig
    params: list[Tensor] = field(default_factory=list)

    def named(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def __getitem__(self, name: str) -> Tensor:
        return self.named()[name]

    def zero_(self) -> "UNet":
        for p in self.params:
            p.data[...] = 0.0
        return self

    def copy(self) -> "UNet":
        return UNet(self.config, [Tensor(p.data.copy(), requires_grad=True, name=p.name) for p in self.params])

    def n_weights(self) -> int:
        return sum(p.data.size for p in self.params)

    def forward(self, z: Tensor) -> Tensor:
        return unet_forward(self, z)

    def __call__(self, z: Tensor) -> Tensor:
        return unet_forward(self, z)


def _layer_specs(cfg: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, out, in, k) for every conv layer, in parameter order."""
    k = cfg.kernel_size
    ch = cfg.widths
    specs = []
    prev = 1
    for level, c in enumerate(ch):
        specs.append((f"enc{level}.conv", c, prev, k))
        if cfg.downsample == "strided":
            specs.append((f"enc{level}.down", c, c, k))
        prev = c
    specs.append(("mid.conv1", ch[-1], ch[-1], k))
    specs.append(("mid.conv2", ch[-1], ch[-1], k))
    for level in reversed(range(cfg.depth)):
        specs.append((f"dec{level}.conv", ch[level], prev + ch[level], k))
        prev = ch[level]
    specs.append(("head", 1, prev, 1))
    return specs


def unet_init(config: UNetConfig) -> UNet:
    """He-normal kernels (std = sqrt(2 / fan_in)) from a seeded generator, zero biases."""
    rng = np.random.default_rng(config.seed)
    params = []
    for name, out_c, in_c, k in _layer_specs(config):
        fan_in = in_c * k * k
        w = rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / fan_in)
        params.append(Tensor(w, requires_grad=True, name=name + ".weight"))
        params.append(Tensor(np.zeros(out_c), requires_grad=True, name=name + ".bias"))
    return UNet(config, params)


def unet_forward(net: UNet, z: Tensor) -> Tensor:
    cfg = net.config
    if z.data.ndim != 3 or z.shape[0] != 1:
        raise UNetConfigError(f"expected a single-channel (1, H, W) input, got {z.shape}")
    cfg.check_input(z.shape[1], z.shape[2])
    p = net.named()
    k = cfg.kernel_size
    pad = (k - 1) // 2
    slope = cfg.activation_slope

    def conv(x, name, stride=1, padding=pad):
        return ad.conv2d(x, p[name + ".weight"], p[name + ".bias"], stride=stride, padding=padding)

    x = z
    skips = []
    for level in range(cfg.depth):
        x = ad.leaky_relu(conv(x, f"enc{level}.conv"), slope)
        skips.append(x)
        x = conv(x, f"enc{level}.down", stride=2) if cfg.downsample == "strided" else ad.avg_pool2x(x)
    x = ad.leaky_relu(conv(x, "mid.conv1"), slope)
    x = ad.leaky_relu(conv(x, "mid.conv2"), slope)
    for level in reversed(range(cfg.depth)):
        x = ad.concat_channels(ad.upsample2x(x), skips[level])
        x = ad.leaky_relu(conv(x, f"dec{level}.conv"), slope)
    return conv(x, "head", padding=0)


# ----------------------------------------------------------- blob format
#
# Little endian:
#   magic     8 bytes  b"RBPUNET\0"
#   version   u32      (1)
#   depth, base_channels, kernel_size, max_channels   4 x u32
#   downsample u32     0 = strided, 1 = avgpool
#   activation_slope   f64
#   seed               i64
#   n_params  u32
#   per parameter:  name_len u32, name utf-8, ndim u32, ndim x u32 dims,
#                   prod(dims) x f64 values (C order)

BLOB_MAGIC = b"RBPUNET\0"
BLOB_VERSION = 1
_HEAD = struct.Struct("<8sIIIIIIdqI")


def save_unet(net: UNet, path) -> None:
    cfg = net.config
    parts = [_HEAD.pack(BLOB_MAGIC, BLOB_VERSION, cfg.depth, cfg.base_channels, cfg.kernel_size,
                        cfg.max_channels, 0 if cfg.downsample == "strided" else 1,
                        cfg.activation_slope, cfg.seed, len(net.params))]
    for prm in net.params:
        name = prm.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack(f"<I{prm.data.ndim}I", prm.data.ndim, *prm.data.shape))
        parts.append(prm.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_unet(path) -> UNet:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise UNetConfigError("checkpoint too short")
    magic, version, depth, base, k, cap, down, slope, seed, n = _HEAD.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise UNetConfigError("not a U-net checkpoint (bad magic)")
    if version != BLOB_VERSION:
        raise UNetConfigError(f"unsupported checkpoint version {version}")
    cfg = UNetConfig(depth, base, k, slope, seed, cap, "strided" if down == 0 else "avgpool")
    off = _HEAD.size
    params = []
    try:
        for _ in range(n):
            (nl,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off: off + nl].decode("utf-8")
            off += nl
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(dims)) if dims else 1
            vals = np.frombuffer(data, "<f8", count, off).reshape(dims).astype(np.float64)
            off += 8 * count
            params.append(Tensor(vals, requires_grad=True, name=name))
    except (struct.error, ValueError) as exc:
        raise UNetConfigError("truncated checkpoint") from exc
    if off != len(data):
        raise UNetConfigError("trailing bytes in checkpoint")
    net = UNet(cfg, params)
    expected = [(s[0], s[1:]) for s in _layer_specs(cfg)]
    names = [p.name for p in params]
    want = [f"{nm}.{kind}" for nm, _ in expected for kind in ("weight", "bias")]
    if names != want:
        raise UNetConfigError("checkpoint parameters do not match its config")
    return net
