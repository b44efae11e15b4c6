"""Phantoms, image files, perturbations and the low-dose noise model."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projection import ParallelGeometry, Sinogram, forward_project


class IngestionError(ValueError):
    """An image or sinogram file could not be read."""


# Modified (higher contrast) Shepp-Logan table:
# intensity, semi-axis a, semi-axis b, centre x, centre y, rotation (deg)
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def ellipse_sum(x, y, ellipses=SHEPP_LOGAN_ELLIPSES):
    """Sum of intensities of the ellipses containing each point (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    for value, a, b, x0, y0, phi in ellipses:
        cp, sp = math.cos(math.radians(phi)), math.sin(math.radians(phi))
        u = (x - x0) * cp + (y - y0) * sp
        v = -(x - x0) * sp + (y - y0) * cp
        out = out + np.where((u / a) ** 2 + (v / b) ** 2 <= 1.0, value, 0.0)
    return out


def pixel_coordinates(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalised pixel-centre coordinates, x to the right and y up, in [-1, 1]."""
    x = (np.arange(width) - (width - 1) / 2.0) / (width / 2.0)
    y = ((height - 1) / 2.0 - np.arange(height)) / (height / 2.0)
    return np.meshgrid(x, y)


def shepp_logan(width: int, height: int | None = None) -> np.ndarray:
    height = width if height is None else height
    if width < 16 or height < 16:
        raise ValueError("phantom dimensions must be at least 16")
    xx, yy = pixel_coordinates(width, height)
    return np.clip(ellipse_sum(xx, yy), 0.0, 1.0)


def disk(size: int, radius: float = 0.5) -> np.ndarray:
    """Centred uniform disk, radius in normalised units."""
    xx, yy = pixel_coordinates(size, size)
    return (xx**2 + yy**2 <= radius**2).astype(np.float64)


# ---------------------------------------------------------------- image I/O


def _read_pgm(data: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise IngestionError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise IngestionError(f"unsupported PGM magic {tokens[0]!r}; only binary P5 is read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise IngestionError("corrupt PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise IngestionError("corrupt PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(data) - pos < count * dtype.itemsize:
        raise IngestionError("PGM pixel data is truncated")
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def load_image(path) -> np.ndarray:
    """Read a grayscale PGM (P5, 8 or 16 bit) or PNG into [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if data[:2] == b"P5":
        return _read_pgm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            if im.mode not in ("L", "I;16", "I;16B", "I"):
                raise IngestionError(f"PNG mode {im.mode} is not grayscale")
            arr = np.asarray(im, dtype=np.float64)
            scale = 255.0 if im.mode == "L" else 65535.0
        return arr / scale
    raise IngestionError(f"{path}: not a P5 PGM or PNG file")


def save_image(image, path, bits: int = 16) -> None:
    """Write ``image`` (clipped to [0, 1]) as P5 PGM, or PNG by file suffix."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(img * maxval)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        if bits == 8:
            PILImage.fromarray(q.astype(np.uint8), mode="L").save(path)
        else:
            PILImage.fromarray(q.astype(np.uint16)).save(path)
        return
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = q.astype(">u2" if bits == 16 else "u1").tobytes()
    path.write_bytes(header + body)


# ------------------------------------------------------- sinogram container
#
# Little endian: magic b"RBPSINO\0", u32 version, u32 m, u32 d,
# f64 detector_spacing, u32 image_width, u32 image_height,
# m x f64 angles (radians), m*d x f64 values (row = angle).

SINO_MAGIC = b"RBPSINO\0"
SINO_VERSION = 1
_SINO_HEAD = struct.Struct("<8sIIIdII")


def save_sinogram(sino: Sinogram, path) -> None:
    g = sino.geometry
    m, d = g.sino_shape
    head = _SINO_HEAD.pack(SINO_MAGIC, SINO_VERSION, m, d, g.detector_spacing, g.image_width, g.image_height)
    body = np.asarray(g.angles, dtype="<f8").tobytes() + sino.values.astype("<f8").tobytes()
    Path(path).write_bytes(head + body)


def load_sinogram(path) -> Sinogram:
    data = Path(path).read_bytes()
    if len(data) < _SINO_HEAD.size:
        raise IngestionError("sinogram file too short")
    magic, version, m, d, spacing, w, h = _SINO_HEAD.unpack_from(data)
    if magic != SINO_MAGIC:
        raise IngestionError("not a sinogram container (bad magic)")
    if version != SINO_VERSION:
        raise IngestionError(f"unsupported sinogram container version {version}")
    need = _SINO_HEAD.size + 8 * (m + m * d)
    if len(data) != need:
        raise IngestionError(f"sinogram payload size {len(data)} != expected {need}")
    off = _SINO_HEAD.size
    angles = np.frombuffer(data, "<f8", m, off)
    values = np.frombuffer(data, "<f8", m * d, off + 8 * m).reshape(m, d)
    geom = ParallelGeometry(tuple(angles), image_width=w, image_height=h, detector_count=d, detector_spacing=spacing)
    return Sinogram(geom, values.copy())


def sinogram_to_csv(sino: Sinogram, path) -> None:
    """One row per angle: angle in degrees followed by the detector values."""
    deg = np.degrees(np.asarray(sino.geometry.angles))
    with open(path, "w") as fh:
        fh.write("# rbpct sinogram csv v1\n")
        fh.write("angle_deg," + ",".join(f"det{k}" for k in range(sino.geometry.detector_count)) + "\n")
        for a, row in zip(deg, sino.values):
            fh.write(f"{a!r}," + ",".join(repr(float(v)) for v in row) + "\n")


# ------------------------------------------------------------ perturbation


def rotate_image(image, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre, counter-clockwise.

    Samples that fall outside the grid read as zero.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if degrees % 360.0 == 0.0:
        return img.copy()
    t = math.radians(degrees)
    ct, st = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx - (w - 1) / 2.0
    y = (h - 1) / 2.0 - yy
    # inverse map: rotate output coordinates by -t
    xs = ct * x + st * y
    ys = -st * x + ct * y
    col = xs + (w - 1) / 2.0
    row = (h - 1) / 2.0 - ys

    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = col - c0
    fr = row - r0
    padded = np.pad(img, 1)

    def at(r, c):
        inside = (r >= -1) & (r <= h) & (c >= -1) & (c <= w)
        rr = np.clip(r + 1, 0, h + 1)
        cc = np.clip(c + 1, 0, w + 1)
        return np.where(inside, padded[rr, cc], 0.0)

    return ((1 - fr) * (1 - fc) * at(r0, c0) + (1 - fr) * fc * at(r0, c0 + 1)
            + fr * (1 - fc) * at(r0 + 1, c0) + fr * fc * at(r0 + 1, c0 + 1))


# ------------------------------------------------------------------ noise


@dataclass(frozen=True)
class NoiseSpec:
    I0: float
    seed: int = 0

    def __post_init__(self):
        if not self.I0 > 0:
            raise ValueError("I0 must be positive")


def expected_counts(g, I0: float) -> np.ndarray:
    """Mean photon count through line integral ``g`` (Beer-Lambert)."""
    return I0 * np.exp(-np.asarray(g, dtype=np.float64))


def poisson_noise(sino, spec: NoiseSpec):
    """Replace each line integral by the log of a Poisson photon count.

    ``(values, I0, seed)`` fully determine the draw.  Zero counts are clamped
    to one before taking the log.
    """
    if not spec.I0 > 0:
        raise ValueError("I0 must be positive")
    values = sino.values if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    counts = rng.poisson(expected_counts(values, spec.I0)).astype(np.float64)
    noisy = -np.log(np.maximum(counts, 1.0) / spec.I0).reshape(values.shape)
    if isinstance(sino, Sinogram):
        meta = dict(sino.meta, I0=spec.I0, noise_seed=spec.seed)
        return Sinogram(sino.geometry, noisy, meta)
    return noisy


def make_sinogram(image, geom: ParallelGeometry, noise: NoiseSpec | None = None) -> Sinogram:
    clean = forward_project(image, geom)
    meta = {
        "n_views": geom.n_angles,
        "angles_deg": [float(a) for a in geom.angles_deg],
        "detector_count": geom.detector_count,
        "detector_spacing": geom.detector_spacing,
        "I0": None,
        "noise_seed": None,
    }
    sino = Sinogram(geom, clean, meta)
    if noise is not None:
        sino = poisson_noise(sino, noise)
    return sino
