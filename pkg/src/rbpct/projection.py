"""Matched parallel-beam projector pair.

The forward operator is ray driven with Joseph-style linear interpolation:
each ray steps across the image along whichever axis it crosses fastest and
interpolates linearly between the two nearest pixels on every line.  Instead
of point-sampling the ray at the detector centre, the interpolated line
integral is averaged over the detector bin, which has a closed form (the
antiderivative of the hat function) and makes the detector sum at every
angle equal to the image mass.

The weights are built once per geometry and cached as a CSR table.  The back
projector scatters the very same weights (the literal transpose), so the pair
is matched to rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class GeometryError(ValueError):
    """Input array does not match the projection geometry."""


@dataclass(frozen=True)
class ParallelGeometry:
    """Parallel-beam geometry over a ``image_height x image_width`` pixel grid.

    Angles are in radians, strictly increasing in ``[0, pi)``.  The detector
    row is centred on the image centre; ``detector_spacing`` is in pixel
    units.
    """

    angles: tuple[float, ...]
    image_width: int
    image_height: int
    detector_count: int = 0
    detector_spacing: float = 0.5

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if not angles:
            raise GeometryError("geometry needs at least one angle")
        if self.image_width < 1 or self.image_height < 1:
            raise GeometryError("image dimensions must be positive")
        if any(a < 0.0 or a >= math.pi for a in angles):
            raise GeometryError("angles must lie in [0, pi)")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise GeometryError("angles must be strictly increasing")
        if self.detector_spacing <= 0:
            raise GeometryError("detector_spacing must be positive")
        if self.detector_count == 0:
            object.__setattr__(self, "detector_count",
                               default_detector_count(self.image_width, self.image_height, self.detector_spacing))
        if self.detector_count < 1:
            raise GeometryError("detector_count must be positive")

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.detector_count)

    @property
    def angles_deg(self) -> np.ndarray:
        return np.degrees(np.asarray(self.angles))

    @classmethod
    def uniform(cls, n_views: int, size: int | tuple[int, int], range_deg: float = 180.0,
                detector_count: int = 0, detector_spacing: float = 0.5) -> "ParallelGeometry":
        """``n_views`` equally spaced angles starting at 0 and covering ``range_deg``.

        The end point is excluded, so ``uniform(90, n, 90.0)`` gives one view
        per degree over 0..89.
        """
        if n_views < 1:
            raise GeometryError("n_views must be positive")
        if not 0 < range_deg <= 180.0:
            raise GeometryError("range_deg must be in (0, 180]")
        h, w = (size, size) if isinstance(size, int) else size
        angles = np.radians(np.arange(n_views) * (range_deg / n_views))
        return cls(tuple(angles), image_width=w, image_height=h,
                   detector_count=detector_count, detector_spacing=detector_spacing)


def default_detector_count(width: int, height: int, spacing: float = 0.5) -> int:
    """Enough detectors to cover the image diagonal at every angle."""
    return math.ceil(math.sqrt(2.0) * max(width, height) / spacing)


@dataclass(frozen=True)
class Sinogram:
    geometry: ParallelGeometry
    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.geometry.sino_shape:
            raise GeometryError(f"sinogram shape {values.shape} != geometry {self.geometry.sino_shape}")
        if not np.all(np.isfinite(values)):
            raise GeometryError("sinogram contains non-finite values")
        object.__setattr__(self, "values", values)


def _hat_antiderivative(v: np.ndarray) -> np.ndarray:
    # integral of max(0, 1 - |t|) from -inf to v
    v = np.clip(v, -1.0, 1.0)
    return np.where(v <= 0.0, 0.5 * (v + 1.0) ** 2, 1.0 - 0.5 * (1.0 - v) ** 2)


def _angle_weights(theta: float, geom: ParallelGeometry):
    """COO triplets (detector, pixel, weight) for a single angle."""
    h, w = geom.image_height, geom.image_width
    d, ds = geom.detector_count, geom.detector_spacing
    c, s = math.cos(theta), math.sin(theta)
    t = (np.arange(d) - (d - 1) / 2.0) * ds

    # Lines are rows (y fixed) when the ray is closer to vertical, else columns.
    if abs(c) >= abs(s):
        n_lines, n_along = h, w
        line_pos = (h - 1) / 2.0 - np.arange(h)          # y of each row
        along_pos0 = -(w - 1) / 2.0                       # x of column 0
        cross, step = s, c
    else:
        n_lines, n_along = w, h
        line_pos = np.arange(w) - (w - 1) / 2.0          # x of each column
        along_pos0 = -(h - 1) / 2.0                       # position of row h-1, measured upward
        cross, step = c, s

    # Bin [t - ds/2, t + ds/2] maps to an interval [a, b] on each line.
    lo = (t[:, None] - ds / 2.0 - line_pos[None, :] * cross) / step
    hi = (t[:, None] + ds / 2.0 - line_pos[None, :] * cross) / step
    a, b = np.minimum(lo, hi), np.maximum(lo, hi)

    width = ds / abs(step)
    n_off = int(math.ceil(width)) + 3
    first = np.floor(a - 1.0 - along_pos0).astype(np.int64) + 1
    idx = first[..., None] + np.arange(n_off)           # along-line pixel index
    centre = along_pos0 + idx
    wts = (_hat_antiderivative(b[..., None] - centre) - _hat_antiderivative(a[..., None] - centre)) / ds

    det = np.broadcast_to(np.arange(d)[:, None, None], idx.shape)
    line = np.broadcast_to(np.arange(n_lines)[None, :, None], idx.shape)
    keep = (idx >= 0) & (idx < n_along) & (wts > 0.0)
    det, line, idx, wts = det[keep], line[keep], idx[keep], wts[keep]

    if abs(c) >= abs(s):
        pix = line * w + idx
    else:
        pix = (h - 1 - idx) * w + line
    return det, pix, wts


@lru_cache(maxsize=32)
def system_matrix(geom: ParallelGeometry) -> sp.csr_matrix:
    """Sparse weight table of the forward operator, rows = (angle, detector)."""
    rows, cols, vals = [], [], []
    for k, theta in enumerate(geom.angles):
        det, pix, wts = _angle_weights(theta, geom)
        rows.append(det + k * geom.detector_count)
        cols.append(pix)
        vals.append(wts)
    n_rays = geom.n_angles * geom.detector_count
    n_pix = geom.image_width * geom.image_height
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, n_pix),
    )
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@lru_cache(maxsize=32)
def _transpose(geom: ParallelGeometry) -> sp.csr_matrix:
    return system_matrix(geom).T.tocsr()


def _as_image(image, geom: ParallelGeometry) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != geom.image_shape:
        raise GeometryError(f"image shape {arr.shape} != geometry {geom.image_shape}")
    return arr


def _as_sino(sino, geom: ParallelGeometry) -> np.ndarray:
    if isinstance(sino, Sinogram):
        if sino.geometry != geom:
            raise GeometryError("sinogram was built for a different geometry")
        return sino.values
    arr = np.asarray(sino, dtype=np.float64)
    if arr.shape != geom.sino_shape:
        raise GeometryError(f"sinogram shape {arr.shape} != geometry {geom.sino_shape}")
    return arr


def forward_project(image, geom: ParallelGeometry) -> np.ndarray:
    """Line integrals ``A c`` as an ``(n_angles, detector_count)`` array."""
    c = _as_image(image, geom)
    return (system_matrix(geom) @ c.ravel()).reshape(geom.sino_shape)


def back_project(sino, geom: ParallelGeometry) -> np.ndarray:
    """Exact transpose ``A^T g`` of :func:`forward_project`."""
    g = _as_sino(sino, geom)
    return (_transpose(geom) @ g.ravel()).reshape(geom.image_shape)


def normal_op(image, geom: ParallelGeometry) -> np.ndarray:
    return back_project(forward_project(image, geom), geom)


def adjoint_check(geom: ParallelGeometry, seed: int = 0) -> float:
    """Relative discrepancy of <Ax, y> and <x, A^T y> for seeded random x, y."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(geom.image_shape)
    y = rng.standard_normal(geom.sino_shape)
    lhs = float(np.vdot(forward_project(x, geom), y))
    rhs = float(np.vdot(x, back_project(y, geom)))
    return abs(lhs - rhs) / max(abs(lhs), np.finfo(np.float64).tiny)


def frequency_angles(n: int) -> np.ndarray:
    """Polar angle in ``[0, pi)`` of every ``fft2`` sample of an n x n image.

    Rows run downward, so the row frequency is negated to express the angle
    in the same (x right, y up) frame the projection angles use.
    """
    k = np.fft.fftfreq(n)
    ky = -k[:, None] * np.ones((1, n))
    kx = k[None, :] * np.ones((n, 1))
    return np.mod(np.arctan2(ky, kx), np.pi)


def measured_mask(geom: ParallelGeometry, tolerance_band_deg: float, n: int) -> np.ndarray:
    """True where a frequency sample lies within the band of a measured slice."""
    phi = frequency_angles(n)
    band = math.radians(tolerance_band_deg) + 1e-12
    mask = np.zeros((n, n), dtype=bool)
    for theta in geom.angles:
        diff = np.abs(phi - theta)
        diff = np.minimum(diff, np.pi - diff)
        mask |= diff <= band
    return mask


def wedge_energy(image, geom: ParallelGeometry, tolerance_band_deg: float = 0.5) -> tuple[float, float]:
    """Split non-DC Fourier energy into measured and unmeasured parts.

    A frequency sample counts as measured when its polar angle is within
    ``tolerance_band_deg`` of one of the projection angles (central slices).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise GeometryError("wedge_energy needs a square image")
    if tolerance_band_deg < 0:
        raise GeometryError("tolerance band must be non-negative")
    n = img.shape[0]
    power = np.abs(np.fft.fft2(img)) ** 2
    power[0, 0] = 0.0
    mask = measured_mask(geom, tolerance_band_deg, n)
    return float(power[mask].sum()), float(power[~mask].sum())


def geometry_from_degrees(angles_deg: Sequence[float], size: int | tuple[int, int], **kw) -> ParallelGeometry:
    h, w = (size, size) if isinstance(size, int) else size
    return ParallelGeometry(tuple(np.radians(np.asarray(angles_deg, dtype=float))), image_width=w, image_height=h, **kw)
