"""Independent reference implementations used by several test modules."""

import math

import numpy as np


def hat(v):
    return np.maximum(0.0, 1.0 - np.abs(v))


def joseph_ray_integral(image, theta, t):
    """Line integral of the linearly interpolated image along one ray.

    The ray is {(x, y): x cos(theta) + y sin(theta) = t} in pixel units with
    the origin at the image centre and y pointing up.  Sampling happens once
    per row (or column) of the driving axis, as in Joseph's method.
    """
    h, w = image.shape
    c, s = math.cos(theta), math.sin(theta)
    xs = np.arange(w) - (w - 1) / 2.0
    ys = (h - 1) / 2.0 - np.arange(h)
    total = 0.0
    if abs(c) >= abs(s):
        for i, y in enumerate(ys):
            x = (t - y * s) / c
            total += np.dot(hat(x - xs), image[i]) / abs(c)
    else:
        for j, x in enumerate(xs):
            y = (t - x * c) / s
            total += np.dot(hat(y - ys), image[:, j]) / abs(s)
    return total


def _kinks(image_shape, theta, lo, hi):
    h, w = image_shape
    c, s = math.cos(theta), math.sin(theta)
    xs = np.arange(w) - (w - 1) / 2.0
    ys = (h - 1) / 2.0 - np.arange(h)
    pts = [lo, hi]
    if abs(c) >= abs(s):
        for y in ys:
            for x in xs:
                for k in (-1, 0, 1):
                    pts.append(y * s + c * (x + k))
    else:
        for x in xs:
            for y in ys:
                for k in (-1, 0, 1):
                    pts.append(x * c + s * (y + k))
    pts = np.array(sorted(p for p in pts if lo <= p <= hi))
    return pts


def bin_average(image, theta, centre, spacing):
    """Exact average of the ray integral over one detector bin.

    The integrand is piecewise linear in the detector offset, so the
    trapezoid rule between consecutive kinks is exact.
    """
    lo, hi = centre - spacing / 2.0, centre + spacing / 2.0
    pts = _kinks(image.shape, theta, lo, hi)
    vals = np.array([joseph_ray_integral(image, theta, p) for p in pts])
    return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(pts)) / spacing)


def dense_system_matrix(geom):
    """Materialise the forward operator column by column with the oracle."""
    h, w = geom.image_shape
    d, ds = geom.detector_count, geom.detector_spacing
    offsets = (np.arange(d) - (d - 1) / 2.0) * ds
    mat = np.zeros((geom.n_angles * d, h * w))
    for p in range(h * w):
        e = np.zeros((h, w))
        e.flat[p] = 1.0
        row, col = divmod(p, w)
        x0, y0 = col - (w - 1) / 2.0, (h - 1) / 2.0 - row
        for k, theta in enumerate(geom.angles):
            c, s = math.cos(theta), math.sin(theta)
            centre = x0 * c + y0 * s
            for b, t in enumerate(offsets):
                # a pixel's footprint never reaches further than this
                if abs(t - centre) > ds + abs(c) + abs(s):
                    continue
                mat[k * d + b, p] = bin_average(e, theta, t, ds)
    return mat
