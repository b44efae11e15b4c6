"""Self-checks exposed on the command line: adjoint pairing and gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Tensor, backward, numerical_grad, rel_error
from ..projection import ParallelGeometry, adjoint_check
from ..unet import UNetConfig, unet_forward, unet_init


@dataclass(frozen=True)
class AdjointCase:
    views: int
    size: int
    range_deg: float
    seed: int
    discrepancy: float


def adjoint_suite(trials: int = 20, seed: int = 0) -> list[AdjointCase]:
    """Dot-product test on seeded geometries from 1 to 180 views and 16 to 128 px.

    The first two cases pin the extremes so every suite covers the full span.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for k in range(trials):
        if k == 0:
            views, size = 1, 16
        elif k == 1:
            views, size = 180, 128
        else:
            views = int(rng.integers(1, 181))
            size = int(rng.integers(16, 129))
        range_deg = float(rng.choice([180.0, 90.0, float(rng.uniform(10.0, 180.0))]))
        geom = ParallelGeometry.uniform(views, size, range_deg)
        case_seed = int(rng.integers(2**31))
        cases.append(AdjointCase(views, size, range_deg, case_seed, adjoint_check(geom, case_seed)))
    return cases


# ------------------------------------------------------------- gradients


def _probe(shape, rng):
    w = rng.standard_normal(shape)
    return lambda t: ad.linear(t, lambda v: np.asarray((v * w).sum()), lambda g: g * w, name="probe")


def _leaf(rng, shape, away_from_zero=0.0):
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.where(np.abs(data) < away_from_zero, np.copysign(away_from_zero, data), data)
    return Tensor(data, requires_grad=True)


def _worst_error(build, tensors, coords, rng, h):
    with Tape():
        loss = build()
    backward(loss, tensors)
    analytic = [t.grad.copy() for t in tensors]
    total = sum(t.data.size for t in tensors)
    worst, checked = 0.0, 0
    for t, g in zip(tensors, analytic):
        share = -(-coords * t.data.size // total)
        picks = rng.choice(t.data.size, size=min(share, t.data.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, t.shape)
            num = numerical_grad(lambda: build().item(), t, idx, h)
            worst = max(worst, rel_error(g[idx], num, floor=1e-8))
            checked += 1
    return worst, checked


def gradcheck_suite(coords: int = 50, seed: int = 0) -> dict[str, tuple[float, int]]:
    """Finite-difference check of every op and of a depth-2 U-net on 16x16.

    Returns ``{name: (worst relative error, coordinates checked)}``.
    """
    rng = np.random.default_rng(seed)
    out = {}

    def run(name, build, tensors, h=1e-6):
        out[name] = _worst_error(build, tensors, coords, rng, h)

    x, k, b = _leaf(rng, (2, 6, 6)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    for stride in (1, 2):
        p = _probe(ad.conv2d(x, k, b, stride, 1).shape, rng)
        run(f"conv2d/stride{stride}", lambda p=p, s=stride: p(ad.conv2d(x, k, b, s, 1)), [x, k, b])

    a = _leaf(rng, (2, 6, 6), away_from_zero=1e-3)
    p = _probe(a.shape, rng)
    run("leaky_relu", lambda: p(ad.leaky_relu(a, 0.1)), [a])

    u = _leaf(rng, (2, 5, 6))
    p = _probe((2, 10, 12), rng)
    run("upsample2x", lambda: p(ad.upsample2x(u)), [u])

    v = _leaf(rng, (2, 6, 6))
    p = _probe((2, 3, 3), rng)
    run("avg_pool2x", lambda: p(ad.avg_pool2x(v)), [v])

    c1, c2 = _leaf(rng, (1, 6, 6)), _leaf(rng, (2, 6, 6))
    p = _probe((3, 6, 6), rng)
    run("concat_channels", lambda: p(ad.concat_channels(c1, c2)), [c1, c2])

    s1, s2 = _leaf(rng, (1, 8, 8)), _leaf(rng, (1, 8, 8))
    p = _probe((1, 8, 8), rng)
    run("add", lambda: p(ad.add(s1, s2)), [s1, s2])
    run("scale", lambda: p(ad.scale(s1, -2.5)), [s1])
    const = rng.standard_normal((1, 8, 8))
    run("add_const", lambda: p(ad.add_const(s1, const)), [s1])
    mat = rng.standard_normal((5, 64))
    q = _probe((5,), rng)
    run("linear", lambda: q(ad.linear(s1, lambda v: mat @ v.ravel(), lambda g: (mat.T @ g).reshape(1, 8, 8))), [s1])
    run("tsum", lambda: ad.scale(ad.tsum(ad.leaky_relu(s1, 0.3)), 1.0), [s1])
    # residuals on both sides of delta; the central difference is exact there
    hub = Tensor(np.where(rng.random((1, 8, 8)) < 0.5, 1, -1) * rng.uniform(0.1, 3.0, (1, 8, 8)),
                 requires_grad=True)
    hub.data[np.abs(np.abs(hub.data) - 1.0) < 1e-2] += 0.05
    run("huber_loss", lambda: ad.huber_loss(hub, 1.0), [hub], h=1e-4)

    net = unet_init(UNetConfig(depth=2, base_channels=4, seed=seed))
    for prm in net.params:
        if prm.name.endswith(".bias"):
            prm.data[...] = rng.normal(0.0, 0.1, prm.shape)
    z = Tensor(rng.random((1, 16, 16)))
    run("unet(depth=2,16x16)", lambda: ad.huber_loss(unet_forward(net, z), 1.0), list(net.params))
    return out
