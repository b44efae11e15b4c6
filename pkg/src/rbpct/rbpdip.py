"""Residual-back-projection DIP reconstruction and the plain DIP baseline.

Each RBP-DIP iteration:

    alpha = <r, r> / <r, A^T A r>
    z     = c + alpha * beta(n) * r          (constant, not on the tape)
    c     = z + G(w; z)                      (outer skip connection)
    r     = A^T g - A^T A c
    w    <- RMSProp step on huber(r / max|A^T g|)

The DIP baseline keeps ``z`` fixed at seeded uniform noise and uses
``c = G(w; z)`` with the same loss and optimizer.

``RbpConfig.rbp_base = "input"`` switches the RBP update to
``z = z + alpha * beta(n) * r``, so the input accumulates the back-projected
corrections instead of restarting from the last output.  The default
(``"output"``) is the update written above.
"""

from __future__ import annotations

import dataclasses
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RmsPropState, Tape, Tensor
from .history import IterRecord, ReconRun
from .mbir import Converged, NullSpaceResidual, normal_rhs, sd_step_size
from .metrics import snr as snr_db
from .projection import GeometryError, ParallelGeometry, Sinogram, normal_op
from .unet import UNet, UNetConfig, load_unet, save_unet, unet_init

MODES = ("rbp-dip", "dip-fixed")


class DivergenceError(FloatingPointError):
    """The loss became non-finite."""


def beta(n: int, n_s: float = 1000.0, n_c: float = 4.0, beta_max: float = 1e-3) -> float:
    """Sigmoid ramp of the RBP strength, centred at ``n / n_s = n_c``."""
    if n < 0:
        raise ValueError("iteration must be non-negative")
    x = n / n_s - n_c
    # the two forms avoid overflow of exp for large |x|
    if x >= 0:
        return beta_max / (1.0 + math.exp(-x))
    e = math.exp(x)
    return beta_max * e / (1.0 + e)


@dataclass
class RbpConfig:
    n_c: float = 4.0
    n_s: float = 1000.0
    beta_max: float = 1e-3
    max_iters: int = 10000
    huber_delta: float = 1.0
    unet_config: UNetConfig = field(default_factory=UNetConfig)
    mode: str = "rbp-dip"
    seed: int = 0
    lr: float = 1e-4
    rho: float = 0.99
    eps: float = 1e-8
    lr_decay: float = 0.9
    lr_decay_every: int = 1000
    dip_noise_max: float = 0.1
    rbp_base: str = "output"  # what the RBP increment is added to: last output c or last input z
    # debugging / verification hooks
    fixed_beta: float | None = None
    freeze_weights: bool = False
    snapshot_every: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not self.n_s > 0:
            raise ValueError("n_s must be positive")
        if not self.beta_max > 0:
            raise ValueError("beta_max must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rbp_base not in ("output", "input"):
            raise ValueError("rbp_base must be 'output' or 'input'")
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ValueError("checkpoint_every needs checkpoint_dir")

    def beta_at(self, n: int) -> float:
        if self.fixed_beta is not None:
            return self.fixed_beta
        return beta(n, self.n_s, self.n_c, self.beta_max)

    def network_config(self) -> UNetConfig:
        return dataclasses.replace(self.unet_config, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["unet_config"] = dataclasses.asdict(self.unet_config)
        return d


def _residual_loss(c: Tensor, geom: ParallelGeometry, atg: np.ndarray, scale: float, delta: float):
    """Huber loss of ``scale * (A^T g - A^T A c)``; also returns ``A^T A c``."""
    shape = c.shape

    def apply(x):
        return normal_op(x.reshape(geom.image_shape), geom).reshape(shape)

    ata_c = ad.linear(c, apply, apply, name="normal_op")
    res = ad.add_const(ad.scale(ata_c, -scale), scale * atg.reshape(shape))
    return ad.huber_loss(res, delta), ata_c.data.reshape(geom.image_shape)


def _check_inputs(sino, geom: ParallelGeometry, config: RbpConfig):
    if isinstance(sino, Sinogram) and sino.geometry != geom:
        raise GeometryError("sinogram was built for a different geometry")
    config.network_config().check_input(geom.image_height, geom.image_width)


def rbp_dip_reconstruct(sino, geom: ParallelGeometry, config: RbpConfig | None = None, ground_truth=None,
                        net: UNet | None = None, resume_from=None):
    """Run RBP-DIP (or the DIP baseline if ``config.mode == 'dip-fixed'``).

    ``net`` overrides the seeded network initialisation.  ``ground_truth`` is
    only read to log SNR.  ``resume_from`` is a checkpoint directory written
    by an earlier run with ``checkpoint_every`` set.
    """
    config = config or RbpConfig()
    _check_inputs(sino, geom, config)
    if config.mode == "dip-fixed":
        return _dip_loop(sino, geom, config, ground_truth, net, resume_from)
    return _rbp_loop(sino, geom, config, ground_truth, net, resume_from)


def dip_reconstruct(sino, geom: ParallelGeometry, config: RbpConfig | None = None, ground_truth=None,
                    net: UNet | None = None, resume_from=None):
    config = config or RbpConfig(mode="dip-fixed")
    if config.mode != "dip-fixed":
        raise ValueError("dip_reconstruct needs mode='dip-fixed'")
    _check_inputs(sino, geom, config)
    return _dip_loop(sino, geom, config, ground_truth, net, resume_from)


@contextmanager
def _diverge_guard(n: int):
    """Turn overflow anywhere in the forward pass into a :class:`DivergenceError`."""
    try:
        with np.errstate(over="raise", invalid="raise"):
            yield
    except FloatingPointError as exc:
        if isinstance(exc, DivergenceError):
            raise
        raise DivergenceError(f"non-finite values at iteration {n}: {exc}") from exc


class _Loop:
    """State shared by both loops: network, optimizer, history, checkpoints."""

    def __init__(self, sino, geom, config: RbpConfig, ground_truth, net, method):
        self.geom = geom
        self.config = config
        self.gt = None if ground_truth is None else np.asarray(ground_truth, dtype=np.float64)
        self.atg = normal_rhs(sino, geom)
        peak = float(np.max(np.abs(self.atg)))
        self.scale = 1.0 / peak if peak > 0 else 1.0
        self.net = net if net is not None else unet_init(config.network_config())
        self.opt = RmsPropState(config.lr, config.rho, config.eps, config.lr_decay, config.lr_decay_every)
        self.run = ReconRun(method)
        self.start = 0

    def step_network(self, loss: Tensor, n: int) -> None:
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite loss at iteration {n}")
        if self.config.freeze_weights:
            return
        ad.backward(loss, self.net.params)
        ad.rmsprop_step(self.net.params, None, self.opt, n)

    def log(self, n, loss, c, r, alpha, b):
        snr = None if self.gt is None else snr_db(c, self.gt)
        self.run.log(IterRecord(n, loss, alpha, b, snr, float(np.linalg.norm(r))))
        every = self.config.snapshot_every
        if every and (n + 1) % every == 0:
            self.run.snapshots[n] = c.copy()

    def maybe_checkpoint(self, n, arrays: dict) -> None:
        every = self.config.checkpoint_every
        if every and (n + 1) % every == 0:
            save_checkpoint(self, n + 1, arrays)


def _rbp_loop(sino, geom, config, ground_truth, net, resume_from):
    loop = _Loop(sino, geom, config, ground_truth, net, "rbp-dip")
    atg = loop.atg
    c = np.zeros(geom.image_shape)
    z = np.zeros(geom.image_shape)
    r = atg - normal_op(c, geom)
    if resume_from is not None:
        arrays = load_checkpoint(loop, resume_from)
        c, z = arrays["c"], arrays["z"]
        r = atg - normal_op(c, geom)

    for n in range(loop.start, config.max_iters):
        try:
            alpha = sd_step_size(r, geom)
        except Converged:
            alpha = 0.0
        except NullSpaceResidual:
            alpha = 0.0
            loop.run.events.append(f"iteration {n}: residual in null space of A, RBP step skipped")
        b = config.beta_at(n)
        base = c if config.rbp_base == "output" else z
        z = base + (alpha * b) * r

        with Tape(), _diverge_guard(n):
            zt = Tensor(z[None])
            ct = ad.add(zt, loop.net(zt))
            loss, ata_c = _residual_loss(ct, geom, atg, loop.scale, config.huber_delta)
        loop.step_network(loss, n)

        c = ct.data[0]
        r = atg - ata_c
        loop.log(n, loss.item(), c, r, alpha, b)
        loop.maybe_checkpoint(n, {"c": c, "z": z})

    loop.run.image = c
    return c, loop.run


def dip_input(shape, seed: int, high: float = 0.1) -> np.ndarray:
    """Fixed network input of the DIP baseline: uniform noise in [0, high]."""
    rng = np.random.default_rng([seed, 1])
    return rng.uniform(0.0, high, size=shape)


def _dip_loop(sino, geom, config, ground_truth, net, resume_from):
    loop = _Loop(sino, geom, config, ground_truth, net, "dip-fixed")
    z = dip_input((1,) + geom.image_shape, config.seed, config.dip_noise_max)
    c = np.zeros(geom.image_shape)
    if resume_from is not None:
        arrays = load_checkpoint(loop, resume_from)
        c, z = arrays["c"], arrays["z"]
    zt = Tensor(z)

    for n in range(loop.start, config.max_iters):
        with Tape(), _diverge_guard(n):
            ct = loop.net(zt)
            loss, ata_c = _residual_loss(ct, geom, loop.atg, loop.scale, config.huber_delta)
        loop.step_network(loss, n)
        c = ct.data[0]
        loop.log(n, loss.item(), c, loop.atg - ata_c, math.nan, math.nan)
        loop.maybe_checkpoint(n, {"c": c, "z": z})

    loop.run.image = c
    return c, loop.run


# ------------------------------------------------------------ checkpoints
#
# <dir>/unet.bin    network weights in the unet blob format
# <dir>/state.npz   c (and z for dip-fixed), RMSProp accumulators, history
# <dir>/state.json  next iteration, method, config


def save_checkpoint(loop: _Loop, next_iter: int, arrays: dict) -> None:
    out = Path(loop.config.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_unet(loop.net, out / "unet.bin")
    recs = loop.run.records
    payload = dict(arrays)
    payload.update({f"acc{i}": a for i, a in enumerate(loop.opt.acc)})
    payload["hist_iter"] = np.array([r.iteration for r in recs], dtype=np.int64)
    payload["hist"] = np.array([[r.loss, r.alpha, r.beta, np.nan if r.snr is None else r.snr, r.residual]
                                for r in recs]).reshape(-1, 5)
    np.savez(out / "state.npz", **payload)
    meta = {"next_iteration": next_iter, "method": loop.run.method, "n_acc": len(loop.opt.acc),
            "config": loop.config.to_dict()}
    (out / "state.json").write_text(json.dumps(meta, indent=1, default=str))


def load_checkpoint(loop: _Loop, path) -> dict:
    path = Path(path)
    meta = json.loads((path / "state.json").read_text())
    if meta["method"] != loop.run.method:
        raise ValueError(f"checkpoint is for {meta['method']}, not {loop.run.method}")
    net = load_unet(path / "unet.bin")
    loop.net.params[:] = net.params
    with np.load(path / "state.npz") as data:
        arrays = {k: data[k] for k in data.files}
    loop.opt.acc = [arrays[f"acc{i}"] for i in range(meta["n_acc"])]
    for it, (loss, alpha, b, s, res) in zip(arrays["hist_iter"], arrays["hist"]):
        loop.run.records.append(IterRecord(int(it), float(loss), float(alpha), float(b),
                                           None if math.isnan(s) else float(s), float(res)))
    loop.start = int(meta["next_iteration"])
    return arrays
