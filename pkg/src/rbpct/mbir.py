"""Steepest descent on the normal equations ``A^T A c = A^T g``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .history import IterRecord, ReconRun
from .projection import GeometryError, ParallelGeometry, Sinogram, back_project, forward_project, normal_op
from .metrics import snr as snr_db

NormalOperator = Union[ParallelGeometry, Callable[[np.ndarray], np.ndarray]]


class Converged(Exception):
    """The residual is exactly zero; there is nothing left to descend."""


class NullSpaceResidual(Exception):
    """``r != 0`` but ``<r, A^T A r> = 0``: the residual lies in the null space of A."""


def _apply(op: NormalOperator, x: np.ndarray) -> np.ndarray:
    if isinstance(op, ParallelGeometry):
        return normal_op(x, op)
    return op(x)


def sd_step_size(r: np.ndarray, op: NormalOperator) -> float:
    """Exact line-search step ``<r, r> / <r, A^T A r>``.

    ``op`` is either a geometry or any callable applying a normal operator.
    """
    rr = float(np.vdot(r, r))
    if rr == 0.0:
        raise Converged("residual is zero")
    rar = float(np.vdot(r, _apply(op, r)))
    if rar == 0.0:
        raise NullSpaceResidual("residual lies in the null space of the forward operator")
    return rr / rar


@dataclass
class SolverState:
    c: np.ndarray
    r: np.ndarray
    iteration: int = 0


def normal_rhs(sino, geom: ParallelGeometry) -> np.ndarray:
    g = sino.values if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    if g.size == 0:
        raise GeometryError("empty sinogram")
    return back_project(g, geom)


def mbir_reconstruct(sino, geom: ParallelGeometry, max_iters: int = 5000, stop_tol: float = 1e-6,
                     ground_truth=None, snapshot_every: int = 0):
    """Plain steepest descent from ``c = 0`` (no regulariser).

    Stops after ``max_iters`` steps or once ``||r|| / ||A^T g|| <= stop_tol``.
    The logged loss is the data misfit ``||A c - g||_2``, which exact line
    search makes non-increasing; ``||r||_2`` is logged as ``residual`` and
    can rise on individual steps.  ``ground_truth`` only feeds the logged SNR.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if stop_tol < 0:
        raise ValueError("stop_tol must be >= 0")
    g = sino.values if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    atg = normal_rhs(sino, geom)
    ref = float(np.linalg.norm(atg))
    state = SolverState(np.zeros(geom.image_shape), atg - normal_op(np.zeros(geom.image_shape), geom))
    run = ReconRun("mbir")

    for n in range(max_iters):
        try:
            alpha = sd_step_size(state.r, geom)
        except Converged:
            run.status = "converged"
            misfit = float(np.linalg.norm(forward_project(state.c, geom) - g))
            run.log(IterRecord(n, misfit, 0.0, 1.0, _snr(state.c, ground_truth), 0.0))
            break
        except NullSpaceResidual:
            run.status = "null_space"
            run.events.append(f"iteration {n}: residual in null space of A")
            break
        state.c = state.c + alpha * state.r
        ac = forward_project(state.c, geom)
        state.r = atg - back_project(ac, geom)
        state.iteration = n + 1
        res = float(np.linalg.norm(state.r))
        misfit = float(np.linalg.norm(ac - g))
        run.log(IterRecord(n, misfit, alpha, 1.0, _snr(state.c, ground_truth), res))
        if snapshot_every and (n + 1) % snapshot_every == 0:
            run.snapshots[n] = state.c.copy()
        if ref == 0.0 or res / ref <= stop_tol:
            run.status = "converged"
            break

    run.image = state.c
    return state.c, run


def _snr(c, gt):
    if gt is None:
        return None
    return snr_db(c, gt)
