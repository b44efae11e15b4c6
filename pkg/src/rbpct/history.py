"""Per-iteration records shared by every solver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class IterRecord:
    iteration: int
    loss: float
    alpha: float = math.nan
    beta: float = math.nan
    snr: float | None = None
    # norm of the normal-equation residual A^T g - A^T A c
    residual: float = math.nan


@dataclass
class ReconRun:
    method: str
    records: list[IterRecord] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    image: np.ndarray | None = None
    status: str = "max_iters"
    events: list[str] = field(default_factory=list)

    def log(self, rec: IterRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration records must be strictly increasing")
        if not math.isfinite(rec.loss):
            raise ValueError(f"non-finite loss at iteration {rec.iteration}")
        self.records.append(rec)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def betas(self) -> np.ndarray:
        return np.array([r.beta for r in self.records])

    @property
    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    @property
    def snrs(self) -> np.ndarray:
        return np.array([np.nan if r.snr is None else r.snr for r in self.records])

    @property
    def residuals(self) -> np.ndarray:
        return np.array([r.residual for r in self.records])

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else math.nan

    def to_csv(self, path) -> None:
        """Loss/SNR curve; ``ln_loss`` mirrors the log-scale loss plots."""
        with open(path, "w") as fh:
            fh.write("# rbpct curve csv v1\n")
            fh.write("iteration,loss,ln_loss,residual,alpha,beta,snr_db\n")
            for r in self.records:
                ln = math.log(r.loss) if r.loss > 0 else -math.inf
                snr = "" if r.snr is None else repr(r.snr)
                fh.write(f"{r.iteration},{r.loss!r},{ln!r},{r.residual!r},{r.alpha!r},{r.beta!r},{snr}\n")
