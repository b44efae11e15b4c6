"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np

# Returned when the reconstruction equals the ground truth exactly.
PERFECT_SNR = math.inf


def snr(rec, gt) -> float:
    """Amplitude SNR in dB: ``20 log10(||gt|| / ||rec - gt||)``.

    Returns :data:`PERFECT_SNR` (``inf``) when ``rec == gt`` exactly.
    """
    rec = np.asarray(rec, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rec.shape != gt.shape:
        raise ValueError(f"shape mismatch {rec.shape} vs {gt.shape}")
    signal = float(np.linalg.norm(gt))
    if signal == 0.0:
        raise ValueError("ground truth is all zero")
    err = float(np.linalg.norm(rec - gt))
    if err == 0.0:
        return PERFECT_SNR
    return 20.0 * math.log10(signal / err)
