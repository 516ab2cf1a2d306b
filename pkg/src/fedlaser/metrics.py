"""Error metrics in years and the relative improvement score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    rmse: float
    sdev: float
    mae: float
    n: int

    def __post_init__(self):
        # mae <= rmse holds exactly in real arithmetic; allow rounding slack
        assert self.mae <= self.rmse * (1 + 1e-12) + 1e-300, (self.mae, self.rmse)


def compute_metrics(pred, true) -> Metrics:
    """RMSE, population std of the signed errors, and MAE."""
    pred = np.asarray(pred, dtype=float).ravel()
    true = np.asarray(true, dtype=float).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions vs {true.size} targets")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    err = pred - true
    scale = float(np.max(np.abs(err)))
    # scaled so tiny errors do not underflow when squared
    rmse = scale * float(np.sqrt(np.mean((err / scale) ** 2))) if scale > 0 else 0.0
    return Metrics(
        rmse=rmse,
        sdev=float(np.std(err)),
        mae=float(np.mean(np.abs(err))),
        n=int(err.size),
    )


def improvement_delta(m_fl: float, m_localized: float) -> float:
    """Percent improvement ``(1 - m_fl / m_localized) * 100``; negative if worse."""
    if m_localized == 0:
        raise ZeroDivisionError("localized metric is zero")
    return (1.0 - m_fl / m_localized) * 100.0
