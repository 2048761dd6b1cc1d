"""Forecast evaluation: RMSE, rank information coefficient, directional
accuracy, and weighted R^2."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .autodiff import ContractViolation

__all__ = ["MetricsReport", "evaluate"]


@dataclass
class MetricsReport:
    rmse: float
    rank_ic: float
    dir_acc: float
    weighted_r2: float
    n_test: int
    rank_ic_degenerate: bool = False  # a constant series makes rank-IC undefined

    def as_dict(self):
        return {
            "rmse": self.rmse,
            "rank_ic": self.rank_ic,
            "dir_acc": self.dir_acc,
            "weighted_r2": self.weighted_r2,
            "n_test": self.n_test,
            "rank_ic_degenerate": self.rank_ic_degenerate,
        }


def evaluate(y_hat, y, center=0.0, weights=None) -> MetricsReport:
    """Score predictions against realized targets.

    Rank IC is the Spearman correlation with average ranks on ties; if
    either series is constant it is reported as 0.0 with the degenerate
    flag set. Directional accuracy compares the sign of (value - center),
    where the center should be the training-target mean. Weighted R^2 is
    1 - sum(w (y - y_hat)^2) / sum(w y^2) with unit weights by default.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if y_hat.shape != y.shape or y.size == 0:
        raise ContractViolation("predictions and targets must be nonempty and aligned")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape or np.any(w < 0):
        raise ContractViolation("weights must be nonnegative and aligned with targets")

    rmse = float(np.sqrt(np.mean((y - y_hat) ** 2)))

    degenerate = np.ptp(y_hat) == 0.0 or np.ptp(y) == 0.0
    if degenerate:
        rank_ic = 0.0
    else:
        rank_ic = float(stats.spearmanr(y_hat, y).statistic)

    dir_acc = float(np.mean(np.sign(y_hat - center) == np.sign(y - center)))

    denom = float(np.sum(w * y * y))
    if denom == 0.0:
        weighted_r2 = 0.0
    else:
        weighted_r2 = 1.0 - float(np.sum(w * (y - y_hat) ** 2)) / denom

    return MetricsReport(rmse=rmse, rank_ic=rank_ic, dir_acc=dir_acc,
                         weighted_r2=weighted_r2, n_test=int(y.size),
                         rank_ic_degenerate=bool(degenerate))
