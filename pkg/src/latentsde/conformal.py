"""Split and adaptive conformal intervals plus a simplex-constrained Kelly
allocator.

The interval half-width is the ceil((1-alpha)(n+1)) order statistic of the
absolute calibration residuals; when that index exceeds n the interval is
the whole line (+inf sentinel), which keeps the finite-sample coverage
guarantee for tiny calibration sets. Allocation maximizes w.mu - (gamma/2)
w.Sigma.w over the probability simplex by projected gradient ascent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation

__all__ = [
    "CalibrationSet",
    "PredictionInterval",
    "AllocationProblem",
    "AllocationError",
    "split_quantile",
    "adaptive_quantile",
    "coverage_check",
    "project_simplex",
    "kelly_allocate",
]

DEFAULT_ALPHA = 0.1
DEFAULT_WINDOW = 250
DEFAULT_GAMMA = 5.0


@dataclass
class CalibrationSet:
    residuals: np.ndarray  # absolute residuals |y - yhat|

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=np.float64)
        if self.residuals.size < 1:
            raise ContractViolation("calibration set must be nonempty")
        if np.any(self.residuals < 0):
            raise ContractViolation("residuals must be nonnegative")


@dataclass
class PredictionInterval:
    center: float
    half_width: float
    alpha: float

    def __post_init__(self):
        if self.half_width < 0:
            raise ContractViolation("half_width must be nonnegative")
        if not 0 < self.alpha < 1:
            raise ContractViolation("alpha must lie in (0, 1)")

    def contains(self, y) -> bool:
        return self.center - self.half_width <= y <= self.center + self.half_width


@dataclass
class AllocationProblem:
    mu_hat: np.ndarray  # (P,) point predictions
    sigma_hat: np.ndarray  # (P,) diagonal entries, typically q_p^2
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        self.mu_hat = np.asarray(self.mu_hat, dtype=np.float64)
        self.sigma_hat = np.asarray(self.sigma_hat, dtype=np.float64)
        if self.mu_hat.shape != self.sigma_hat.shape or self.mu_hat.ndim != 1:
            raise ContractViolation("mu_hat and sigma_hat must be equal-length vectors")
        if np.any(self.sigma_hat < 0):
            raise ContractViolation("sigma_hat entries must be nonnegative")
        if self.gamma <= 0:
            raise ContractViolation("gamma must be positive")


class AllocationError(RuntimeError):
    """Projected gradient ascent failed to reach stationarity."""

    def __init__(self, weights, residual):
        super().__init__(f"allocation did not converge (stationarity {residual:.3e})")
        self.weights = weights
        self.residual = residual


def _order_statistic_quantile(residuals, alpha):
    n = len(residuals)
    k = int(np.ceil((1.0 - alpha) * (n + 1)))
    if k > n:
        return np.inf
    return float(np.sort(residuals)[k - 1])


def split_quantile(cal: CalibrationSet, alpha) -> float:
    """ceil((1-alpha)(n+1)) order statistic; +inf when it exceeds n."""
    if not 0 < alpha < 1:
        raise ContractViolation("alpha must lie in (0, 1)")
    return _order_statistic_quantile(cal.residuals, alpha)


def adaptive_quantile(residual_stream, window, alpha):
    """Rolling-window quantile: q[t] uses the last min(t+1, window)
    residuals, with the same order-statistic rule as split_quantile."""
    if window < 1:
        raise ContractViolation("window must be >= 1")
    if not 0 < alpha < 1:
        raise ContractViolation("alpha must lie in (0, 1)")
    r = np.asarray(residual_stream, dtype=np.float64)
    out = np.empty(len(r))
    for t in range(len(r)):
        out[t] = _order_statistic_quantile(r[max(0, t + 1 - window) : t + 1], alpha)
    return out


def coverage_check(intervals, realized) -> float:
    """Fraction of outcomes inside their closed interval."""
    realized = np.asarray(realized, dtype=np.float64)
    if len(intervals) != len(realized):
        raise ContractViolation("intervals and outcomes differ in length")
    hits = sum(1 for iv, y in zip(intervals, realized) if iv.contains(y))
    return hits / len(realized)


def project_simplex(v):
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort and
    threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.max(idx[u - css / idx > 0])
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def kelly_allocate(p: AllocationProblem, tol=1e-8, max_iter=10000):
    """argmax w.mu - (gamma/2) w.diag(sigma).w on the simplex.

    Projected gradient ascent; stationarity is measured as the distance
    between the iterate and the projection of a unit gradient step.
    """
    P = len(p.mu_hat)
    w = np.full(P, 1.0 / P)
    step = 1.0 / max(p.gamma * float(np.max(p.sigma_hat)), 1e-12)
    residual = np.inf
    for _ in range(max_iter):
        grad = p.mu_hat - p.gamma * p.sigma_hat * w
        residual = float(np.linalg.norm(project_simplex(w + grad) - w))
        if residual <= tol:
            return w
        w = project_simplex(w + step * grad)
    raise AllocationError(w, residual)
