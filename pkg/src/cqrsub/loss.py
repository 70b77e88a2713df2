"""Check-loss primitives and the weighted composite quantile objective."""
from __future__ import annotations

import numpy as np

from .model import QuantileGrid, ThetaEstimate, WeightedSample


def check_loss(u, tau):
    """Asymmetric absolute loss ``u * (tau - 1{u < 0})``.

    Nonnegative, zero only at ``u = 0``; its minimizer over a sample is
    the ``tau``-quantile.  Accepts scalars or arrays (broadcasting).
    """
    u = np.asarray(u, dtype=np.float64)
    out = u * np.where(u < 0.0, tau - 1.0, tau)
    return out if out.ndim else float(out)


def psi(u, tau):
    """Loss subgradient ``tau - 1{u < 0}``; equals ``tau`` at ``u = 0``."""
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u < 0.0, tau - 1.0, tau)
    return out if out.ndim else float(out)


def residual_matrix(theta: ThetaEstimate, sample: WeightedSample, grid: QuantileGrid) -> np.ndarray:
    """Residuals ``y_i - x_i'beta - b_m`` as an (n, M) matrix."""
    theta.check_dims(sample.p, grid)
    return (sample.y - sample.X @ theta.beta)[:, None] - theta.b[None, :]


def cqr_objective(theta: ThetaEstimate, sample: WeightedSample, grid: QuantileGrid) -> float:
    """Weighted composite check loss ``sum_i w_i sum_m rho_{tau_m}(y_i - x_i'beta - b_m)``.

    Convex in ``theta``.  Importance weights are expected to be folded
    into ``sample.w`` by the caller.
    """
    res = residual_matrix(theta, sample, grid)
    per_obs = check_loss(res, grid.levels[None, :]).sum(axis=1)
    return float(sample.w @ per_obs)
