"""Finite-sample variance and curvature matrices for testing.

These evaluate, for a known reference parameter, the exact finite sums
behind the subsampling covariance (``v_pi_matrix``) and the curvature
matrix that requires error-density values (``e_n_matrix``).  They are
test-facing: production estimation never knows the true parameter or
the density, so nothing here sits on the CLI's default path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ShardedDataset
from .model import QuantileGrid, ThetaEstimate
from .sampling import SubsamplingPlan


def _score_rows(shard, theta: ThetaEstimate, grid: QuantileGrid) -> np.ndarray:
    """Stacked score of every row: ``((sum_m psi_m) x', psi_1..psi_M)``."""
    eps = shard.y - shard.X @ theta.beta
    psis = grid.levels[None, :] - (eps[:, None] < theta.b[None, :])
    return np.hstack([psis.sum(axis=1)[:, None] * shard.X, psis])


@dataclass(frozen=True)
class VpiMatrix:
    """Subsampling covariance component with its provenance."""

    matrix: np.ndarray
    plan: SubsamplingPlan
    theta0: ThetaEstimate

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        scale = max(1.0, np.abs(m).max())
        if not np.allclose(m, m.T, rtol=0, atol=1e-12 * scale):
            raise ValueError("V_pi must be symmetric")
        if np.linalg.eigvalsh(m).min() < -1e-10 * scale:
            raise ValueError("V_pi must be nonnegative definite")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def v_pi_matrix(
    dataset: ShardedDataset,
    plan: SubsamplingPlan,
    theta0: ThetaEstimate,
    grid: QuantileGrid,
) -> VpiMatrix:
    """Exact finite-sum covariance component of the weighted subsample score.

    ``(1/n^2) sum_k (r/r_k) sum_i (score_i score_i') / pi_ik``; real-valued
    allocations are accepted so the value can be taken at exact optima.
    Every allocation must be positive (the ``r/r_k`` factor is undefined
    otherwise) and every probability nonzero.
    """
    if plan.k != dataset.k:
        raise ValueError("plan and dataset have different shard counts")
    if np.any(np.asarray(plan.allocations, dtype=np.float64) <= 0.0):
        raise ValueError("v_pi_matrix requires strictly positive allocations")
    n = dataset.n
    dim = dataset.p + grid.size
    acc = np.zeros((dim, dim))
    for k, shard in enumerate(dataset):
        pi = plan.probabilities[k]
        if pi.size != shard.n:
            raise ValueError(f"shard {k}: plan does not match shard size")
        g = _score_rows(shard, theta0, grid)
        acc += (plan.r / float(plan.allocations[k])) * (g.T @ (g / pi[:, None]))
    acc /= n * n
    return VpiMatrix(0.5 * (acc + acc.T), plan, theta0)


def v_pi_trace(
    dataset: ShardedDataset,
    plan: SubsamplingPlan,
    theta0: ThetaEstimate,
    grid: QuantileGrid,
) -> float:
    """Trace of :func:`v_pi_matrix` via the factorized norm form.

    ``(1/n^2) sum_k (r/r_k) sum_i ||score_i||^2 / pi_ik`` -- cheaper than
    building the matrix, and an independent cross-check of it.
    """
    if np.any(np.asarray(plan.allocations, dtype=np.float64) <= 0.0):
        raise ValueError("v_pi_trace requires strictly positive allocations")
    total = 0.0
    for k, shard in enumerate(dataset):
        g = _score_rows(shard, theta0, grid)
        norms_sq = np.einsum("ij,ij->i", g, g)
        total += (plan.r / float(plan.allocations[k])) * float(
            (norms_sq / plan.probabilities[k]).sum()
        )
    return total / dataset.n ** 2


def v_pi_trace_lower_bound(
    dataset: ShardedDataset, theta0: ThetaEstimate, grid: QuantileGrid
) -> float:
    """Smallest achievable trace over all valid plans.

    Two Cauchy-Schwarz steps (within shards over probabilities, across
    shards over allocations) give ``(1/n^2) (sum_k sum_i ||score_i||)^2``,
    attained exactly at score-proportional probabilities with
    real-valued score-proportional allocations.  Note the bound does
    not depend on the budget r: the r/r_k factors cancel at the optimum.
    """
    total = 0.0
    for shard in dataset:
        g = _score_rows(shard, theta0, grid)
        total += float(np.sqrt(np.einsum("ij,ij->i", g, g)).sum())
    return (total / dataset.n) ** 2


def e_n_matrix(dataset: ShardedDataset, grid: QuantileGrid, density_at_b) -> np.ndarray:
    """Curvature matrix ``(1/n) sum_{k,i,m} f_m x~_{im} x~_{im}'``.

    ``density_at_b[m]`` is the error density at the m-th true intercept;
    all values must be positive and finite.  Exploits the block
    structure (slope block, slope-intercept cross terms, diagonal
    intercept block) instead of materializing stacked vectors.
    """
    f = np.atleast_1d(np.asarray(density_at_b, dtype=np.float64))
    if f.size != grid.size:
        raise ValueError("need one density value per quantile level")
    if np.any(f <= 0.0) or not np.all(np.isfinite(f)):
        raise ValueError("density values must be positive and finite")
    n, p, m = dataset.n, dataset.p, grid.size
    sxx = np.zeros((p, p))
    xsum = np.zeros(p)
    for shard in dataset:
        sxx += shard.X.T @ shard.X
        xsum += shard.X.sum(axis=0)
    out = np.zeros((p + m, p + m))
    out[:p, :p] = f.sum() * sxx
    out[:p, p:] = np.outer(xsum, f)
    out[p:, :p] = out[:p, p:].T
    out[p:, p:] = n * np.diag(f)
    return out / n
