"""Exact linear-programming reference solver for small weighted CQR problems.

Each residual ``y_i - x_i'beta - b_m`` is split into positive and
negative parts ``u+ - u-`` with cost ``w_i * (tau_m u+ + (1-tau_m) u-)``,
which makes the composite check-loss minimization an LP.  Intended as a
correctness anchor on small instances; the smoothed solver is the
production path.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix, hstack, identity

from .model import QuantileGrid, ThetaEstimate, WeightedSample


def lp_cqr_solve(sample: WeightedSample, grid: QuantileGrid) -> tuple[ThetaEstimate, float]:
    """Solve weighted CQR exactly as an LP; returns (theta, optimal objective).

    Variable layout: beta (p), b (M), u+ (n*M), u- (n*M); one equality
    row per (i, m) pair.  Size grows as n*M, so keep instances small.
    """
    n, p, M = sample.n, sample.p, grid.size
    nm = n * M

    # cost: 0 on (beta, b), tau_m on u+, (1 - tau_m) on u-, times w_i
    wt = np.repeat(sample.w, M)
    taus = np.tile(grid.levels, n)
    c = np.concatenate([np.zeros(p + M), wt * taus, wt * (1.0 - taus)])

    # equality rows: x_i'beta + b_m + u+_{im} - u-_{im} = y_i
    rows_x = csr_matrix(np.repeat(sample.X, M, axis=0))
    rows_b = csr_matrix(np.tile(np.eye(M), (n, 1)))
    eye = identity(nm, format="csr")
    a_eq = hstack([rows_x, rows_b, eye, -eye], format="csr")
    b_eq = np.repeat(sample.y, M)

    bounds = [(None, None)] * (p + M) + [(0, None)] * (2 * nm)
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"LP reference solve failed: {res.message}")
    theta = ThetaEstimate(res.x[:p], res.x[p : p + M])
    return theta, float(res.fun)
