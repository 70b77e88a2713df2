"""Weighted composite quantile regression solver.

The exact objective is piecewise linear, so the solver minimizes a
smoothed surrogate: each check loss is replaced by its Huberized
version (quadratic inside a band of half-width ``h``, exact outside)
and ``h`` is annealed downward, warm-starting each stage at the
previous solution, until the exact objective stabilizes.
"""
from __future__ import annotations

import warnings
from typing import Iterator

import numpy as np
from scipy.linalg.lapack import dpstrf
from scipy.optimize import minimize

from .loss import cqr_objective
from .model import QuantileGrid, ThetaEstimate, WeightedSample


class SolverError(RuntimeError):
    """Raised when the minimizer cannot be located within tolerance."""


class SingularDesignError(ValueError):
    """Raised when the covariate design is rank deficient."""


class SingularDesignWarning(UserWarning):
    """Emitted when a rank-deficient design is solved in fallback mode."""


def smoothed_check_loss(u, tau, h):
    """Huberized check loss: quadratic on ``|u| < h``, exact check loss outside."""
    u = np.asarray(u, dtype=np.float64)
    inside = np.abs(u) < h
    out = (tau - 0.5) * u + np.where(
        inside, 0.25 * u * u / h + 0.25 * h, 0.5 * np.abs(u)
    )
    return out


def smoothed_psi(u, tau, h):
    """Derivative of :func:`smoothed_check_loss` in ``u``."""
    u = np.asarray(u, dtype=np.float64)
    return (tau - 0.5) + 0.5 * np.clip(u / h, -1.0, 1.0)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, tau) -> np.ndarray:
    """Left-continuous weighted quantile: smallest v with F_w(v) >= tau."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    targets = np.atleast_1d(np.asarray(tau, dtype=np.float64)) * cw[-1]
    idx = np.searchsorted(cw, targets - 1e-12 * cw[-1], side="left")
    idx = np.minimum(idx, v.size - 1)
    out = v[idx]
    return out if np.ndim(tau) else float(out[0])


def _design_rank(X: np.ndarray, w: np.ndarray) -> tuple[int, np.ndarray]:
    """Rank of the weighted, centered design via pivoted Cholesky of X'WX.

    Centering removes the implicit constant direction (absorbed by the
    per-level intercepts), so a constant or constant-collinear covariate
    shows up as a lost pivot.  Returns (rank, pivot order, 0-based).
    """
    wn = w / w.sum()
    xbar = wn @ X
    Xc = (X - xbar) * np.sqrt(wn)[:, None]
    G = Xc.T @ Xc
    scale = np.max(np.abs(np.diag(G))) if G.size else 0.0
    if scale <= 0.0:
        return 0, np.arange(X.shape[1])
    _, piv, rank, _ = dpstrf(G, lower=1, tol=1e-12 * scale)
    return int(rank), np.asarray(piv, dtype=int) - 1


def wls_init(sample: WeightedSample, grid: QuantileGrid) -> ThetaEstimate:
    """Default start: weighted least-squares slopes, weighted residual quantiles."""
    X, y, w = sample.X, sample.y, sample.w
    A = np.column_stack([X, np.ones(sample.n)])
    Aw = A * w[:, None]
    coef, *_ = np.linalg.lstsq(Aw.T @ A, Aw.T @ y, rcond=None)
    beta = coef[:-1]
    resid = y - X @ beta
    b = weighted_quantile(resid, w, grid.levels)
    return ThetaEstimate(beta, np.atleast_1d(b))


_H_FLOOR = 1e-12


def _anneal_schedule(h_init: float, h_final: float, factor: float) -> Iterator[float]:
    """Bandwidths from h_init down to h_final, then onward to the hard floor.

    Stages below ``h_final`` are a safety extension: the caller breaks
    out as soon as the exact objective stabilizes, so they only run
    when the nominal schedule was not yet converged.
    """
    h = h_init
    while True:
        yield h
        if h <= _H_FLOOR:
            return
        h = max(h / factor, h_final if h > h_final * (1.0 + 1e-12) else _H_FLOOR)


def solve_weighted_cqr(
    sample: WeightedSample,
    grid: QuantileGrid,
    init: ThetaEstimate | None = None,
    tol_obj: float = 1e-8,
    tol_param: float = 1e-9,
    max_iter: int = 500,
    h_init: float | None = None,
    h_final: float = 1e-6,
    anneal_factor: float = 10.0,
    allow_singular: bool = False,
) -> ThetaEstimate:
    """Minimize the weighted composite check loss over (beta, b).

    Parameters
    ----------
    sample : WeightedSample
        Responses, covariates and positive importance weights.
    grid : QuantileGrid
        Quantile levels; one intercept is fit per level, returned in
        grid order.
    init : ThetaEstimate, optional
        Warm start.  Defaults to the weighted least-squares fit with
        weighted residual quantiles as intercepts.
    tol_obj, tol_param : float
        Relative stopping tolerances on the exact objective and on the
        parameter change between annealing stages.
    max_iter : int
        Total quasi-Newton iteration budget across all stages; a
        :class:`SolverError` is raised if it is exhausted before the
        objective stabilizes.
    h_init, h_final, anneal_factor : float
        Smoothing bandwidth schedule.  ``h_init=None`` picks
        ``max(1, MAD of initial residuals)``.
    allow_singular : bool
        On a rank-deficient design, drop redundant covariates (their
        slopes are returned as zero) and warn instead of raising.

    Returns
    -------
    ThetaEstimate
        A minimizer of :func:`cqr_objective` to within ``tol_obj``
        (the minimizer itself may be non-unique).
    """
    if sample.n * grid.size < sample.p + grid.size:
        warnings.warn(
            "sample may be too small to identify all parameters "
            f"(n*M = {sample.n * grid.size} < p+M = {sample.p + grid.size})"
        )

    rank, piv = _design_rank(sample.X, sample.w)
    keep = np.arange(sample.p)
    if rank < sample.p:
        if not allow_singular:
            raise SingularDesignError(
                f"covariate design has rank {rank} < {sample.p}; pass "
                "allow_singular=True to drop redundant columns"
            )
        keep = np.sort(piv[:rank])
        warnings.warn(
            f"rank-deficient design: fitting {rank} of {sample.p} covariates, "
            f"zeroing slopes {sorted(set(range(sample.p)) - set(keep))}",
            SingularDesignWarning,
        )
        sub = WeightedSample(sample.y, sample.X[:, keep], sample.w)
        theta_sub = solve_weighted_cqr(
            sub, grid,
            init=None if init is None else ThetaEstimate(init.beta[keep], init.b),
            tol_obj=tol_obj, tol_param=tol_param, max_iter=max_iter,
            h_init=h_init, h_final=h_final, anneal_factor=anneal_factor,
        )
        beta = np.zeros(sample.p)
        beta[keep] = theta_sub.beta
        return ThetaEstimate(beta, theta_sub.b)

    theta0 = wls_init(sample, grid) if init is None else init
    theta0.check_dims(sample.p, grid)

    X, y = sample.X, sample.y
    # Normalizing the weighted objective to a per-term average keeps
    # gradients O(1) regardless of weight scale; the minimizer is unchanged.
    w = sample.w / sample.w.sum()
    p, M = sample.p, grid.size
    scale = 1.0 / M
    tau_c = (grid.levels - 0.5) * scale
    tau_sum = float(tau_c.sum())
    w_col = w[:, None]

    # loss and gradient share c = clip(res/h, -1, 1): per term,
    # loss = (tau - 1/2) res + res c / 2 - h c^2 / 4 + h / 4 and
    # dloss/dres = (tau - 1/2) + c / 2, covering both branches of the
    # Huberized check loss at once (w is normalized, so sum w = 1).
    # Buffers are reused across the serial quasi-Newton evaluations.
    res = np.empty((sample.n, M))
    c = np.empty_like(res)
    tmp = np.empty_like(res)

    def fg(vec: np.ndarray):
        beta, b = vec[:p], vec[p:]
        np.subtract((y - X @ beta)[:, None], b[None, :], out=res)
        np.multiply(res, 1.0 / h, out=c)
        np.clip(c, -1.0, 1.0, out=c)
        np.multiply(w_col, res, out=tmp)  # w-weighted residuals
        loss = float((tmp @ tau_c).sum())
        np.multiply(tmp, c, out=tmp)
        loss += 0.5 * scale * float(tmp.sum())
        np.multiply(c, c, out=tmp)
        loss += 0.25 * h * scale * (M - float(w @ tmp.sum(axis=1)))
        np.multiply(w_col, c, out=tmp)  # w-weighted clipped scores
        gb = -X.T @ (w * tau_sum + 0.5 * scale * tmp.sum(axis=1))
        gint = -(tau_c + 0.5 * scale * tmp.sum(axis=0))
        return loss, np.concatenate([gb, gint])

    if h_init is None:
        e = y - X @ theta0.beta
        mad = 1.4826 * np.median(np.abs(e - np.median(e)))
        h_init = max(1.0, float(mad))

    if h_final > h_init:
        raise ValueError("h_final must not exceed h_init")
    if anneal_factor <= 1.0:
        raise ValueError("anneal_factor must exceed 1")

    vec = theta0.stacked()
    budget = max_iter
    prev_obj = cqr_objective(theta0, sample, grid)
    stabilized = False
    for h in _anneal_schedule(h_init, h_final, anneal_factor):
        if budget <= 0:
            break
        opt = minimize(
            fg, vec, jac=True, method="L-BFGS-B",
            options={"maxiter": min(budget, 200), "ftol": 1e-14, "gtol": 1e-10},
        )
        budget -= max(opt.nit, 1)
        step = np.max(np.abs(opt.x - vec))
        vec = opt.x
        obj = cqr_objective(ThetaEstimate.from_stacked(vec, p), sample, grid)
        obj_settled = abs(obj - prev_obj) <= tol_obj * max(1.0, abs(obj))
        param_settled = step <= tol_param * max(1.0, np.max(np.abs(vec)))
        prev_obj = obj
        if h <= h_final * (1.0 + 1e-12) and (obj_settled or param_settled):
            stabilized = True
            break

    if not stabilized:
        raise SolverError(
            f"weighted CQR solve did not converge within {max_iter} iterations "
            f"(last exact objective {prev_obj:.6g})"
        )
    return ThetaEstimate.from_stacked(vec, p)
