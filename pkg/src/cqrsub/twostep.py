"""Two-step subsample estimation and multi-draw inference.

Step 1 fits a pilot on a small uniform subsample; step 2 builds the
score-norm-proportional plan at the pilot, draws once, and solves the
importance-weighted problem.  For inference, B independent draws from
the same plan are averaged and their spread yields a covariance
estimate with normal-quantile confidence intervals, avoiding any
density estimation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.random import SeedSequence
from scipy.stats import norm

from .data import ShardedDataset
from .model import QuantileGrid, ThetaEstimate
from .sampling import PlanSampler, SubsamplingPlan, draw_subsample, lopt_plan, uniform_plan
from .solver import SolverError, solve_weighted_cqr

# Streams derived from one master seed: 0 is the pilot draw, 1 + j is
# the j-th estimation draw.  Fixed so reruns are bit-reproducible.
_PILOT_STREAM = 0


def _stream(seed, stream_id: int) -> SeedSequence:
    if isinstance(seed, SeedSequence):
        return SeedSequence(entropy=seed.entropy, spawn_key=(*seed.spawn_key, stream_id))
    return SeedSequence(entropy=seed, spawn_key=(stream_id,))


_DEFAULT_SOLVER_OPTIONS = {"max_iter": 2000}


def _solve(sample, grid, stage: str, **options) -> ThetaEstimate:
    opts = {**_DEFAULT_SOLVER_OPTIONS, **options}
    try:
        return solve_weighted_cqr(sample, grid, **opts)
    except (SolverError, ValueError) as exc:
        raise type(exc)(f"{stage}: {exc}") from exc


def pilot_estimate(
    dataset: ShardedDataset,
    r0: int,
    grid: QuantileGrid,
    rng_seed,
    solver_options: dict | None = None,
) -> ThetaEstimate:
    """Uniform-subsample fit of total size ``r0`` used to seed the optimal plan."""
    floor = 5 * (dataset.p + grid.size)
    if r0 < floor:
        warnings.warn(f"pilot size r0={r0} below the recommended floor {floor}")
    plan = uniform_plan(dataset, r0)
    draw = draw_subsample(dataset, plan, _stream(rng_seed, _PILOT_STREAM))
    return _solve(draw.weighted_sample(dataset), grid, "pilot", **(solver_options or {}))


def uniform_estimate(
    dataset: ShardedDataset,
    r: int,
    grid: QuantileGrid,
    rng_seed,
    init: ThetaEstimate | None = None,
    solver_options: dict | None = None,
) -> ThetaEstimate:
    """Single-draw estimator under the uniform plan (baseline comparator)."""
    plan = uniform_plan(dataset, r)
    draw = draw_subsample(dataset, plan, _stream(rng_seed, 1))
    return _solve(
        draw.weighted_sample(dataset), grid, "uniform", init=init, **(solver_options or {})
    )


def two_step_estimate(
    dataset: ShardedDataset,
    r0: int,
    r: int,
    grid: QuantileGrid,
    rng_seed,
    solver_options: dict | None = None,
) -> ThetaEstimate:
    """Pilot, optimal plan at the pilot, one draw, one weighted solve."""
    if r < 1:
        raise ValueError("r must be positive")
    opts = solver_options or {}
    pilot = pilot_estimate(dataset, r0, grid, rng_seed, solver_options=opts)
    plan = lopt_plan(dataset, pilot, grid, r)
    draw = draw_subsample(dataset, plan, _stream(rng_seed, 1))
    return _solve(draw.weighted_sample(dataset), grid, "optimal-subsample", init=pilot, **opts)


def effective_sample_ratio(plan: SubsamplingPlan, B: int) -> float:
    """Duplicate-draw correction for the multi-draw covariance estimate.

    Averages ``1 - (r_k B - 1)/2 * sum_i pi_ik^2`` over shards and
    clamps the result into (0, 1]; values at or below zero (possible
    under extreme plans) are floored at 1e-6 with a warning.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    terms = [
        1.0 - (float(rk) * B - 1.0) / 2.0 * float(p @ p)
        for rk, p in zip(plan.allocations, plan.probabilities)
    ]
    value = float(np.mean(terms))
    if value <= 0.0:
        warnings.warn(
            f"effective subsample ratio {value:.3g} <= 0; flooring at 1e-6 "
            "(covariance estimate will be unreliable)"
        )
        return 1e-6
    return min(value, 1.0)


@dataclass(frozen=True)
class CombinedEstimate:
    """Average of B per-draw estimates with its estimated covariance."""

    theta_L: ThetaEstimate
    per_draw: tuple[ThetaEstimate, ...]
    omega_hat: np.ndarray
    r_ef: float
    B: int
    r0: int
    r: int
    seed_entropy: tuple[int, ...] = ()
    method: str = "lopt"

    def __post_init__(self):
        stacked = np.vstack([t.stacked() for t in self.per_draw])
        if not np.allclose(self.theta_L.stacked(), stacked.mean(axis=0), rtol=0, atol=1e-12):
            raise ValueError("theta_L must be the elementwise mean of the per-draw estimates")
        om = np.asarray(self.omega_hat, dtype=np.float64)
        if om.shape != (stacked.shape[1], stacked.shape[1]):
            raise ValueError("omega_hat has the wrong shape")
        if not np.allclose(om, om.T, rtol=0, atol=1e-12 * max(1.0, np.abs(om).max())):
            raise ValueError("omega_hat must be symmetric")
        if self.B >= 2 and np.linalg.eigvalsh(om).min() < -1e-10 * max(1.0, np.abs(om).max()):
            raise ValueError("omega_hat must be positive semidefinite")
        om = om.copy()
        om.setflags(write=False)
        object.__setattr__(self, "omega_hat", om)

    @property
    def p(self) -> int:
        return self.theta_L.p

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": "combined_estimate",
            "method": self.method,
            "r0": self.r0,
            "r": self.r,
            "B": self.B,
            "r_ef": self.r_ef,
            "seed_entropy": list(self.seed_entropy),
            "theta_L": {"beta": self.theta_L.beta.tolist(), "b": self.theta_L.b.tolist()},
            "per_draw": [
                {"beta": t.beta.tolist(), "b": t.b.tolist()} for t in self.per_draw
            ],
            "omega_hat": self.omega_hat.tolist(),
        }


def combine_draws(
    estimates: list[ThetaEstimate] | tuple[ThetaEstimate, ...], r_ef: float
) -> tuple[ThetaEstimate, np.ndarray]:
    """Mean estimate and covariance ``sum (theta_j - mean)^x2 / (r_ef B (B-1))``."""
    b_count = len(estimates)
    if b_count < 2:
        raise ValueError("need at least two draws to combine")
    stacked = np.vstack([t.stacked() for t in estimates])
    mean = stacked.mean(axis=0)
    dev = stacked - mean
    omega = dev.T @ dev / (r_ef * b_count * (b_count - 1))
    omega = 0.5 * (omega + omega.T)
    return ThetaEstimate.from_stacked(mean, estimates[0].p), omega


def multi_draw_estimate(
    dataset: ShardedDataset,
    r0: int,
    r: int,
    B: int,
    grid: QuantileGrid,
    rng_seed,
    method: str = "lopt",
    solver_options: dict | None = None,
) -> CombinedEstimate:
    """B independent draws from one plan, combined with a covariance estimate.

    One pilot is fit (for ``method="lopt"``) and its plan is reused for
    all draws; per-draw RNG streams are keyed by draw index, so results
    do not depend on evaluation order.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    if method not in ("lopt", "uniform"):
        raise ValueError("method must be 'lopt' or 'uniform'")
    opts = solver_options or {}
    if method == "lopt":
        pilot = pilot_estimate(dataset, r0, grid, rng_seed, solver_options=opts)
        plan = lopt_plan(dataset, pilot, grid, r)
    else:
        pilot = None
        plan = uniform_plan(dataset, r)

    sampler = PlanSampler(dataset, plan)
    estimates = []
    for j in range(B):
        draw = sampler.draw(_stream(rng_seed, 1 + j))
        estimates.append(
            _solve(draw.weighted_sample(dataset), grid, f"draw {j}", init=pilot, **opts)
        )
    r_ef = effective_sample_ratio(plan, B)
    theta_l, omega = combine_draws(estimates, r_ef)
    seed = _stream(rng_seed, 0)
    entropy = seed.entropy if isinstance(seed.entropy, (list, tuple)) else (seed.entropy,)
    return CombinedEstimate(
        theta_l, tuple(estimates), omega, r_ef, B, r0 if method == "lopt" else 0, r,
        seed_entropy=tuple(int(e) for e in entropy), method=method,
    )


@dataclass(frozen=True)
class ConfidenceIntervals:
    """Symmetric per-coordinate normal-quantile intervals."""

    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    z: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "z": self.z,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
        }


def confidence_intervals(est: CombinedEstimate, alpha: float = 0.05) -> ConfidenceIntervals:
    """Per-coordinate intervals ``theta_s +- sqrt(omega_ss) z_{1-alpha/2}``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    diag = np.diag(est.omega_hat).copy()
    if np.any(diag < 0.0):
        raise ValueError("omega_hat has a negative diagonal entry")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    half = z * np.sqrt(diag)
    center = est.theta_L.stacked()
    return ConfidenceIntervals(center - half, center + half, alpha, z)
