"""Subsampling plans and with-replacement draws over sharded data.

A plan assigns every shard a probability vector and an allocation size.
Probabilities proportional to each observation's score norm, together
with allocations proportional to per-shard score-norm totals, minimize
the trace of the subsampling covariance among all valid plans; the
uniform plan is the baseline comparator.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .data import Shard, ShardedDataset
from .model import QuantileGrid, ThetaEstimate, WeightedSample, _as_readonly

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# score norms


def score_norm(x: np.ndarray, eps: float, grid: QuantileGrid, b: np.ndarray) -> float:
    """Norm of the composite score of one observation.

    With ``psi_m = tau_m - 1{eps < b_m}``, the score stacks the slope
    part ``(sum_m psi_m) * x`` and the intercept part ``(psi_1..psi_M)``;
    the returned value is its Euclidean norm, computed without
    materializing the stacked vector.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if b.size != grid.size:
        raise ValueError("intercept vector must match the grid size")
    psis = grid.levels - (eps < b)
    s = psis.sum()
    return float(np.sqrt(s * s * (x @ x) + psis @ psis))


def shard_score_norms(shard: Shard, theta: ThetaEstimate, grid: QuantileGrid) -> np.ndarray:
    """Vectorized :func:`score_norm` for every row of a shard."""
    theta.check_dims(shard.p, grid)
    eps = shard.y - shard.X @ theta.beta
    if not np.all(np.isfinite(eps)):
        raise ValueError("non-finite residuals in shard")
    psis = grid.levels[None, :] - (eps[:, None] < theta.b[None, :])
    s = psis.sum(axis=1)
    xsq = np.einsum("ij,ij->i", shard.X, shard.X)
    return np.sqrt(s * s * xsq + np.einsum("ij,ij->i", psis, psis))


# ---------------------------------------------------------------------------
# plans


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Apportion ``total`` integer units proportionally to ``weights``.

    Hamilton's method: floor the real quotas, then hand the leftover
    units to the largest fractional remainders, ties broken by
    ascending index.  Guarantees an exact total and |r_k - quota| < 1.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if total < 0:
        raise ValueError("total must be nonnegative")
    if np.any(weights < 0.0) or weights.sum() <= 0.0:
        raise ValueError("weights must be nonnegative with a positive sum")
    quotas = total * weights / weights.sum()
    out = np.floor(quotas).astype(np.int64)
    leftover = int(total - out.sum())
    if leftover > 0:
        order = np.lexsort((np.arange(weights.size), -(quotas - out)))
        out[order[:leftover]] += 1
    return out


@dataclass(frozen=True)
class SubsamplingPlan:
    """Per-shard probability vectors plus allocation sizes summing to ``r``.

    Allocations are integers for plans meant to be drawn from; float
    allocations are accepted so variance formulas can be evaluated at
    exact real-valued optima.
    """

    probabilities: tuple[np.ndarray, ...]
    allocations: np.ndarray
    r: int

    def __post_init__(self):
        probs = tuple(_as_readonly(np.atleast_1d(p)) for p in self.probabilities)
        alloc = np.atleast_1d(np.asarray(self.allocations))
        if alloc.size != len(probs):
            raise ValueError("one allocation per shard required")
        for k, p in enumerate(probs):
            if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
                raise ValueError(f"shard {k}: probabilities must be positive and finite")
            if abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"shard {k}: probabilities must sum to 1 (got {p.sum()!r})")
        if np.any(alloc < 0):
            raise ValueError("allocations must be nonnegative")
        if np.issubdtype(alloc.dtype, np.integer):
            if int(alloc.sum()) != int(self.r):
                raise ValueError("allocations must sum to r exactly")
        else:
            alloc = alloc.astype(np.float64)
            if abs(alloc.sum() - self.r) > 1e-9 * max(1.0, self.r):
                raise ValueError("real-valued allocations must sum to r")
        alloc = alloc.copy()
        alloc.setflags(write=False)
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "allocations", alloc)
        object.__setattr__(self, "r", int(self.r))

    @property
    def k(self) -> int:
        return len(self.probabilities)

    @property
    def is_integral(self) -> bool:
        return bool(np.issubdtype(self.allocations.dtype, np.integer))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "subsampling_plan",
            "r": self.r,
            "shards": [
                {
                    "shard": k,
                    "allocation": self.allocations[k].item(),
                    "probabilities": self.probabilities[k].tolist(),
                }
                for k in range(self.k)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubsamplingPlan":
        if d.get("kind") != "subsampling_plan":
            raise ValueError("not a subsampling plan document")
        entries = sorted(d["shards"], key=lambda e: e["shard"])
        probs = tuple(np.asarray(e["probabilities"], dtype=np.float64) for e in entries)
        alloc = [e["allocation"] for e in entries]
        integral = all(float(a).is_integer() for a in alloc)
        alloc = np.asarray(alloc, dtype=np.int64 if integral else np.float64)
        return cls(probs, alloc, int(d["r"]))


def _normalized(v: np.ndarray) -> np.ndarray:
    p = v / v.sum()
    s = p.sum()
    if abs(s - 1.0) > 1e-12:
        p = p / s
    return p


def lopt_probabilities(shard: Shard, theta: ThetaEstimate, grid: QuantileGrid) -> np.ndarray:
    """Within-shard probabilities proportional to per-row score norms."""
    return _normalized(shard_score_norms(shard, theta, grid))


def lopt_allocations(
    dataset: ShardedDataset,
    theta: ThetaEstimate,
    grid: QuantileGrid,
    r: int,
    integer: bool = True,
) -> np.ndarray:
    """Allocations proportional to per-shard score-norm totals.

    With ``integer=True`` (default) the real-valued proportions are
    rounded by largest remainder so they sum to ``r`` exactly;
    otherwise the exact real values are returned.
    """
    if r <= 0:
        raise ValueError("total subsample size r must be positive")
    totals = np.array([shard_score_norms(s, theta, grid).sum() for s in dataset])
    quotas = r * totals / totals.sum()
    if np.any(quotas < 1.0):
        warnings.warn(
            f"{int((quotas < 1.0).sum())} shard(s) have real-valued allocation < 1; "
            "consider r >= K"
        )
    if not integer:
        return quotas
    alloc = largest_remainder(totals, r)
    if np.any(alloc == 0):
        warnings.warn(
            f"shards {np.flatnonzero(alloc == 0).tolist()} received zero allocation "
            "and will contribute no subsample"
        )
    return alloc


def lopt_plan(
    dataset: ShardedDataset, theta: ThetaEstimate, grid: QuantileGrid, r: int
) -> SubsamplingPlan:
    """Score-norm-proportional probabilities with matching allocations."""
    probs = tuple(lopt_probabilities(s, theta, grid) for s in dataset)
    return SubsamplingPlan(probs, lopt_allocations(dataset, theta, grid, r), r)


def uniform_plan(dataset: ShardedDataset, r: int) -> SubsamplingPlan:
    """Uniform within-shard probabilities, allocations proportional to shard sizes."""
    if r < 1:
        raise ValueError("total subsample size r must be positive")
    sizes = dataset.shard_sizes
    probs = tuple(np.full(n, 1.0 / n) for n in sizes)
    alloc = largest_remainder(sizes.astype(np.float64), r)
    if np.any(alloc == 0):
        warnings.warn(
            f"shards {np.flatnonzero(alloc == 0).tolist()} received zero allocation "
            "and will contribute no subsample"
        )
    return SubsamplingPlan(probs, alloc, r)


# ---------------------------------------------------------------------------
# draws


class AliasTable:
    """Walker/Vose alias table: O(n) build, O(1) per categorical draw."""

    __slots__ = ("q", "alias", "n")

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        n = probs.size
        scaled = probs * n / probs.sum()
        alias = np.zeros(n, dtype=np.int64)
        q = np.ones(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        scaled = scaled.copy()
        while small and large:
            s = small.pop()
            l = large.pop()
            q[s] = scaled[s]
            alias[s] = l
            scaled[l] -= 1.0 - scaled[s]
            (small if scaled[l] < 1.0 else large).append(l)
        for i in small + large:
            q[i] = 1.0
        self.q, self.alias, self.n = q, alias, n

    def sample(self, rng: Generator, size: int) -> np.ndarray:
        j = rng.integers(0, self.n, size=size)
        keep = rng.random(size) < self.q[j]
        return np.where(keep, j, self.alias[j])


def _seed_sequence(seed) -> SeedSequence:
    return seed if isinstance(seed, SeedSequence) else SeedSequence(seed)


@dataclass(frozen=True)
class SubsampleDraw:
    """With-replacement draw from a plan: row indices and their probabilities.

    ``indices[k]`` are the provenance rows into shard ``k`` (duplicates
    allowed); ``pi_star[k]`` the matching plan probabilities.  ``r`` is
    the plan's total budget, used in the importance weights
    ``r / (r_k * pi*)``.
    """

    indices: tuple[np.ndarray, ...]
    pi_star: tuple[np.ndarray, ...]
    r: int
    seed_entropy: tuple[int, ...]
    seed_spawn_key: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def allocations(self) -> np.ndarray:
        return np.array([idx.size for idx in self.indices], dtype=np.int64)

    def weighted_sample(self, dataset: ShardedDataset) -> WeightedSample:
        """Stack drawn rows into one sample with folded importance weights."""
        ys, xs, ws = [], [], []
        for k, shard in enumerate(dataset):
            idx = self.indices[k]
            if idx.size == 0:
                continue
            ys.append(shard.y[idx])
            xs.append(shard.X[idx])
            ws.append(self.r / (idx.size * self.pi_star[k]))
        return WeightedSample(np.concatenate(ys), np.vstack(xs), np.concatenate(ws))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "subsample_draw",
            "r": self.r,
            "seed_entropy": list(self.seed_entropy),
            "seed_spawn_key": list(self.seed_spawn_key),
            "shards": [
                {
                    "shard": k,
                    "rows": self.indices[k].tolist(),
                    "probabilities": self.pi_star[k].tolist(),
                }
                for k in range(self.k)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubsampleDraw":
        if d.get("kind") != "subsample_draw":
            raise ValueError("not a subsample draw document")
        entries = sorted(d["shards"], key=lambda e: e["shard"])
        return cls(
            tuple(np.asarray(e["rows"], dtype=np.int64) for e in entries),
            tuple(np.asarray(e["probabilities"], dtype=np.float64) for e in entries),
            int(d["r"]),
            tuple(d.get("seed_entropy", ())),
            tuple(d.get("seed_spawn_key", ())),
        )


class PlanSampler:
    """Reusable sampler for one (dataset, plan) pair.

    Alias tables are built once per shard; each call to :meth:`draw`
    derives per-shard generators from the given seed, so draws are
    reproducible and independent across seeds.
    """

    def __init__(self, dataset: ShardedDataset, plan: SubsamplingPlan):
        if plan.k != dataset.k:
            raise ValueError("plan and dataset have different shard counts")
        for k, shard in enumerate(dataset):
            if plan.probabilities[k].size != shard.n:
                raise ValueError(f"shard {k}: plan probabilities do not match shard size")
        if not plan.is_integral:
            raise ValueError("drawing requires integer allocations")
        self.dataset = dataset
        self.plan = plan
        self._tables = [AliasTable(p) if a > 0 else None
                        for p, a in zip(plan.probabilities, plan.allocations)]

    def draw(self, seed) -> SubsampleDraw:
        ss = _seed_sequence(seed)
        children = ss.spawn(self.dataset.k)
        indices, pis = [], []
        for k in range(self.dataset.k):
            r_k = int(self.plan.allocations[k])
            if r_k == 0:
                indices.append(np.empty(0, dtype=np.int64))
                pis.append(np.empty(0))
                continue
            rng = Generator(Philox(children[k]))
            idx = self._tables[k].sample(rng, r_k)
            indices.append(idx)
            pis.append(self.plan.probabilities[k][idx])
        entropy = ss.entropy if isinstance(ss.entropy, (list, tuple)) else (ss.entropy,)
        return SubsampleDraw(
            tuple(indices), tuple(pis), self.plan.r,
            tuple(int(e) for e in entropy), tuple(int(s) for s in ss.spawn_key),
        )


def draw_subsample(dataset: ShardedDataset, plan: SubsamplingPlan, rng_seed) -> SubsampleDraw:
    """One with-replacement draw of ``plan.allocations[k]`` rows per shard."""
    return PlanSampler(dataset, plan).draw(rng_seed)
