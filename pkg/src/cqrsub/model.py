"""Domain types shared across the package.

A composite quantile regression fit is parameterized by a slope vector
``beta`` (one coefficient per covariate) and an intercept vector ``b``
(one intercept per quantile level).  Quantile levels live in a
:class:`QuantileGrid`; estimation data is carried by a
:class:`WeightedSample`, a column-major container of responses,
covariates and positive importance weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels, all inside (0, 1)."""

    levels: np.ndarray

    def __init__(self, levels: Sequence[float] | np.ndarray):
        levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
        if levels.ndim != 1 or levels.size < 1:
            raise ValueError("quantile grid must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(levels)):
            raise ValueError("quantile levels must be finite")
        if np.any(levels <= 0.0) or np.any(levels >= 1.0):
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        if np.any(np.diff(levels) <= 0.0):
            raise ValueError("quantile levels must be strictly increasing")
        object.__setattr__(self, "levels", _as_readonly(levels))

    @classmethod
    def equispaced(cls, m: int) -> "QuantileGrid":
        """Grid ``k/(m+1)`` for ``k = 1..m`` (the default composite grid)."""
        if m < 1:
            raise ValueError("grid size must be >= 1")
        return cls(np.arange(1, m + 1) / (m + 1))

    @property
    def size(self) -> int:
        return int(self.levels.size)

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[float]:
        return iter(self.levels)


@dataclass(frozen=True)
class ThetaEstimate:
    """Parameter vector: ``p`` slopes plus one intercept per grid level."""

    beta: np.ndarray
    b: np.ndarray

    def __init__(self, beta: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray):
        beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        if beta.ndim != 1 or b.ndim != 1:
            raise ValueError("beta and b must be 1-d")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(b))):
            raise ValueError("parameter entries must be finite")
        object.__setattr__(self, "beta", _as_readonly(beta))
        object.__setattr__(self, "b", _as_readonly(b))

    @property
    def p(self) -> int:
        return int(self.beta.size)

    @property
    def m(self) -> int:
        return int(self.b.size)

    def stacked(self) -> np.ndarray:
        """Concatenated ``(beta, b)`` vector of length ``p + M``."""
        return np.concatenate([self.beta, self.b])

    @classmethod
    def from_stacked(cls, vec: np.ndarray, p: int) -> "ThetaEstimate":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:p], vec[p:])

    def check_dims(self, p: int, grid: QuantileGrid) -> None:
        if self.p != p:
            raise ValueError(f"slope dimension {self.p} does not match covariate dimension {p}")
        if self.m != grid.size:
            raise ValueError(f"intercept dimension {self.m} does not match grid size {grid.size}")


@dataclass(frozen=True)
class WeightedObservation:
    """One response/covariate pair with a positive importance weight."""

    y: float
    x: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x", _as_readonly(np.atleast_1d(self.x)))
        if not np.isfinite(self.y):
            raise ValueError("response must be finite")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("covariates must be finite")
        if not (np.isfinite(self.weight) and self.weight > 0.0):
            raise ValueError("weight must be positive and finite")


class WeightedSample:
    """Estimation sample held as arrays: ``y`` (n,), ``X`` (n, p), ``w`` (n,).

    The array form is what the numerical routines operate on; use
    :meth:`from_observations` to build one from row records.
    """

    __slots__ = ("y", "X", "w")

    def __init__(self, y: np.ndarray, X: np.ndarray, w: np.ndarray | None = None):
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("y must be (n,) and X must be (n, p) with matching n")
        if w is None:
            w = np.ones(y.size)
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        if w.shape != y.shape:
            raise ValueError("weights must match the number of observations")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X)) and np.all(np.isfinite(w))):
            raise ValueError("inputs must be finite")
        if np.any(w <= 0.0):
            raise ValueError("all weights must be positive")
        self.y = _as_readonly(y)
        self.X = _as_readonly(X)
        self.w = _as_readonly(w)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @classmethod
    def from_observations(cls, obs: Iterable[WeightedObservation]) -> "WeightedSample":
        rows = list(obs)
        if not rows:
            raise ValueError("sample must contain at least one observation")
        y = np.array([o.y for o in rows])
        X = np.vstack([o.x for o in rows])
        w = np.array([o.weight for o in rows])
        return cls(y, X, w)

    def observations(self) -> Iterator[WeightedObservation]:
        for i in range(self.n):
            yield WeightedObservation(float(self.y[i]), self.X[i].copy(), float(self.w[i]))
