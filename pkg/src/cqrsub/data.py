"""Immutable container for data split across shards."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .model import _as_readonly


@dataclass(frozen=True)
class Shard:
    """One data block: responses ``y`` (n_k,) and covariates ``X`` (n_k, p)."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.size or y.size < 1:
            raise ValueError("shard needs y of shape (n,) and X of shape (n, p), n >= 1")
        object.__setattr__(self, "y", _as_readonly(y))
        object.__setattr__(self, "X", _as_readonly(X))

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def p(self) -> int:
        return int(self.X.shape[1])


@dataclass(frozen=True)
class ShardedDataset:
    """K immutable shards sharing one covariate dimension.

    Optional column names travel with the dataset so CSV output and
    normalization can refer to columns by name.
    """

    shards: tuple[Shard, ...]
    response_name: str = "y"
    covariate_names: tuple[str, ...] | None = None

    def __post_init__(self):
        shards = tuple(self.shards)
        if not shards:
            raise ValueError("dataset needs at least one shard")
        p = shards[0].p
        if any(s.p != p for s in shards):
            raise ValueError("all shards must share the same covariate dimension")
        names = self.covariate_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(p))
        else:
            names = tuple(names)
            if len(names) != p:
                raise ValueError("covariate_names must match the covariate dimension")
        object.__setattr__(self, "shards", shards)
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_arrays(cls, pairs: Sequence[tuple[np.ndarray, np.ndarray]], **kw) -> "ShardedDataset":
        return cls(tuple(Shard(y, X) for y, X in pairs), **kw)

    @property
    def k(self) -> int:
        return len(self.shards)

    @property
    def p(self) -> int:
        return self.shards[0].p

    @property
    def n(self) -> int:
        return sum(s.n for s in self.shards)

    @property
    def shard_sizes(self) -> np.ndarray:
        return np.array([s.n for s in self.shards], dtype=np.int64)

    def __iter__(self) -> Iterator[Shard]:
        return iter(self.shards)
