"""Sharded CSV ingestion, normalization, and round-trip output.

One CSV file per shard, comma-separated with a header row.  Only the
named response/covariate columns are read, in fixed-size chunks.  Cells
that are empty or read "NA"/"NaN" (case-insensitive) count as missing;
rows with any missing value are dropped and counted.  Anything else
that fails to parse as a number is an error pinpointing file, line and
column.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .data import Shard, ShardedDataset

CHUNK_ROWS = 65_536
_NA_TOKENS = {"", "na", "nan"}


class IngestError(RuntimeError):
    """Unreadable, unparseable, or structurally invalid shard input."""


@dataclass(frozen=True)
class ColumnSchema:
    """Names of the response column and the covariate columns, in order."""

    response: str
    covariates: tuple[str, ...]

    def __post_init__(self):
        if not self.response or not self.covariates:
            raise ValueError("schema needs a response column and at least one covariate")
        cols = (self.response, *self.covariates)
        if len(set(cols)) != len(cols):
            raise ValueError("schema columns must be distinct")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def columns(self) -> tuple[str, ...]:
        return (self.response, *self.covariates)


@dataclass(frozen=True)
class IngestResult:
    dataset: ShardedDataset
    paths: tuple[str, ...]
    rows_kept: tuple[int, ...]
    rows_dropped: tuple[int, ...]

    @property
    def total_dropped(self) -> int:
        return int(sum(self.rows_dropped))


def _parse_column(raw: pd.Series, path, column: str, offset: int) -> np.ndarray:
    """Parse one string column to float, NaN for NA tokens, error otherwise."""
    stripped = raw.str.strip()
    is_na = stripped.str.lower().isin(_NA_TOKENS)
    probe = pd.to_numeric(stripped, errors="coerce")
    bad = probe.isna() & ~is_na
    if bad.any():
        pos = int(np.flatnonzero(bad.to_numpy())[0])
        # +2: one for the header row, one for 1-based line numbers
        raise IngestError(
            f"{path}: line {offset + pos + 2}, column {column!r}: "
            f"cannot parse {stripped.iloc[pos]!r} as a number"
        )
    # reparse with numpy, whose conversion is correctly rounded (the
    # pandas fast path can be off by one ulp, breaking exact round-trips)
    return stripped.where(~is_na, "nan").to_numpy(dtype=np.float64)


def _read_shard(path, schema: ColumnSchema) -> tuple[Shard, int]:
    cols = list(schema.columns)
    try:
        reader = pd.read_csv(
            path,
            usecols=cols,
            dtype=str,
            chunksize=CHUNK_ROWS,
            keep_default_na=False,
            encoding="utf-8",
        )
    except FileNotFoundError as exc:
        raise IngestError(f"{path}: file not found") from exc
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from exc

    blocks: list[np.ndarray] = []
    dropped = 0
    offset = 0
    try:
        for chunk in reader:
            parsed = np.column_stack(
                [_parse_column(chunk[c], path, c, offset) for c in cols]
            )
            keep = ~np.isnan(parsed).any(axis=1)
            dropped += int((~keep).sum())
            if keep.any():
                blocks.append(parsed[keep])
            offset += len(chunk)
    except pd.errors.ParserError as exc:
        raise IngestError(f"{path}: {exc}") from exc

    if not blocks:
        raise IngestError(f"{path}: no usable rows after dropping missing values")
    data = np.vstack(blocks)
    return Shard(data[:, 0], data[:, 1:]), dropped


def ingest_shards(paths: Sequence[str | Path], schema: ColumnSchema) -> IngestResult:
    """Read one shard per file; rows with missing values are dropped and counted."""
    if not paths:
        raise IngestError("no shard files given")
    shards, kept, dropped = [], [], []
    for path in paths:
        shard, n_dropped = _read_shard(path, schema)
        shards.append(shard)
        kept.append(shard.n)
        dropped.append(n_dropped)
    dataset = ShardedDataset(
        tuple(shards), response_name=schema.response, covariate_names=schema.covariates
    )
    return IngestResult(dataset, tuple(str(p) for p in paths), tuple(kept), tuple(dropped))


@dataclass(frozen=True)
class NormalizationTransform:
    """Per-column z-score transform (global across shards), invertible."""

    columns: tuple[str, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "means": list(self.means),
            "sds": list(self.sds),
        }

    def _targets(self, dataset: ShardedDataset) -> list[tuple[str, int | None]]:
        out = []
        for name in self.columns:
            if name == dataset.response_name:
                out.append((name, None))
            else:
                out.append((name, dataset.covariate_names.index(name)))
        return out

    def _map(self, dataset: ShardedDataset, forward: bool) -> ShardedDataset:
        targets = self._targets(dataset)
        shards = []
        for shard in dataset:
            y = shard.y.copy()
            X = shard.X.copy()
            for (name, j), mu, sd in zip(targets, self.means, self.sds):
                if j is None:
                    y = (y - mu) / sd if forward else y * sd + mu
                else:
                    X[:, j] = (X[:, j] - mu) / sd if forward else X[:, j] * sd + mu
            shards.append(Shard(y, X))
        return ShardedDataset(
            tuple(shards),
            response_name=dataset.response_name,
            covariate_names=dataset.covariate_names,
        )

    def apply(self, dataset: ShardedDataset) -> ShardedDataset:
        return self._map(dataset, forward=True)

    def invert(self, dataset: ShardedDataset) -> ShardedDataset:
        return self._map(dataset, forward=False)


def normalize(
    dataset: ShardedDataset, columns: Sequence[str]
) -> tuple[ShardedDataset, NormalizationTransform]:
    """Standardize the selected columns to zero mean, unit (sample) SD.

    Statistics are global across shards, accumulated in one pass per
    shard.  Selected columns must have nonzero variance; columns not
    selected (e.g. binary indicators) are left untouched.
    """
    names = tuple(columns)
    if not names:
        raise ValueError("no columns selected for normalization")
    valid = {dataset.response_name, *dataset.covariate_names}
    unknown = [c for c in names if c not in valid]
    if unknown:
        raise ValueError(f"unknown column(s) {unknown}; have {sorted(valid)}")

    def column_values(shard: Shard, name: str) -> np.ndarray:
        if name == dataset.response_name:
            return shard.y
        return shard.X[:, dataset.covariate_names.index(name)]

    means, sds = [], []
    n = dataset.n
    for name in names:
        total = 0.0
        total_sq = 0.0
        for shard in dataset:
            v = column_values(shard, name)
            total += float(v.sum())
            total_sq += float(v @ v)
        mu = total / n
        var = (total_sq - n * mu * mu) / (n - 1) if n > 1 else 0.0
        if var <= 0.0:
            raise ValueError(f"column {name!r} has zero variance; cannot normalize")
        means.append(mu)
        sds.append(float(np.sqrt(var)))

    transform = NormalizationTransform(names, tuple(means), tuple(sds))
    return transform.apply(dataset), transform


def write_shards_csv(dataset: ShardedDataset, directory: str | Path, prefix: str = "shard") -> list[Path]:
    """Write one CSV per shard (full float precision, so re-ingest is exact)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = [dataset.response_name, *dataset.covariate_names]
    paths = []
    for k, shard in enumerate(dataset):
        path = directory / f"{prefix}_{k:03d}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(shard.n):
                writer.writerow([repr(float(shard.y[i]))] + [repr(float(v)) for v in shard.X[i]])
        paths.append(path)
    return paths
