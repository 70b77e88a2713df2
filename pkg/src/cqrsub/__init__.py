"""Composite quantile regression on sharded data via optimal subsampling.

One slope vector is fit jointly across a grid of quantile levels by
minimizing an importance-weighted composite check loss over
with-replacement subsamples drawn shard by shard.  Sampling
probabilities proportional to per-observation score norms, with
allocations proportional to per-shard score totals, minimize the trace
of the subsampling covariance; a two-step procedure estimates them
from a uniform pilot.  Averaging several draws yields a combined
estimate with a model-free covariance estimate and confidence
intervals.
"""
from .data import Shard, ShardedDataset
from .diagnostics import VpiMatrix, e_n_matrix, v_pi_matrix, v_pi_trace, v_pi_trace_lower_bound
from .ingest import (
    ColumnSchema,
    IngestError,
    IngestResult,
    NormalizationTransform,
    ingest_shards,
    normalize,
    write_shards_csv,
)
from .loss import check_loss, cqr_objective, psi
from .lp import lp_cqr_solve
from .model import QuantileGrid, ThetaEstimate, WeightedObservation, WeightedSample
from .sampling import (
    AliasTable,
    PlanSampler,
    SubsampleDraw,
    SubsamplingPlan,
    draw_subsample,
    largest_remainder,
    lopt_allocations,
    lopt_plan,
    lopt_probabilities,
    score_norm,
    shard_score_norms,
    uniform_plan,
)
from .simgen import SimConfig, error_quantiles, generate_dataset, run_experiment
from .solver import (
    SingularDesignError,
    SingularDesignWarning,
    SolverError,
    solve_weighted_cqr,
)
from .twostep import (
    CombinedEstimate,
    ConfidenceIntervals,
    combine_draws,
    confidence_intervals,
    effective_sample_ratio,
    multi_draw_estimate,
    pilot_estimate,
    two_step_estimate,
    uniform_estimate,
)

__version__ = "0.1.0"

__all__ = [
    "AliasTable",
    "ColumnSchema",
    "CombinedEstimate",
    "ConfidenceIntervals",
    "IngestError",
    "IngestResult",
    "NormalizationTransform",
    "PlanSampler",
    "QuantileGrid",
    "Shard",
    "ShardedDataset",
    "SimConfig",
    "SingularDesignError",
    "SingularDesignWarning",
    "SolverError",
    "SubsampleDraw",
    "SubsamplingPlan",
    "ThetaEstimate",
    "VpiMatrix",
    "WeightedObservation",
    "WeightedSample",
    "check_loss",
    "combine_draws",
    "confidence_intervals",
    "cqr_objective",
    "draw_subsample",
    "e_n_matrix",
    "effective_sample_ratio",
    "error_quantiles",
    "generate_dataset",
    "ingest_shards",
    "largest_remainder",
    "lopt_allocations",
    "lopt_plan",
    "lopt_probabilities",
    "lp_cqr_solve",
    "multi_draw_estimate",
    "normalize",
    "pilot_estimate",
    "psi",
    "run_experiment",
    "score_norm",
    "shard_score_norms",
    "solve_weighted_cqr",
    "two_step_estimate",
    "uniform_estimate",
    "uniform_plan",
    "v_pi_matrix",
    "v_pi_trace",
    "v_pi_trace_lower_bound",
    "write_shards_csv",
]
