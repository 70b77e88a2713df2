"""Command-line front end.

Subcommands: ``estimate`` (fit on sharded CSVs), ``simulate`` (run a
replicated experiment from a config file), ``plan`` (emit a subsampling
plan without estimating), ``diagnose`` (variance diagnostics on small
inputs).  All randomness flows from ``--seed``; reruns with the same
inputs and seed produce identical outputs up to the timing fields.

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 solver error, 1 anything else.
"""
from __future__ import annotations

import argparse
import glob
import json
import sys
import time
from pathlib import Path

import numpy as np

from .diagnostics import v_pi_matrix, v_pi_trace, v_pi_trace_lower_bound, e_n_matrix
from .ingest import ColumnSchema, IngestError, ingest_shards, normalize
from .model import QuantileGrid, ThetaEstimate
from .sampling import SubsamplingPlan, lopt_allocations, lopt_plan, lopt_probabilities, uniform_plan
from .simgen import SimConfig, run_experiment, write_rows_csv
from .solver import SolverError
from .twostep import confidence_intervals, multi_draw_estimate, pilot_estimate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_SOLVER = 4
EXIT_OTHER = 1


class ConfigError(RuntimeError):
    """Invalid or incomplete run configuration."""


# ---------------------------------------------------------------------------
# option plumbing


def load_kv_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; '#' starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_taus(spec: str) -> QuantileGrid:
    """Either a count m (grid k/(m+1)) or an explicit comma list of levels."""
    spec = spec.strip()
    try:
        if "," in spec or "." in spec:
            return QuantileGrid([float(v) for v in spec.split(",") if v.strip()])
        return QuantileGrid.equispaced(int(spec))
    except ValueError as exc:
        raise ConfigError(f"invalid --taus {spec!r}: {exc}") from exc


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _resolve(args, config: dict, key: str, default=None, cast=None):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is None:
        value = config.get(key, default)
        if value is not None and cast is not None and isinstance(value, str):
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
    return value


def _expand_shards(pattern) -> list[str]:
    if pattern is None:
        raise ConfigError("missing --shards")
    paths = sorted(glob.glob(str(pattern)))
    if not paths:
        raise ConfigError(f"--shards pattern {pattern!r} matched no files")
    return paths


def _ingest_from_args(args, config) -> tuple:
    response = _resolve(args, config, "response")
    covariates = _resolve(args, config, "covariates", cast=_csv_list)
    if response is None or not covariates:
        raise ConfigError("missing --response/--covariates")
    if isinstance(covariates, str):
        covariates = _csv_list(covariates)
    schema = ColumnSchema(response, tuple(covariates))
    paths = _expand_shards(_resolve(args, config, "shards"))
    result = ingest_shards(paths, schema)
    return result, schema


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> int:
    config = load_kv_config(args.config) if args.config else {}
    t_start = time.perf_counter()
    ingest_result, schema = _ingest_from_args(args, config)
    t_ingest = time.perf_counter() - t_start

    dataset = ingest_result.dataset
    transform = None
    norm_cols = _resolve(args, config, "normalize", cast=_csv_list)
    if norm_cols:
        if isinstance(norm_cols, str):
            norm_cols = _csv_list(norm_cols)
        dataset, transform = normalize(dataset, norm_cols)

    grid = parse_taus(str(_resolve(args, config, "taus", default="15")))
    r0 = int(_resolve(args, config, "r0", default=200))
    r = int(_resolve(args, config, "r", default=1000))
    b_count = int(_resolve(args, config, "B", default=40))
    alpha = float(_resolve(args, config, "alpha", default=0.05))
    seed = int(_resolve(args, config, "seed", default=0))
    method = str(_resolve(args, config, "method", default="lopt"))
    if method not in ("lopt", "uniform"):
        raise ConfigError(f"--method must be lopt or uniform, got {method!r}")

    t0 = time.perf_counter()
    est = multi_draw_estimate(dataset, r0, r, b_count, grid, seed, method=method)
    ci = confidence_intervals(est, alpha)
    t_est = time.perf_counter() - t0

    out = _out_dir(args)
    payload = {
        "schema_version": 1,
        "kind": "estimate_result",
        "inputs": {
            "shards": list(ingest_result.paths),
            "response": schema.response,
            "covariates": list(schema.covariates),
            "taus": grid.levels.tolist(),
            "r0": r0, "r": r, "B": b_count, "alpha": alpha,
            "seed": seed, "method": method,
            "rows_kept": list(ingest_result.rows_kept),
            "rows_dropped": list(ingest_result.rows_dropped),
        },
        "normalization": transform.to_dict() if transform else None,
        "estimate": est.to_dict(),
        "confidence_intervals": ci.to_dict(),
        "timings": {"ingest_s": t_ingest, "estimate_s": t_est},
    }
    _write_json(out / "estimate.json", payload)

    rows = []
    for j, th in enumerate(est.per_draw):
        row = {"draw": j}
        row.update({f"beta_{schema.covariates[i]}": v for i, v in enumerate(th.beta.tolist())})
        row.update({f"b_{m + 1}": v for m, v in enumerate(th.b.tolist())})
        rows.append(row)
    write_rows_csv(rows, out / "per_draw.csv")

    dropped = ingest_result.total_dropped
    print(f"ingested {dataset.n} rows in {dataset.k} shards ({dropped} dropped)")
    for name, lo, hi, val in zip(
        schema.covariates, ci.lower, ci.upper, est.theta_L.beta
    ):
        print(f"beta[{name}] = {val:.6f}  CI ({lo:.6f}, {hi:.6f})")
    print(f"results written to {out / 'estimate.json'}")
    return EXIT_OK


def cmd_plan(args) -> int:
    config = load_kv_config(args.config) if args.config else {}
    ingest_result, _ = _ingest_from_args(args, config)
    dataset = ingest_result.dataset
    grid = parse_taus(str(_resolve(args, config, "taus", default="15")))
    r = int(_resolve(args, config, "r", default=1000))
    r0 = int(_resolve(args, config, "r0", default=200))
    seed = int(_resolve(args, config, "seed", default=0))
    method = str(_resolve(args, config, "method", default="lopt"))

    if method == "uniform":
        plan = uniform_plan(dataset, r)
        extra = {}
    elif method == "lopt":
        pilot = pilot_estimate(dataset, r0, grid, seed)
        plan = lopt_plan(dataset, pilot, grid, r)
        extra = {"pilot": {"beta": pilot.beta.tolist(), "b": pilot.b.tolist()}}
    else:
        raise ConfigError(f"--method must be lopt or uniform, got {method!r}")

    out = _out_dir(args)
    payload = plan.to_dict()
    payload.update({"method": method, "seed": seed, **extra})
    _write_json(out / "plan.json", payload)
    alloc = ", ".join(str(int(a)) for a in plan.allocations)
    print(f"plan for r={r} over {dataset.k} shards: allocations [{alloc}]")
    print(f"plan written to {out / 'plan.json'}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    config = load_kv_config(args.config) if args.config else {}
    ingest_result, _ = _ingest_from_args(args, config)
    dataset = ingest_result.dataset
    grid = parse_taus(str(_resolve(args, config, "taus", default="15")))
    r = int(_resolve(args, config, "r", default=1000))
    r0 = int(_resolve(args, config, "r0", default=200))
    seed = int(_resolve(args, config, "seed", default=0))

    if args.theta0:
        doc = json.loads(Path(args.theta0).read_text(encoding="utf-8"))
        theta0 = ThetaEstimate(np.asarray(doc["beta"]), np.asarray(doc["b"]))
    else:
        theta0 = pilot_estimate(dataset, r0, grid, seed)

    probs = tuple(lopt_probabilities(s, theta0, grid) for s in dataset)
    alloc_real = lopt_allocations(dataset, theta0, grid, r, integer=False)
    plan_opt = SubsamplingPlan(probs, alloc_real, r)
    plan_unif = uniform_plan(dataset, r)
    tr_opt = v_pi_trace(dataset, plan_opt, theta0, grid)
    tr_unif = v_pi_trace(dataset, plan_unif, theta0, grid)
    bound = v_pi_trace_lower_bound(dataset, theta0, grid)

    payload = {
        "schema_version": 1,
        "kind": "diagnostics",
        "r": r,
        "theta0": {"beta": theta0.beta.tolist(), "b": theta0.b.tolist()},
        "trace_v_pi": {
            "optimal": tr_opt,
            "uniform": tr_unif,
            "lower_bound": bound,
        },
        "optimal_allocations_real": alloc_real.tolist(),
    }
    if args.density:
        density = [float(v) for v in _csv_list(args.density)]
        en = e_n_matrix(dataset, grid, density)
        vpi = v_pi_matrix(dataset, plan_opt, theta0, grid).matrix
        en_inv = np.linalg.inv(en)
        payload["e_n"] = en.tolist()
        payload["sandwich_diag"] = np.diag(en_inv @ vpi @ en_inv).tolist()

    out = _out_dir(args)
    _write_json(out / "diagnostics.json", payload)
    print(
        f"tr(V_pi): optimal {tr_opt:.6g} (bound {bound:.6g}), uniform {tr_unif:.6g}, "
        f"ratio {tr_unif / tr_opt:.3f}"
    )
    print(f"diagnostics written to {out / 'diagnostics.json'}")
    return EXIT_OK


_SIM_INT_KEYS = ("n", "K", "p", "replications", "r0", "seed", "n_jobs")


def cmd_simulate(args) -> int:
    config = load_kv_config(args.sim_config) if args.sim_config else {}
    kw: dict = {}
    for key in ("case", "error"):
        value = _resolve(args, config, key)
        if value is not None:
            kw[key] = str(value)
    for key in _SIM_INT_KEYS:
        value = _resolve(args, config, key)
        if value is not None:
            kw[key] = int(value)
    alpha = _resolve(args, config, "alpha")
    if alpha is not None:
        kw["alpha"] = float(alpha)
    r_values = _resolve(args, config, "r_values")
    if r_values is not None:
        kw["r_values"] = tuple(int(v) for v in _csv_list(str(r_values)))
    b_spec = _resolve(args, config, "B")
    if b_spec is not None:
        parts = _csv_list(str(b_spec))
        kw["B"] = int(parts[0]) if len(parts) == 1 else tuple(int(v) for v in parts)
    taus = _resolve(args, config, "taus")
    if taus is not None:
        kw["taus"] = tuple(parse_taus(str(taus)).levels.tolist())
    try:
        sim_config = SimConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    t0 = time.perf_counter()
    result = run_experiment(sim_config)
    elapsed = time.perf_counter() - t0

    out = _out_dir(args)
    write_rows_csv(result.rows, out / "replications.csv")
    if result.b_rows:
        write_rows_csv(result.b_rows, out / "b_replications.csv")
    payload = result.to_dict()
    payload["timings"] = {"total_s": elapsed}
    _write_json(out / "summary.json", payload)

    for row in result.r_summary:
        print(
            f"{row['method']:>8s} r={row['r']:<5d} bias={row['bias_beta1']:+.4f} "
            f"sd={row['sd_beta1']:.4f} mse={row['mse']:.5f}"
        )
    for row in result.b_summary:
        print(
            f"   B={row['B']:<4d} emse={row['emse']:.5f} amse={row['amse']:.5f} "
            f"cp={row['cp_beta1']:.3f}"
        )
    print(f"summary written to {out / 'summary.json'} ({elapsed:.1f}s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_data_options(sub):
    sub.add_argument("--shards", help="glob pattern of shard CSV files")
    sub.add_argument("--response", help="response column name")
    sub.add_argument("--covariates", type=_csv_list, help="comma-separated covariate columns")
    sub.add_argument("--taus", help="quantile grid: a count m or comma list of levels")
    sub.add_argument("--config", help="flat key=value config file (flags win)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cqrsub",
        description="Composite quantile regression on sharded data via optimal subsampling",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    est = subs.add_parser("estimate", help="multi-draw estimate with confidence intervals")
    _add_data_options(est)
    est.add_argument("--r0", type=int, help="pilot subsample size (default 200)")
    est.add_argument("--r", type=int, help="subsample size per draw (default 1000)")
    est.add_argument("--B", type=int, help="number of draws (default 40)")
    est.add_argument("--alpha", type=float, help="CI miscoverage level (default 0.05)")
    est.add_argument("--seed", type=int, help="master RNG seed (default 0)")
    est.add_argument("--method", choices=("lopt", "uniform"), help="sampling plan")
    est.add_argument("--normalize", type=_csv_list, help="columns to z-score globally")
    est.add_argument("--out", help="output directory")
    est.set_defaults(func=cmd_estimate)

    pl = subs.add_parser("plan", help="emit a subsampling plan as JSON without estimating")
    _add_data_options(pl)
    pl.add_argument("--r", type=int, help="total subsample size (default 1000)")
    pl.add_argument("--r0", type=int, help="pilot size for the lopt plan (default 200)")
    pl.add_argument("--seed", type=int, help="master RNG seed (default 0)")
    pl.add_argument("--method", choices=("lopt", "uniform"), help="plan kind")
    pl.add_argument("--out", help="output directory")
    pl.set_defaults(func=cmd_plan)

    diag = subs.add_parser("diagnose", help="variance diagnostics on small inputs")
    _add_data_options(diag)
    diag.add_argument("--r", type=int, help="budget r in the variance formula")
    diag.add_argument("--r0", type=int, help="pilot size when --theta0 is omitted")
    diag.add_argument("--seed", type=int, help="master RNG seed (default 0)")
    diag.add_argument("--theta0", help="JSON file with reference beta and b")
    diag.add_argument("--density", help="comma list of error density values at the intercepts")
    diag.add_argument("--out", help="output directory")
    diag.set_defaults(func=cmd_diagnose)

    sim = subs.add_parser("simulate", help="run a replicated synthetic experiment")
    sim.add_argument("--sim-config", help="flat key=value experiment config file")
    sim.add_argument("--case", choices=("I", "II", "III", "IV"))
    sim.add_argument("--error", choices=("normal", "mix_normal", "t3", "cauchy", "zero"))
    sim.add_argument("--n", type=int)
    sim.add_argument("--K", type=int)
    sim.add_argument("--p", type=int)
    sim.add_argument("--replications", type=int)
    sim.add_argument("--r0", type=int)
    sim.add_argument("--r-values", dest="r_values", help="comma list of subsample sizes")
    sim.add_argument("--B", help="draw count or comma list of counts")
    sim.add_argument("--taus", help="quantile grid: count or comma list")
    sim.add_argument("--alpha", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--n-jobs", dest="n_jobs", type=int, help="parallel replications")
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestError as exc:
        print(f"error [ingest]: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except SolverError as exc:
        print(f"error [solver]: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except Exception as exc:  # noqa: BLE001 - map anything else to a generic failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
