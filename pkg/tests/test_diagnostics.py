import numpy as np
import pytest
from scipy.stats import norm

from cqrsub import (
    QuantileGrid,
    Shard,
    ShardedDataset,
    ThetaEstimate,
    draw_subsample,
    e_n_matrix,
    lopt_allocations,
    lopt_plan,
    lopt_probabilities,
    solve_weighted_cqr,
    uniform_plan,
    v_pi_matrix,
    v_pi_trace,
    v_pi_trace_lower_bound,
)
from cqrsub.sampling import SubsamplingPlan

from conftest import random_sharded, random_theta


def lopt_real_plan(ds, theta, grid, r):
    probs = tuple(lopt_probabilities(s, theta, grid) for s in ds)
    return SubsamplingPlan(probs, lopt_allocations(ds, theta, grid, r, integer=False), r)


class TestVpiMatrix:
    def test_single_observation_outer_product(self):
        grid = QuantileGrid([0.25, 0.75])
        ds = ShardedDataset((Shard(np.array([1.0]), np.array([[2.0]])),))
        theta = ThetaEstimate([0.0], [0.0, 3.0])
        plan = SubsamplingPlan((np.array([1.0]),), np.array([5], dtype=np.int64), 5)
        # residual 1.0: psi = (0.25 - 0, 0.75 - 1) = (0.25, -0.25); score ((sum psi) x, psi)
        g = np.array([0.0 * 2.0, 0.25, -0.25])
        expected = np.outer(g, g)
        got = v_pi_matrix(ds, plan, theta, grid).matrix
        np.testing.assert_allclose(got, expected, atol=1e-15)

    def test_row_duplication_symmetry(self, rng):
        # duplicating every row within the shard leaves V_pi invariant
        # once n and the (uniform) plan are adjusted consistently
        grid = QuantileGrid([0.5])
        theta = random_theta(rng, 2, 1)
        X = rng.normal(size=(6, 2))
        y = rng.normal(size=6)
        ds1 = ShardedDataset((Shard(y, X),))
        ds2 = ShardedDataset((Shard(np.tile(y, 2), np.tile(X, (2, 1))),))
        p1 = uniform_plan(ds1, 4)
        p2 = uniform_plan(ds2, 4)
        v1 = v_pi_matrix(ds1, p1, theta, grid).matrix
        v2 = v_pi_matrix(ds2, p2, theta, grid).matrix
        np.testing.assert_allclose(v1, v2, atol=1e-14)

    def test_zero_allocation_rejected(self, rng):
        ds, _ = random_sharded(rng, 40, 2, 1)
        grid = QuantileGrid([0.5])
        theta = random_theta(rng, 1, 1)
        probs = tuple(lopt_probabilities(s, theta, grid) for s in ds)
        plan = SubsamplingPlan(probs, np.array([10.0, 0.0]), 10)
        with pytest.raises(ValueError, match="positive allocations"):
            v_pi_matrix(ds, plan, theta, grid)

    def test_trace_factorization_matches_matrix(self, rng):
        for _ in range(20):
            ds, _ = random_sharded(rng, int(rng.integers(20, 120)), int(rng.integers(1, 4)), 2)
            grid = QuantileGrid([0.2, 0.5, 0.8])
            theta = random_theta(rng, 2, 3)
            plan = lopt_real_plan(ds, theta, grid, 30)
            direct = v_pi_matrix(ds, plan, theta, grid).trace
            factored = v_pi_trace(ds, plan, theta, grid)
            assert factored == pytest.approx(direct, rel=1e-10)


class TestOptimality:
    def test_lower_bound_attained_at_optimum(self, rng):
        for _ in range(20):
            ds, _ = random_sharded(rng, int(rng.integers(20, 150)), int(rng.integers(1, 4)), 2)
            grid = QuantileGrid([0.3, 0.7])
            theta = random_theta(rng, 2, 2)
            plan = lopt_real_plan(ds, theta, grid, 40)
            tr_opt = v_pi_matrix(ds, plan, theta, grid).trace
            bound = v_pi_trace_lower_bound(ds, theta, grid)
            assert tr_opt == pytest.approx(bound, rel=1e-10)

    def test_bound_independent_of_budget(self, rng):
        # the r/r_k factors cancel at the optimum, so the trace there
        # does not depend on r at all
        ds, _ = random_sharded(rng, 80, 3, 2)
        grid = QuantileGrid([0.4, 0.6])
        theta = random_theta(rng, 2, 2)
        traces = [
            v_pi_matrix(ds, lopt_real_plan(ds, theta, grid, r), theta, grid).trace
            for r in (10, 100, 1000)
        ]
        np.testing.assert_allclose(traces, traces[0], rtol=1e-12)

    def test_random_plans_never_beat_optimum(self, rng):
        ds, _ = random_sharded(rng, 100, 3, 2)
        grid = QuantileGrid([0.25, 0.5, 0.75])
        theta = random_theta(rng, 2, 3)
        r = 30
        tr_opt = v_pi_matrix(ds, lopt_real_plan(ds, theta, grid, r), theta, grid).trace
        for _ in range(100):
            probs = tuple(
                (lambda v: v / v.sum())(rng.uniform(0.01, 1.0, s.n)) for s in ds
            )
            alloc = rng.uniform(0.2, 1.0, ds.k)
            alloc = r * alloc / alloc.sum()
            plan = SubsamplingPlan(probs, alloc, r)
            assert v_pi_trace(ds, plan, theta, grid) >= tr_opt * (1 - 1e-9)


class TestEnMatrix:
    def test_unit_density_zero_covariate(self):
        grid = QuantileGrid([0.25, 0.5, 0.75])
        ds = ShardedDataset((Shard(np.array([1.0]), np.array([[0.0]])),))
        en = e_n_matrix(ds, grid, [1.0, 1.0, 1.0])
        expected = np.zeros((4, 4))
        expected[1:, 1:] = np.eye(3)
        np.testing.assert_allclose(en, expected, atol=1e-15)

    def test_duplication_invariance(self, rng):
        grid = QuantileGrid([0.5])
        X = rng.normal(size=(7, 2))
        y = rng.normal(size=7)
        ds1 = ShardedDataset((Shard(y, X),))
        ds2 = ShardedDataset((Shard(np.tile(y, 2), np.tile(X, (2, 1))),))
        f = [0.3]
        np.testing.assert_allclose(
            e_n_matrix(ds1, grid, f), e_n_matrix(ds2, grid, f), atol=1e-14
        )

    def test_block_structure_matches_stacked_sum(self, rng):
        grid = QuantileGrid([0.3, 0.7])
        ds, _ = random_sharded(rng, 25, 2, 3)
        f = [0.2, 0.5]
        en = e_n_matrix(ds, grid, f)
        dim = 3 + 2
        brute = np.zeros((dim, dim))
        for shard in ds:
            for i in range(shard.n):
                for m in range(2):
                    xt = np.concatenate([shard.X[i], np.eye(2)[m]])
                    brute += f[m] * np.outer(xt, xt)
        np.testing.assert_allclose(en, brute / ds.n, atol=1e-12)

    def test_nonpositive_density_rejected(self, rng):
        ds, _ = random_sharded(rng, 20, 1, 1)
        with pytest.raises(ValueError):
            e_n_matrix(ds, QuantileGrid([0.5]), [0.0])
        with pytest.raises(ValueError):
            e_n_matrix(ds, QuantileGrid([0.5]), [-1.0])

    def test_positive_semidefinite(self, rng):
        ds, _ = random_sharded(rng, 50, 2, 3)
        grid = QuantileGrid([0.2, 0.5, 0.8])
        en = e_n_matrix(ds, grid, [0.1, 0.4, 0.2])
        assert np.linalg.eigvalsh(en).min() >= -1e-12


class TestSandwichPredictsMonteCarloVariance:
    def test_normal_error_variance_within_band(self):
        # fixed dataset with known truth: the sandwich diagonal should
        # predict the spread of sqrt(r) * (theta_hat - theta0) across
        # repeated subsample fits within a modest factor
        rng = np.random.default_rng(31415)
        p, grid = 2, QuantileGrid([0.25, 0.5, 0.75])
        beta0 = np.array([1.0, -0.5])
        theta0 = ThetaEstimate(beta0, norm.ppf(grid.levels))
        shards = []
        for nk in (2200, 1800):
            X = rng.normal(size=(nk, p))
            shards.append(Shard(X @ beta0 + rng.standard_normal(nk), X))
        ds = ShardedDataset(tuple(shards))

        r = 1000
        plan = lopt_plan(ds, theta0, grid, r)
        en = e_n_matrix(ds, grid, norm.pdf(theta0.b))
        vpi = v_pi_matrix(
            ds,
            SubsamplingPlan(
                plan.probabilities,
                lopt_allocations(ds, theta0, grid, r, integer=False),
                r,
            ),
            theta0,
            grid,
        ).matrix
        en_inv = np.linalg.inv(en)
        predicted = np.diag(en_inv @ vpi @ en_inv)

        reps = 250
        opts = {"tol_obj": 1e-5, "h_final": 1e-3, "max_iter": 2000}
        devs = np.empty((reps, p + grid.size))
        for j in range(reps):
            draw = draw_subsample(ds, plan, np.random.SeedSequence(entropy=8, spawn_key=(j,)))
            th = solve_weighted_cqr(draw.weighted_sample(ds), grid, init=theta0, **opts)
            devs[j] = np.sqrt(r) * (th.stacked() - theta0.stacked())
        observed = devs.var(axis=0, ddof=1)
        ratio = observed / predicted
        assert np.all(ratio > 1 / 1.5), ratio
        assert np.all(ratio < 1.5), ratio
