import numpy as np
import pytest

from cqrsub import (
    CombinedEstimate,
    QuantileGrid,
    Shard,
    ShardedDataset,
    SolverError,
    ThetaEstimate,
    combine_draws,
    confidence_intervals,
    cqr_objective,
    draw_subsample,
    effective_sample_ratio,
    lopt_plan,
    multi_draw_estimate,
    pilot_estimate,
    two_step_estimate,
    uniform_estimate,
    uniform_plan,
)
from cqrsub.sampling import SubsamplingPlan
from cqrsub.twostep import _stream

from conftest import random_sharded

GRID3 = QuantileGrid([0.25, 0.5, 0.75])


class TestPilot:
    def test_noiseless_recovery(self, rng):
        ds, beta = random_sharded(rng, 2000, 3, 2, noise=0.0)
        theta = pilot_estimate(ds, 200, GRID3, rng_seed=1)
        np.testing.assert_allclose(theta.beta, beta, atol=1e-5)
        np.testing.assert_allclose(theta.b, 0.0, atol=1e-5)

    def test_deterministic(self, rng):
        ds, _ = random_sharded(rng, 500, 2, 2)
        t1 = pilot_estimate(ds, 100, GRID3, rng_seed=7)
        t2 = pilot_estimate(ds, 100, GRID3, rng_seed=7)
        np.testing.assert_array_equal(t1.stacked(), t2.stacked())

    def test_soft_floor_warning(self, rng):
        ds, _ = random_sharded(rng, 500, 2, 2)
        with pytest.warns(UserWarning, match="pilot size"):
            pilot_estimate(ds, 10, GRID3, rng_seed=0)

    def test_failure_carries_pilot_context(self, rng):
        # collinear covariates make every solve fail rank detection
        x = rng.normal(size=300)
        X = np.column_stack([x, 2 * x])
        ds = ShardedDataset((Shard(x + rng.normal(size=300), X),))
        with pytest.raises(ValueError, match="pilot"):
            pilot_estimate(ds, 100, GRID3, rng_seed=0)


class TestTwoStep:
    def test_degenerate_identical_rows_collapse_to_uniform(self, rng):
        # every row identical: scores are equal, so the optimal plan is
        # the uniform plan and, with a shared pilot start, the two-step
        # estimate must coincide with single-step uniform estimation
        shards = tuple(
            Shard(np.full(n, 2.0), np.full((n, 1), 1.5)) for n in (6, 9, 12)
        )
        ds = ShardedDataset(shards)
        opts = {"allow_singular": True}
        seed = 5
        with pytest.warns(UserWarning):
            pilot = pilot_estimate(ds, 15, GRID3, seed, solver_options=opts)
            plan = lopt_plan(ds, pilot, GRID3, 9)
            unif = uniform_plan(ds, 9)
            for a, b in zip(plan.probabilities, unif.probabilities):
                np.testing.assert_allclose(a, b, atol=1e-15)
            np.testing.assert_array_equal(plan.allocations, unif.allocations)
            th_two = two_step_estimate(ds, 15, 9, GRID3, seed, solver_options=opts)
            th_unif = uniform_estimate(ds, 9, GRID3, seed, init=pilot, solver_options=opts)
        np.testing.assert_array_equal(th_two.stacked(), th_unif.stacked())

    def test_matches_manual_pipeline(self, rng):
        # the composed estimator is exactly pilot -> plan -> draw -> solve
        # with folded weights r / (r_k pi*)
        ds, _ = random_sharded(rng, 800, 3, 2)
        seed, r0, r = 11, 100, 60
        theta = two_step_estimate(ds, r0, r, GRID3, seed)

        pilot = pilot_estimate(ds, r0, GRID3, seed)
        plan = lopt_plan(ds, pilot, GRID3, r)
        draw = draw_subsample(ds, plan, _stream(seed, 1))
        sample = draw.weighted_sample(ds)
        for k in range(ds.k):
            expected = r / (draw.indices[k].size * plan.probabilities[k][draw.indices[k]])
            got = sample.w[sum(d.size for d in draw.indices[:k]) : sum(d.size for d in draw.indices[: k + 1])]
            np.testing.assert_allclose(got, expected, atol=0)
        from cqrsub.solver import solve_weighted_cqr

        manual = solve_weighted_cqr(sample, GRID3, init=pilot, max_iter=2000)
        np.testing.assert_array_equal(theta.stacked(), manual.stacked())

    def test_nonpositive_r_rejected(self, rng):
        ds, _ = random_sharded(rng, 100, 1, 1)
        with pytest.raises(ValueError):
            two_step_estimate(ds, 50, 0, GRID3, 0)


class TestEffectiveSampleRatio:
    def test_uniform_closed_form(self, rng):
        ds, _ = random_sharded(rng, 400, 3, 1)
        plan = uniform_plan(ds, 30)
        b = 4
        expected = np.mean(
            [
                1.0 - (rk * b - 1.0) / (2.0 * nk)
                for rk, nk in zip(plan.allocations, ds.shard_sizes)
            ]
        )
        assert effective_sample_ratio(plan, b) == pytest.approx(expected, abs=1e-15)

    def test_hand_computed_value(self):
        ds = ShardedDataset((Shard(np.zeros(100), np.ones((100, 1))),))
        plan = uniform_plan(ds, 10)
        assert effective_sample_ratio(plan, 2) == pytest.approx(1 - 19 / 200)

    def test_limit_is_one(self):
        # huge shard, small budget: the correction vanishes
        n = 2_000_000
        probs = (np.full(n, 1.0 / n),)
        plan = SubsamplingPlan(probs, np.array([1], dtype=np.int64), 1)
        assert effective_sample_ratio(plan, 1) == pytest.approx(1.0, abs=1e-5)

    def test_nonpositive_value_floored_with_warning(self):
        probs = (np.full(4, 0.25),)
        plan = SubsamplingPlan(probs, np.array([100], dtype=np.int64), 100)
        with pytest.warns(UserWarning, match="flooring"):
            assert effective_sample_ratio(plan, 50) == 1e-6


class TestMultiDraw:
    def test_mean_identity_and_permutation_invariance(self, rng):
        ds, _ = random_sharded(rng, 600, 2, 2)
        est = multi_draw_estimate(ds, 80, 50, 4, GRID3, rng_seed=3)
        stacked = np.vstack([t.stacked() for t in est.per_draw])
        np.testing.assert_allclose(est.theta_L.stacked(), stacked.mean(axis=0), atol=1e-15)
        # permuting the draws leaves the combined estimate unchanged
        perm = [est.per_draw[i] for i in (2, 0, 3, 1)]
        theta_p, omega_p = combine_draws(perm, est.r_ef)
        np.testing.assert_allclose(theta_p.stacked(), est.theta_L.stacked(), atol=1e-12)
        np.testing.assert_allclose(omega_p, est.omega_hat, atol=1e-12)

    def test_identical_draws_give_zero_covariance(self, rng):
        # one-row shards force every draw to pick the same rows
        shards = tuple(
            Shard(np.array([float(k)]), np.array([[1.0 + k]])) for k in range(3)
        )
        ds = ShardedDataset(shards)
        est = multi_draw_estimate(ds, 6, 6, 3, QuantileGrid([0.5]), rng_seed=0)
        np.testing.assert_allclose(est.omega_hat, 0.0, atol=1e-20)
        ci = confidence_intervals(est, 0.05)
        np.testing.assert_allclose(ci.lower, ci.upper, atol=1e-15)

    def test_omega_scales_quadratically(self, rng):
        ds, _ = random_sharded(rng, 600, 2, 2)
        est = multi_draw_estimate(ds, 80, 50, 5, GRID3, rng_seed=9)
        center = est.theta_L.stacked()
        c = 3.0
        scaled = [
            ThetaEstimate.from_stacked(center + c * (t.stacked() - center), t.p)
            for t in est.per_draw
        ]
        _, omega_scaled = combine_draws(scaled, est.r_ef)
        np.testing.assert_allclose(omega_scaled, c**2 * est.omega_hat, rtol=1e-10, atol=1e-18)

    def test_b_below_two_rejected(self, rng):
        ds, _ = random_sharded(rng, 100, 1, 1)
        with pytest.raises(ValueError):
            multi_draw_estimate(ds, 50, 20, 1, GRID3, 0)

    def test_uniform_method(self, rng):
        ds, _ = random_sharded(rng, 600, 2, 2)
        est = multi_draw_estimate(ds, 80, 50, 3, GRID3, rng_seed=4, method="uniform")
        assert est.method == "uniform"
        assert est.B == 3

    def test_reproducible(self, rng):
        ds, _ = random_sharded(rng, 600, 2, 2)
        e1 = multi_draw_estimate(ds, 80, 50, 3, GRID3, rng_seed=12)
        e2 = multi_draw_estimate(ds, 80, 50, 3, GRID3, rng_seed=12)
        np.testing.assert_array_equal(e1.theta_L.stacked(), e2.theta_L.stacked())
        np.testing.assert_array_equal(e1.omega_hat, e2.omega_hat)

    def test_draw_failure_reports_index(self, rng, monkeypatch):
        ds, _ = random_sharded(rng, 400, 2, 2)
        import cqrsub.twostep as twostep_mod

        real = twostep_mod.solve_weighted_cqr

        def failing(sample, grid, init=None, **kw):
            if init is not None:  # draw solves warm-start at the pilot
                raise SolverError("injected failure")
            return real(sample, grid, init=init, **kw)

        monkeypatch.setattr(twostep_mod, "solve_weighted_cqr", failing)
        with pytest.raises(SolverError, match="draw 0"):
            multi_draw_estimate(ds, 100, 50, 2, GRID3, 0)

    def test_combined_estimate_validation(self, rng):
        ds, _ = random_sharded(rng, 400, 2, 2)
        est = multi_draw_estimate(ds, 80, 40, 3, GRID3, 1)
        with pytest.raises(ValueError, match="mean"):
            CombinedEstimate(
                ThetaEstimate(est.theta_L.beta + 1.0, est.theta_L.b),
                est.per_draw, est.omega_hat, est.r_ef, est.B, est.r0, est.r,
            )


class TestConfidenceIntervals:
    def _fake_estimate(self, omega):
        theta = ThetaEstimate([1.0], [0.0])
        draws = (theta, theta)
        return CombinedEstimate(theta, draws, omega, 1.0, 2, 10, 20)

    def test_standard_normal_quantile(self):
        est = self._fake_estimate(np.zeros((2, 2)))
        ci = confidence_intervals(est, alpha=0.05)
        assert ci.z == pytest.approx(1.959964, abs=5e-7)

    def test_width_uses_diagonal(self):
        omega = np.diag([4.0, 9.0])
        est = self._fake_estimate(omega)
        ci = confidence_intervals(est, alpha=0.05)
        np.testing.assert_allclose(ci.upper - ci.lower, 2 * ci.z * np.array([2.0, 3.0]))

    def test_negative_diagonal_rejected(self):
        theta = ThetaEstimate([1.0], [0.0])
        est = CombinedEstimate.__new__(CombinedEstimate)
        object.__setattr__(est, "theta_L", theta)
        object.__setattr__(est, "omega_hat", np.diag([-1e-8, 1.0]))
        with pytest.raises(ValueError, match="negative"):
            confidence_intervals(est, 0.05)

    def test_alpha_domain(self):
        est = self._fake_estimate(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            confidence_intervals(est, alpha=0.0)
        with pytest.raises(ValueError):
            confidence_intervals(est, alpha=1.0)
