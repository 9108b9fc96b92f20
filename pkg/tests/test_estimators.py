import itertools
import math

import numpy as np
import pytest

from hdsplitplot import (
    ProjectionPair,
    ar1_covariance,
    centering_matrix,
    estimate_traces,
    null_mean_estimate,
    sample,
    standard_hypothesis,
    subsampled_suite,
    tau_f_hat,
    trace_powers,
    trace_sigma,
    trace_sigma_pair,
    trace_sigma_sq,
    trace_tv_cube,
    trace_tv_cube_common,
    trace_tv_cube_common_subsampled,
    trace_tv_cube_subsampled,
    trace_tv_quartic_subsampled,
    trace_tv_sq,
)
from hdsplitplot.estimators import (
    InsufficientSampleError,
    TraceEstimates,
    WorkCapExceededError,
    trace_sigma_definitional,
)
from hdsplitplot.model import SplitPlotSample

from conftest import make_ar_design


def brute_cube(groups, t_whole, t_sub):
    """Independent slow oracle for the exact cube estimator, built from raw
    vectors rather than Gram tables."""
    a = len(groups)
    big_n = sum(len(g) for g in groups)
    scale = [math.sqrt(big_n / len(g)) for g in groups]
    t_full = np.kron(t_whole, t_sub)

    def z(idx_pairs):
        return np.concatenate(
            [scale[i] * (groups[i][p] - groups[i][q]) for i, (p, q) in enumerate(idx_pairs)]
        )

    tuples = [list(itertools.permutations(range(len(g)), 6)) for g in groups]
    total = 0.0
    count = 0
    for combo in itertools.product(*tuples):
        za = z([(t[0], t[1]) for t in combo])
        zb = z([(t[2], t[3]) for t in combo])
        zc = z([(t[4], t[5]) for t in combo])
        total += (za @ t_full @ zb) * (zb @ t_full @ zc) * (zc @ t_full @ za)
        count += 1
    return total / (8.0 * count)


def identical_rows_sample(n=(6, 7), d=3):
    return SplitPlotSample(
        [np.tile(np.arange(1.0, d + 1.0) * (i + 1), (ni, 1)) for i, ni in enumerate(n)]
    )


class TestTraceSigma:
    def test_single_pair(self, rng):
        x = rng.normal(size=(2, 4))
        ts = centering_matrix(4)
        y = x[0] - x[1]
        assert trace_sigma(x, ts) == pytest.approx(0.5 * y @ ts @ y, rel=1e-12)

    def test_identical_rows_vanish(self):
        x = np.tile([1.0, 2.0, 3.0], (5, 1))
        assert trace_sigma(x, centering_matrix(3)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_definitional(self, rng):
        x = rng.normal(size=(7, 3)) + 5.0
        ts = centering_matrix(3)
        assert trace_sigma(x, ts) == pytest.approx(
            trace_sigma_definitional(x, ts), rel=1e-12
        )

    def test_insufficient_sample(self):
        with pytest.raises(InsufficientSampleError):
            trace_sigma(np.zeros((1, 3)), centering_matrix(3))

    def test_unbiased_monte_carlo(self):
        d, n, reps = 4, 6, 20_000
        sigma = ar1_covariance(d, 0.6)
        ts = centering_matrix(d)
        target = float(np.trace(ts @ sigma))
        chol = np.linalg.cholesky(sigma)
        gen = np.random.default_rng(5)
        vals = np.empty(reps)
        for r in range(reps):
            x = gen.normal(size=(n, d)) @ chol.T + 3.0
            vals[r] = trace_sigma(x, ts)
        se = vals.std(ddof=1) / np.sqrt(reps)
        assert abs(vals.mean() - target) <= 3.0 * se


class TestTraceSigmaPair:
    def test_forms_agree(self, rng):
        xi = rng.normal(size=(3, 2))
        xr = rng.normal(size=(3, 2))
        same = trace_sigma_pair(xi, xr, np.eye(2), method="hadamard")
        defn = trace_sigma_pair(xi, xr, np.eye(2), method="definitional")
        assert same == pytest.approx(defn, rel=1e-12)

    def test_identical_rows_vanish(self, rng):
        xi = np.tile([2.0, 1.0], (4, 1))
        xr = rng.normal(size=(5, 2))
        assert trace_sigma_pair(xi, xr, np.eye(2)) == pytest.approx(0.0, abs=1e-12)

    def test_nonnegative(self, rng):
        for _ in range(20):
            xi = rng.normal(size=(4, 3))
            xr = rng.normal(size=(6, 3))
            assert trace_sigma_pair(xi, xr, centering_matrix(3)) >= 0.0

    def test_unbiased_monte_carlo(self):
        d, reps = 3, 20_000
        s1, s2 = ar1_covariance(d, 0.6), ar1_covariance(d, 0.65)
        ts = centering_matrix(d)
        target = float(np.trace(ts @ s1 @ ts @ s2))
        l1, l2 = np.linalg.cholesky(s1), np.linalg.cholesky(s2)
        gen = np.random.default_rng(6)
        vals = np.empty(reps)
        for r in range(reps):
            xi = gen.normal(size=(5, d)) @ l1.T
            xr = gen.normal(size=(6, d)) @ l2.T - 2.0
            vals[r] = trace_sigma_pair(xi, xr, ts)
        se = vals.std(ddof=1) / np.sqrt(reps)
        assert abs(vals.mean() - target) <= 3.0 * se


class TestTraceSigmaSq:
    def test_identical_rows_vanish(self):
        x = np.tile([1.0, 2.0], (5, 1))
        assert trace_sigma_sq(x, np.eye(2)) == pytest.approx(0.0, abs=1e-12)

    def test_forms_agree_minimum_n(self, rng):
        x = rng.normal(size=(4, 2)) + 1.5
        ts = centering_matrix(2)
        assert trace_sigma_sq(x, ts, method="expanded") == pytest.approx(
            trace_sigma_sq(x, ts, method="definitional"), rel=1e-10, abs=1e-12
        )

    def test_forms_agree_random_sizes(self, rng):
        for _ in range(10):
            n = int(rng.integers(4, 9))
            d = int(rng.integers(2, 5))
            x = rng.normal(size=(n, d)) * 2.0 + rng.normal(size=d)
            h = rng.normal(size=(int(rng.integers(1, d + 1)), d))
            from hdsplitplot import projector_from_hypothesis

            ts = projector_from_hypothesis(h)
            assert trace_sigma_sq(x, ts) == pytest.approx(
                trace_sigma_sq(x, ts, method="definitional"), rel=1e-9, abs=1e-12
            )

    def test_nonnegative_definitional_form(self, rng):
        for _ in range(20):
            x = rng.normal(size=(5, 3))
            assert trace_sigma_sq(x, centering_matrix(3)) >= -1e-12

    def test_insufficient_sample(self):
        with pytest.raises(InsufficientSampleError):
            trace_sigma_sq(np.zeros((3, 2)), np.eye(2))

    def test_unbiased_monte_carlo(self):
        d, n, reps = 4, 10, 20_000
        sigma = ar1_covariance(d, 0.6)
        ts = centering_matrix(d)
        target = float(np.trace((ts @ sigma) @ (ts @ sigma)))
        chol = np.linalg.cholesky(sigma)
        gen = np.random.default_rng(7)
        vals = np.empty(reps)
        for r in range(reps):
            x = gen.normal(size=(n, d)) @ chol.T
            vals[r] = trace_sigma_sq(x, ts)
        se = vals.std(ddof=1) / np.sqrt(reps)
        assert abs(vals.mean() - target) <= 3.0 * se


class TestCombinedSquare:
    def test_single_group_reduction(self, rng):
        x = rng.normal(size=(6, 3))
        s = SplitPlotSample([x])
        pair = ProjectionPair(np.array([[1.0]]), centering_matrix(3))
        assert trace_tv_sq(s, pair) == pytest.approx(
            trace_sigma_sq(x, pair.t_sub), rel=1e-12
        )

    def test_zero_whole_plot(self, rng):
        s = SplitPlotSample([rng.normal(size=(5, 2)), rng.normal(size=(5, 2))])
        pair = ProjectionPair(np.zeros((2, 2)), centering_matrix(2))
        assert trace_tv_sq(s, pair) == 0.0

    def test_unbiased_monte_carlo(self):
        design = make_ar_design(d=3, n=(10, 15))
        pair = standard_hypothesis("time", a=2, d=3)
        target = trace_powers(pair, design, 2)
        vals = np.empty(4000)
        for r in range(vals.size):
            vals[r] = trace_tv_sq(sample(design, seed=r), pair)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se


class TestNullMeanEstimate:
    def test_single_group(self, rng):
        x = rng.normal(size=(5, 3))
        s = SplitPlotSample([x])
        pair = ProjectionPair(np.array([[1.0]]), centering_matrix(3))
        assert null_mean_estimate(s, pair) == pytest.approx(
            trace_sigma(x, pair.t_sub), rel=1e-12
        )

    def test_zero_diagonal(self, rng):
        s = SplitPlotSample([rng.normal(size=(4, 2)), rng.normal(size=(4, 2))])
        t_whole = np.array([[0.0, 0.0], [0.0, 0.0]])
        pair = ProjectionPair(t_whole, centering_matrix(2))
        assert null_mean_estimate(s, pair) == 0.0

    def test_unbiased_monte_carlo(self):
        design = make_ar_design(d=4, n=(6, 8))
        pair = standard_hypothesis("group", a=2, d=4)
        target = trace_powers(pair, design, 1)
        vals = np.empty(5000)
        for r in range(vals.size):
            vals[r] = null_mean_estimate(sample(design, seed=r), pair)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se


class TestCubeEstimators:
    def test_identical_rows_vanish(self):
        s = identical_rows_sample(n=(6, 6), d=2)
        pair = standard_hypothesis("time", a=2, d=2)
        assert trace_tv_cube(s, pair) == pytest.approx(0.0, abs=1e-12)
        assert trace_tv_cube_subsampled(s, pair, 50, seed=1) == pytest.approx(0.0, abs=1e-12)

    def test_exact_matches_independent_brute_force(self, rng):
        x = rng.normal(size=(6, 2)) + 2.0
        s = SplitPlotSample([x])
        pair = ProjectionPair(np.array([[1.0]]), centering_matrix(2))
        ours = trace_tv_cube(s, pair)
        oracle = brute_cube([x], pair.t_whole, pair.t_sub)
        assert ours == pytest.approx(oracle, rel=1e-10)

    def test_exact_matches_brute_force_two_groups(self, rng):
        groups = [rng.normal(size=(6, 2)), rng.normal(size=(6, 2)) * 0.5]
        s = SplitPlotSample(groups)
        pair = standard_hypothesis("time", a=2, d=2)
        # brute force over the product space is 720^2 kernel evaluations
        ours = trace_tv_cube(s, pair)
        oracle = brute_cube(groups, pair.t_whole, pair.t_sub)
        assert ours == pytest.approx(oracle, rel=1e-10)

    def test_exact_unbiased_monte_carlo(self):
        design = make_ar_design(d=2, n=(6, 6))
        pair = standard_hypothesis("time", a=2, d=2)
        target = trace_powers(pair, design, 3)
        vals = np.empty(200)
        for r in range(vals.size):
            vals[r] = trace_tv_cube(sample(design, seed=r), pair)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se

    def test_subsampled_consistent_with_exact(self):
        design = make_ar_design(d=2, n=(6, 6))
        pair = standard_hypothesis("time", a=2, d=2)
        s = sample(design, seed=3)
        exact = trace_tv_cube(s, pair)
        sub = trace_tv_cube_subsampled(s, pair, b_draws=100_000, seed=0)
        assert abs(sub - exact) <= 0.05 * abs(exact)

    def test_subsampled_deterministic(self, two_group_design):
        s = sample(two_group_design, seed=9)
        pair = standard_hypothesis("time", a=2, d=4)
        v1 = trace_tv_cube_subsampled(s, pair, 500, seed=42)
        v2 = trace_tv_cube_subsampled(s, pair, 500, seed=42)
        assert v1 == v2
        assert v1 != trace_tv_cube_subsampled(s, pair, 500, seed=43)

    def test_work_cap(self):
        s = identical_rows_sample(n=(8, 8), d=2)
        pair = standard_hypothesis("time", a=2, d=2)
        with pytest.raises(WorkCapExceededError):
            trace_tv_cube(s, pair, work_cap=10_000)

    def test_insufficient_sample(self, rng):
        s = SplitPlotSample([rng.normal(size=(5, 2)), rng.normal(size=(6, 2))])
        pair = standard_hypothesis("time", a=2, d=2)
        with pytest.raises(InsufficientSampleError):
            trace_tv_cube(s, pair)


class TestQuarticEstimators:
    def test_identical_rows_vanish(self):
        s = identical_rows_sample(n=(8, 8), d=2)
        pair = standard_hypothesis("time", a=2, d=2)
        assert trace_tv_quartic_subsampled(s, pair, 60, seed=0) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_seed_determinism(self, rng):
        s = SplitPlotSample([rng.normal(size=(9, 2)), rng.normal(size=(8, 2))])
        pair = standard_hypothesis("time", a=2, d=2)
        assert trace_tv_quartic_subsampled(s, pair, 80, seed=5) == pytest.approx(
            trace_tv_quartic_subsampled(s, pair, 80, seed=5), rel=0
        )

    def test_unbiased_monte_carlo_single_group(self):
        design = make_ar_design(d=2, n=(8,))
        pair = ProjectionPair(np.array([[1.0]]), centering_matrix(2))
        target = trace_powers(pair, design, 4)
        vals = np.empty(3000)
        for r in range(vals.size):
            vals[r] = trace_tv_quartic_subsampled(sample(design, seed=r), pair, 100, seed=r)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se

    def test_insufficient_sample(self, rng):
        s = SplitPlotSample([rng.normal(size=(7, 2))])
        pair = ProjectionPair(np.array([[1.0]]), centering_matrix(2))
        with pytest.raises(InsufficientSampleError):
            trace_tv_quartic_subsampled(s, pair, 10, seed=0)


class TestCommonIndexCube:
    def test_identity_permutation_matches_exact_single_group(self, rng):
        x = rng.normal(size=(6, 2))
        s = SplitPlotSample([x])
        pair = ProjectionPair(np.array([[1.0]]), centering_matrix(2))
        common = trace_tv_cube_common(s, pair, n_perms=1, seed=0, _identity_perms=True)
        exact = trace_tv_cube(s, pair)
        assert common == pytest.approx(exact, rel=1e-10)

    def test_identical_rows_vanish(self):
        s = identical_rows_sample(n=(6, 7), d=2)
        pair = standard_hypothesis("time", a=2, d=2)
        assert trace_tv_cube_common(s, pair, seed=1) == pytest.approx(0.0, abs=1e-12)

    def test_unbiased_monte_carlo_three_groups(self):
        design = make_ar_design(d=2, n=(6, 7, 8), rhos=(0.6, 0.65, 0.5))
        pair = standard_hypothesis("time", a=3, d=2)
        target = trace_powers(pair, design, 3)
        vals = np.empty(400)
        for r in range(vals.size):
            vals[r] = trace_tv_cube_common(sample(design, seed=r), pair, n_perms=2, seed=r)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se

    def test_subsampled_deterministic_and_unbiased(self):
        design = make_ar_design(d=2, n=(6, 7))
        pair = standard_hypothesis("time", a=2, d=2)
        s = sample(design, seed=0)
        v1 = trace_tv_cube_common_subsampled(s, pair, n_perms=2, b_draws=50, seed=3)
        v2 = trace_tv_cube_common_subsampled(s, pair, n_perms=2, b_draws=50, seed=3)
        assert v1 == v2
        target = trace_powers(pair, design, 3)
        vals = np.empty(600)
        for r in range(vals.size):
            vals[r] = trace_tv_cube_common_subsampled(
                sample(design, seed=r), pair, n_perms=1, b_draws=60, seed=r
            )
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se


class TestSubsampledSuite:
    def test_identical_rows_vanish(self):
        s = identical_rows_sample(n=(6, 6), d=2)
        pair = standard_hypothesis("time", a=2, d=2)
        est = subsampled_suite(s, pair, 40, seed=0)
        assert est.a4 == pytest.approx(0.0, abs=1e-12)

    def test_high_draw_count_approaches_exact(self):
        design = make_ar_design(d=2, n=(6, 6))
        pair = standard_hypothesis("time", a=2, d=2)
        s = sample(design, seed=21)
        exact = trace_tv_sq(s, pair)
        est = subsampled_suite(s, pair, 200_000, seed=1)
        assert abs(est.a4 - exact) <= 0.05 * exact

    def test_unbiased_monte_carlo(self):
        design = make_ar_design(d=3, n=(6, 8))
        pair = standard_hypothesis("time", a=2, d=3)
        target = trace_powers(pair, design, 2)
        vals = np.empty(4000)
        for r in range(vals.size):
            vals[r] = subsampled_suite(sample(design, seed=r), pair, 60, seed=r).a4
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se

    def test_small_groups_drop_square_terms(self, rng):
        s = SplitPlotSample([rng.normal(size=(3, 2)), rng.normal(size=(3, 2))])
        pair = standard_hypothesis("time", a=2, d=2)
        est = subsampled_suite(s, pair, 30, seed=0)
        assert est.a3 is None and est.a4 is None
        assert est.a1.shape == (2,)


class TestDegreesOfFreedom:
    def _estimates(self, a4, c5):
        return TraceEstimates(
            a1=np.zeros(2), a2=np.zeros((2, 2)), a3=np.zeros(2), a4=a4, c5=c5
        )

    def test_boundary_tau_one(self):
        tau, f = tau_f_hat(self._estimates(a4=4.0, c5=8.0), rank_cap=10)
        assert tau == pytest.approx(1.0)
        assert f == pytest.approx(1.0)

    def test_zero_cube_clamps_to_rank(self):
        tau, f = tau_f_hat(self._estimates(a4=2.0, c5=0.0), rank_cap=12)
        assert tau == 0.0
        assert f == 12.0

    def test_above_one_clamped(self):
        tau, f = tau_f_hat(self._estimates(a4=1.0, c5=5.0), rank_cap=10)
        assert tau == 1.0
        assert f == 1.0

    def test_degenerate_variance(self):
        from hdsplitplot.estimators import DegenerateVarianceError

        with pytest.raises(DegenerateVarianceError):
            tau_f_hat(self._estimates(a4=0.0, c5=1.0), rank_cap=10)


class TestInvariances:
    def _sample_and_pair(self, rng, d=3, n=(6, 7)):
        groups = [rng.normal(size=(ni, d)) @ np.diag([1.0, 2.0, 0.5]) for ni in n]
        s = SplitPlotSample(groups)
        pair = standard_hypothesis("time", a=len(n), d=d)
        return s, pair

    def test_shift_invariance(self, rng):
        s, pair = self._sample_and_pair(rng)
        shifts = [rng.normal(size=3) * 5.0 for _ in s.groups]
        shifted = SplitPlotSample([g + m for g, m in zip(s.groups, shifts)])

        def all_stats(smp):
            est = estimate_traces(smp, pair, mode="efficient", b_draws=200, seed=11)
            c7 = trace_tv_cube_common_subsampled(smp, pair, 2, 100, seed=4)
            return np.array([*est.a1, est.a2[1, 0], *est.a3, est.a4, est.c5, c7])

        base, moved = all_stats(s), all_stats(shifted)
        np.testing.assert_allclose(moved, base, rtol=1e-9, atol=1e-12)

    def test_scale_equivariance(self, rng):
        s, pair = self._sample_and_pair(rng)
        c = 1.7
        scaled = SplitPlotSample([g * c for g in s.groups])

        def stats(smp):
            est = estimate_traces(smp, pair, mode="efficient", b_draws=150, seed=2)
            c6 = trace_tv_quartic_subsampled(smp, pair, 80, seed=3) if min(smp.n) >= 8 else None
            return est, c6

        base, _ = stats(s)
        moved, _ = stats(scaled)
        np.testing.assert_allclose(moved.a1, base.a1 * c**2, rtol=1e-9)
        np.testing.assert_allclose(moved.a2[1, 0], base.a2[1, 0] * c**4, rtol=1e-9)
        np.testing.assert_allclose(moved.a3, base.a3 * c**4, rtol=1e-9)
        assert moved.a4 == pytest.approx(base.a4 * c**4, rel=1e-9)
        assert moved.c5 == pytest.approx(base.c5 * c**6, rel=1e-9)
        assert moved.tau_p_hat == pytest.approx(base.tau_p_hat, rel=1e-9)
        assert moved.f_p_hat == pytest.approx(base.f_p_hat, rel=1e-9)

    def test_quartic_scale_power(self, rng):
        groups = [rng.normal(size=(8, 2)), rng.normal(size=(9, 2))]
        s = SplitPlotSample(groups)
        pair = standard_hypothesis("time", a=2, d=2)
        c = 2.0
        scaled = SplitPlotSample([g * c for g in groups])
        base = trace_tv_quartic_subsampled(s, pair, 70, seed=9)
        moved = trace_tv_quartic_subsampled(scaled, pair, 70, seed=9)
        assert moved == pytest.approx(base * c**8, rel=1e-9)

    def test_unbiasedness_not_affected_by_group_means(self):
        d = 3
        means = np.array([np.linspace(0, 4, d), np.full(d, -2.0)])
        design = make_ar_design(d=d, n=(6, 8), means=means)
        pair = standard_hypothesis("time", a=2, d=d)
        target = trace_powers(pair, design, 2)
        vals = np.empty(4000)
        for r in range(vals.size):
            vals[r] = trace_tv_sq(sample(design, seed=r), pair)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target) <= 3.0 * se


class TestEstimateTracesDriver:
    def test_meta_record(self, two_group_design):
        s = sample(two_group_design, seed=1)
        pair = standard_hypothesis("time", a=2, d=4)
        est = estimate_traces(s, pair, b_draws=100, seed=5)
        assert est.meta == {"mode": "efficient", "B": 100, "w": None, "seed": 5}
        rec = est.to_record()
        assert rec["a4"] == est.a4 and rec["B"] == 100 and rec["mode"] == "efficient"

    def test_exact_mode(self, two_group_design):
        design = make_ar_design(d=2, n=(6, 6))
        s = sample(design, seed=2)
        pair = standard_hypothesis("time", a=2, d=2)
        est = estimate_traces(s, pair, mode="exact")
        assert est.c5 == pytest.approx(trace_tv_cube(s, pair), rel=1e-12)

    def test_c7_driver(self, two_group_design):
        s = sample(two_group_design, seed=3)
        pair = standard_hypothesis("time", a=2, d=4)
        est = estimate_traces(s, pair, b_draws=80, n_perms=2, seed=7, dof_estimator="c7")
        assert est.c5 is None and est.c7 is not None
        assert est.f_p_hat >= 1.0
        assert est.meta["w"] == 2
