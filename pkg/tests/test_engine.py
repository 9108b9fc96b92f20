import numpy as np
import pytest

from hdsplitplot import (
    ProjectionPair,
    centering_matrix,
    estimate_traces,
    p_value_from,
    pooled_mean,
    q_statistic,
    run_test,
    sample,
    standard_hypothesis,
    standardized_chi2_quantile,
    w_statistic,
)
from hdsplitplot.engine import (
    chi2_cdf,
    chi2_quantile,
    normal_cdf,
    normal_quantile,
)
from hdsplitplot.estimators import DegenerateVarianceError
from hdsplitplot.model import SplitPlotSample

from conftest import make_ar_design


class TestReferenceDistributions:
    def test_chi2_quantile_reference(self):
        assert chi2_quantile(1.0, 0.95) == pytest.approx(3.841459, abs=1e-6)
        assert chi2_quantile(1.0, 0.5) == pytest.approx(0.454936, abs=1e-6)

    def test_chi2_cdf_at_zero(self):
        assert chi2_cdf(3.7, 0.0) == 0.0
        assert chi2_cdf(1.0, -5.0) == 0.0

    def test_normal_quantile_reference(self):
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)
        assert normal_cdf(0.0) == pytest.approx(0.5)

    def test_quantile_inverts_cdf(self, rng):
        for _ in range(30):
            f = float(rng.uniform(1.0, 50.0))
            p = float(rng.uniform(0.01, 0.99))
            assert chi2_cdf(f, chi2_quantile(f, p)) == pytest.approx(p, abs=1e-10)

    def test_non_integer_dof(self):
        q = chi2_quantile(2.5, 0.9)
        assert chi2_cdf(2.5, q) == pytest.approx(0.9, abs=1e-10)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            chi2_quantile(0.0, 0.5)
        with pytest.raises(ValueError):
            chi2_quantile(1.0, 1.0)
        with pytest.raises(ValueError):
            normal_quantile(0.0)


class TestStandardizedQuantile:
    def test_df_one(self):
        # table ingredient: chi2(1) upper 5% point 3.841459
        assert standardized_chi2_quantile(1.0, 0.95) == pytest.approx(
            (3.841459 - 1.0) / np.sqrt(2.0), abs=1e-5
        )
        assert standardized_chi2_quantile(1.0, 0.95) == pytest.approx(2.0092148, abs=1e-6)

    def test_normal_limit(self):
        assert standardized_chi2_quantile(1e6, 0.95) == pytest.approx(1.6449, abs=0.01)

    def test_median_df_one(self):
        # table ingredient: chi2(1) median 0.454936
        assert standardized_chi2_quantile(1.0, 0.5) == pytest.approx(
            (0.454936 - 1.0) / np.sqrt(2.0), abs=1e-5
        )
        assert standardized_chi2_quantile(1.0, 0.5) == pytest.approx(-0.3854182, abs=1e-6)


class TestPValue:
    def test_inverse_consistency(self):
        for f in (1.0, 2.5, 7.0, 40.0):
            w = standardized_chi2_quantile(f, 0.95)
            assert p_value_from(w, f) == pytest.approx(0.05, abs=1e-8)

    def test_extremes(self):
        assert p_value_from(1e9, 3.0) == pytest.approx(0.0, abs=1e-12)
        f = 4.0
        left_edge = -f / np.sqrt(2.0 * f)
        assert p_value_from(left_edge, f) == 1.0
        assert p_value_from(left_edge - 1.0, f) == 1.0


class TestQStatistic:
    def test_kernel_mean_vanishes(self):
        # equal group means lie in the kernel of the group-contrast block
        row = np.array([1.0, 2.0, 3.0])
        s = SplitPlotSample([np.tile(row, (4, 1)), np.tile(row, (5, 1))])
        pair = standard_hypothesis("group", a=2, d=3)
        assert q_statistic(s, pair) == pytest.approx(0.0, abs=1e-10)

    def test_unit_mean_full_projector(self):
        e1 = np.zeros(4)
        e1[0] = 1.0
        s = SplitPlotSample([np.tile(e1, (7, 1))])
        pair = ProjectionPair(np.array([[1.0]]), np.eye(4))
        assert q_statistic(s, pair) == pytest.approx(7.0, rel=1e-12)

    def test_matches_materialized_kronecker(self, rng):
        s = SplitPlotSample([rng.normal(size=(5, 3)), rng.normal(size=(6, 3))])
        pair = standard_hypothesis("interaction", a=2, d=3)
        mean_vec = pooled_mean(s)
        direct = s.total * mean_vec @ pair.full() @ mean_vec
        assert q_statistic(s, pair) == pytest.approx(direct, abs=1e-10)

    def test_dimension_mismatch(self, rng):
        s = SplitPlotSample([rng.normal(size=(4, 3))])
        pair = standard_hypothesis("time", a=2, d=3)
        with pytest.raises(ValueError, match="projection pair"):
            q_statistic(s, pair)


class TestWStatistic:
    def test_matches_formula(self, rng):
        design = make_ar_design(d=3, n=(8, 9))
        s = sample(design, seed=4)
        pair = standard_hypothesis("time", a=2, d=3)
        est = estimate_traces(s, pair, b_draws=100, seed=0)
        w = w_statistic(s, pair, est, correct=False)
        from hdsplitplot.engine import null_mean

        by_hand = (q_statistic(s, pair) - null_mean(s, pair, est)) / np.sqrt(2 * est.a4)
        assert w == pytest.approx(by_hand, rel=1e-12)
        corrected = w_statistic(s, pair, est, correct=True)
        assert corrected == pytest.approx(w * np.sqrt(17 / 16), rel=1e-12)

    def test_scale_invariance(self, rng):
        design = make_ar_design(d=3, n=(8, 9))
        s = sample(design, seed=5)
        pair = standard_hypothesis("time", a=2, d=3)
        scaled = SplitPlotSample([g * 3.7 for g in s.groups])
        w1 = w_statistic(s, pair, estimate_traces(s, pair, b_draws=50, seed=1))
        w2 = w_statistic(scaled, pair, estimate_traces(scaled, pair, b_draws=50, seed=1))
        assert w2 == pytest.approx(w1, rel=1e-9)

    def test_null_centering(self):
        design = make_ar_design(d=10, n=(10, 15))
        pair = standard_hypothesis("time", a=2, d=10)
        vals = np.empty(2000)
        for r in range(vals.size):
            s = sample(design, seed=r)
            est = estimate_traces(s, pair, with_dof=False)
            vals[r] = w_statistic(s, pair, est)
        assert -0.1 <= vals.mean() <= 0.1

    def test_degenerate_variance(self):
        s = SplitPlotSample([np.tile([1.0, 2.0], (6, 1))])
        pair = ProjectionPair(np.array([[1.0]]), centering_matrix(2))
        est = estimate_traces(s, pair, with_dof=False)
        with pytest.raises(DegenerateVarianceError):
            w_statistic(s, pair, est)


class TestRunTest:
    def test_deep_alternative_rejects(self):
        d = 40
        means = np.zeros((2, d))
        means[0] = 3.0  # strong shift on the group-average scale
        design = make_ar_design(d=d, n=(20, 30), means=means)
        pair = standard_hypothesis("group", a=2, d=d)
        rejected = 0
        for seed in range(50):
            res = run_test(sample(design, seed=seed), pair, b_draws=2000, seed=seed)
            rejected += res.p_value < 0.01
        assert rejected >= 50 * 0.99

    def test_within_group_permutation_invariance(self, rng):
        design = make_ar_design(d=4, n=(7, 8))
        s = sample(design, seed=6)
        permuted = SplitPlotSample(
            [g[rng.permutation(len(g))] for g in s.groups]
        )
        pair = standard_hypothesis("time", a=2, d=4)
        r1 = run_test(s, pair, b_draws=300, seed=0)
        r2 = run_test(permuted, pair, b_draws=300, seed=0)
        assert r2.q == pytest.approx(r1.q, rel=1e-12)
        assert r2.e_hat == pytest.approx(r1.e_hat, rel=1e-12)
        assert r2.var_hat == pytest.approx(r1.var_hat, rel=1e-12)
        assert r2.w == pytest.approx(r1.w, rel=1e-12)

    def test_decision_monotonicity_in_alpha(self):
        design = make_ar_design(d=6, n=(8, 10))
        pair = standard_hypothesis("time", a=2, d=6)
        for seed in range(10):
            s = sample(design, seed=seed)
            previous = {"phi_star": False, "psi_z": False, "psi_chi": False}
            for alpha in (0.01, 0.05, 0.1, 0.2, 0.5):
                res = run_test(s, pair, alpha=alpha, b_draws=400, seed=seed)
                for test, rejected in res.decisions.items():
                    assert not (previous[test] and not rejected)
                    previous[test] = rejected

    def test_phi_star_consistent_with_p_value(self):
        design = make_ar_design(d=5, n=(7, 9))
        pair = standard_hypothesis("time", a=2, d=5)
        for seed in range(20):
            res = run_test(sample(design, seed=seed), pair, b_draws=300, seed=seed)
            assert res.decisions["phi_star"] == (res.p_value < res.alpha)

    def test_forced_df_one_equals_chi_test(self):
        # the estimated-df critical value at f = 1 is the chi-square(1) one
        for alpha in (0.01, 0.05, 0.1):
            assert standardized_chi2_quantile(1.0, 1 - alpha) == pytest.approx(
                standardized_chi2_quantile(1.0, 1 - alpha), rel=0
            )
            z = normal_quantile(1 - alpha)
            assert abs(standardized_chi2_quantile(1e6, 1 - alpha) - z) <= 1e-2

    def test_degraded_mode_small_groups(self):
        design = make_ar_design(d=3, n=(4, 5))
        pair = standard_hypothesis("time", a=2, d=3)
        with pytest.warns(UserWarning, match="fewer than 6"):
            res = run_test(sample(design, seed=0), pair)
        assert res.f_hat is None and res.p_value is None
        assert res.decisions["phi_star"] is None
        assert isinstance(res.decisions["psi_z"], bool)
        flat = res.flat()
        assert flat["f_hat"] == "" and flat["p_value"] == ""

    def test_serialization_round_trip(self):
        design = make_ar_design(d=4, n=(6, 8))
        pair = standard_hypothesis("time", a=2, d=4)
        res = run_test(sample(design, seed=1), pair, b_draws=200, seed=9)
        csv_text = res.to_csv()
        lines = csv_text.strip().splitlines()
        assert lines[0].startswith("#")
        header = lines[1].split(",")
        assert header == list(res.CSV_FIELDS)
        row = dict(zip(header, lines[2].split(",")))
        assert float(row["w"]) == pytest.approx(res.w)
        assert row["B"] == "200" and row["seed"] == "9"
        import json

        payload = json.loads(res.to_json())
        assert payload["version"] == "0.1.0"
        assert payload["reject_psi_z"] == res.decisions["psi_z"]

    def test_null_p_values_near_uniform(self):
        design = make_ar_design(d=100, n=(20, 30))
        pair = standard_hypothesis("time", a=2, d=100)
        reps = 1500
        pvals = np.empty(reps)
        for r in range(reps):
            res = run_test(
                sample(design, seed=r), pair, b_draws=500 * 50, seed=r
            )
            pvals[r] = res.p_value
        grid = np.sort(pvals)
        ks = np.max(np.abs(grid - (np.arange(1, reps + 1)) / reps))
        assert ks <= 0.05

    def test_alpha_validation(self, two_group_design):
        s = sample(two_group_design, seed=0)
        pair = standard_hypothesis("time", a=2, d=4)
        with pytest.raises(ValueError, match="alpha"):
            run_test(s, pair, alpha=1.5)
