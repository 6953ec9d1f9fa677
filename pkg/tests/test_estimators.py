import numpy as np
import pytest

from armfit.design import Assignment, TreatmentStructure, complete_randomize, derive_seed
from armfit.errors import RankError, ValidationError
from armfit.estimators import (
    ExperimentData,
    adjusted_means,
    build_spec,
    estimate,
    rem_plugin_cov,
    rem_reference_sample,
    restriction_equal_correlation,
    restriction_separable,
    restriction_zero_correlation,
    wald_restriction_test,
    within_group_slopes,
)
from armfit.oracle import PotentialTable, nu_factor, pop_means
from armfit.special import chi2_quantile


def make_data(seed, sizes=(13, 13, 14), n_cov=2, slopes=None):
    rng = np.random.default_rng(seed)
    q = len(sizes)
    n = sum(sizes)
    z = np.repeat(np.arange(1, q + 1), sizes)
    rng.shuffle(z)
    x = rng.standard_normal((n, n_cov))
    if slopes is None:
        slopes = rng.standard_normal((q, n_cov))
    y = z.astype(float) + np.einsum("ij,ij->i", x, slopes[z - 1]) + rng.standard_normal(n)
    return ExperimentData.build(y, z, x)


class TestExperimentData:
    def test_centering_and_shift(self):
        x = np.arange(8.0).reshape(4, 2) + 10.0
        data = ExperimentData.build([1.0, 2, 3, 4], [1, 1, 2, 2], x)
        assert np.abs(data.X.mean(axis=0)).max() < 1e-12
        assert data.x_shift == pytest.approx(x.mean(axis=0))

    def test_missing_arm(self):
        with pytest.raises(ValidationError, match="arm 2"):
            ExperimentData.build([1.0, 2, 3], [1, 1, 3])

    def test_structure_mismatch(self):
        with pytest.raises(ValidationError):
            ExperimentData.build([1.0, 2, 3], [1, 1, 2], structure=TreatmentStructure((1, 2)))


class TestBuildSpec:
    @pytest.mark.parametrize(
        "kind,q,j,expected",
        [("N", 3, 2, 3), ("F", 3, 2, 5), ("L", 3, 2, 9), ("F", 3, 0, 3)],
    )
    def test_column_counts(self, kind, q, j, expected):
        s = TreatmentStructure((4,) * q)
        assert build_spec(kind, s, j).n_cols == expected

    def test_interacted_layout_is_arm_major(self):
        s = TreatmentStructure((2, 2))
        builder = build_spec("L", s, 2)
        assert builder.column_labels == (
            "arm1", "arm2", "arm1:x1", "arm1:x2", "arm2:x1", "arm2:x2",
        )
        x = np.array([[1.0, 2], [3, 4], [5, 6], [7, 8]])
        design = builder.build(Assignment([1, 2, 1, 2]), x)
        assert design.values[0].tolist() == [1, 0, 1, 2, 0, 0]
        assert design.values[1].tolist() == [0, 1, 0, 0, 3, 4]


class TestRestrictionBuilders:
    def test_zero_correlation_structure(self):
        r = restriction_zero_correlation(2, 1)
        assert r.matrix.tolist() == [[0, 0, 1, 0], [0, 0, 0, 1]]
        assert np.all(r.rhs == 0) and r.kind == "correlation_only"
        assert np.linalg.matrix_rank(r.matrix) == 2

    def test_equal_correlation_structure(self):
        r = restriction_equal_correlation(2, 1)
        assert r.matrix.tolist() == [[0, 0, -1, 1]]
        assert np.linalg.matrix_rank(restriction_equal_correlation(3, 2).matrix) == 4

    def test_separable_no_interaction_example(self):
        # Contrast on the means plus the same contrast on the interactions.
        c_ab = 0.5 * np.array([1.0, -1.0, -1.0, 1.0])
        r = restriction_separable(
            c_ab, [0.0], np.kron(c_ab, np.eye(2)), None, n_arms=4, n_covariates=2
        )
        assert r.kind == "separable"
        assert r.matrix.shape == (3, 12)
        assert r.rho_y.shape == (1, 4)

    def test_empty_blocks(self):
        r = restriction_separable(None, None, np.eye(2), None, n_arms=2, n_covariates=1)
        assert r.kind == "correlation_only"
        r2 = restriction_separable(None, None, None, None, n_arms=2, n_covariates=1)
        assert r2.kind == "empty"

    def test_rank_deficient_block(self):
        bad = np.array([[1.0, 1.0], [2.0, 2.0]])
        with pytest.raises(RankError):
            restriction_separable(None, None, bad, None, n_arms=2, n_covariates=1)


class TestEstimate:
    def test_difference_in_means(self):
        data = ExperimentData.build([1.0, 2, 3, 5], [1, 1, 2, 2])
        res = estimate(data, "N", contrast=[[-1.0, 1.0]])
        assert res.tau_hat == pytest.approx([2.5])
        assert res.gamma_hat.size == 0

    def test_restriction_requires_interacted(self):
        data = make_data(0)
        with pytest.raises(ValidationError, match="kind L"):
            estimate(data, "N", restriction_zero_correlation(3, 2))

    def test_zero_correlation_reproduces_unadjusted(self):
        data = make_data(1)
        rn = estimate(data, "N")
        rr = estimate(data, "L", restriction_zero_correlation(3, 2))
        assert rr.y_hat == pytest.approx(rn.y_hat, rel=1e-10)
        assert rr.y_hat_cov == pytest.approx(rn.y_hat_cov, rel=1e-8)

    def test_equal_correlation_reproduces_additive(self):
        data = make_data(2)
        rf = estimate(data, "F")
        rr = estimate(data, "L", restriction_equal_correlation(3, 2))
        assert rr.y_hat == pytest.approx(rf.y_hat, rel=1e-10)
        assert rr.y_hat_cov == pytest.approx(rf.y_hat_cov, rel=1e-8)
        assert rr.gamma_hat == pytest.approx(rf.gamma_hat, rel=1e-8)

    def test_interacted_equals_per_group_slope_oracle(self):
        rng = np.random.default_rng(3)
        z = np.repeat([1, 2], 15)
        rng.shuffle(z)
        x = rng.standard_normal((30, 1))
        y = rng.standard_normal(30) + np.where(z == 1, 1.0, -1.0) * x[:, 0]
        data = ExperimentData.build(y, z, x)
        res = estimate(data, "L")
        xc = data.X
        for q in (1, 2):
            mask = z == q
            # Independent oracle: simple within-group regression slope.
            slope = np.polyfit(xc[mask, 0], y[mask], 1)[0]
            expected = y[mask].mean() - xc[mask, 0].mean() * slope
            assert res.y_hat[q - 1] == pytest.approx(expected, abs=1e-10)

    def test_tau_is_exact_contrast_of_means(self):
        data = make_data(4)
        c = np.array([[-1.0, 0.5, 0.5], [0.0, -1.0, 1.0]])
        res = estimate(data, "L", contrast=c)
        assert np.array_equal(res.tau_hat, c @ res.y_hat)

    def test_contrast_linearity(self):
        data = make_data(5)
        c = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        post = np.array([[1.0, -1.0]])
        direct = estimate(data, "F", contrast=post @ c)
        composed = estimate(data, "F", contrast=c)
        assert direct.tau_hat == pytest.approx(post @ composed.tau_hat, abs=1e-14)
        assert direct.tau_cov == pytest.approx(
            post @ composed.tau_cov @ post.T, abs=1e-14
        )

    def test_group_size_precondition_names_arm(self):
        data_small = ExperimentData.build(
            np.arange(8.0), [1, 1, 1, 1, 1, 2, 2, 2],
            np.random.default_rng(0).standard_normal((8, 2)),
        )
        with pytest.raises(ValidationError, match="arm 2"):
            estimate(data_small, "L")

    def test_general_restriction_is_flagged(self):
        data = make_data(6)
        r_mat = np.zeros((1, 9))
        r_mat[0, 0] = 1.0
        r_mat[0, 3] = 1.0  # couples a mean and an interaction coefficient
        from armfit.lsq import Restriction

        res = estimate(data, "L", Restriction(r_mat, np.zeros(1)))
        assert res.restriction.kind == "general"

    def test_covariance_psd(self):
        data = make_data(7)
        res = estimate(data, "L", restriction_equal_correlation(3, 2))
        eig = np.linalg.eigvalsh(res.tau_cov)
        assert eig.min() >= -1e-10 * max(eig.max(), 1.0)


class TestAdjustedMeans:
    def test_zero_adjustment_gives_group_means(self):
        data = make_data(8)
        assert adjusted_means(data, np.zeros(6)) == pytest.approx(
            data.group_outcome_means()
        )

    def test_slope_adjustment_matches_interacted(self):
        data = make_data(9)
        res = estimate(data, "L")
        assert adjusted_means(data, within_group_slopes(data)) == pytest.approx(
            res.y_hat, abs=1e-10
        )

    def test_common_adjustment_matches_additive(self):
        data = make_data(10)
        rf = estimate(data, "F")
        b = np.tile(rf.gamma_hat[:2], 3)
        assert adjusted_means(data, b) == pytest.approx(rf.y_hat, abs=1e-10)


class TestExactMoments:
    def test_unadjusted_estimator_moments(self):
        # Exact design-based mean and covariance over all 70 assignments.
        from armfit.oracle import exact_randomization_moments

        rng = np.random.default_rng(11)
        y_table = rng.standard_normal((8, 2))
        x = rng.standard_normal((8, 1))
        table = PotentialTable(y_table, x, TreatmentStructure((4, 4)))
        c = np.array([[-1.0, 1.0]])

        mean, cov = exact_randomization_moments(
            table, lambda d: c @ d.group_outcome_means()
        )
        assert mean == pytest.approx(c @ pop_means(table), abs=1e-10)

        centered = table.Y - table.Y.mean(axis=0)
        s_mat = centered.T @ centered / 7
        v_n = np.diag(np.diag(s_mat) / 0.5) - s_mat
        assert cov == pytest.approx(c @ v_n @ c.T / 8, abs=1e-10)


class TestWald:
    def test_zero_statistic_at_fitted_value(self):
        data = make_data(12)
        res = estimate(data, "L")
        theta = np.concatenate([res.y_hat, res.gamma_hat])
        r_mat = restriction_zero_correlation(3, 2).matrix
        out = wald_restriction_test(data, r_mat, r_mat @ theta)
        assert out.statistic == pytest.approx(0.0, abs=1e-16)
        assert out.p_value == pytest.approx(1.0)
        assert out.df == 6

    def test_scalar_case_equals_squared_t_ratio(self):
        data = make_data(13)
        from armfit.estimators import _fit_spec
        from armfit.lsq import ehw_cov

        fit, _ = _fit_spec(data, "L", None, None)
        sigma = ehw_cov(fit)
        r_row = np.zeros((1, fit.beta.size))
        r_row[0, 1] = 1.0
        out = wald_restriction_test(data, r_row, [0.0])
        t2 = fit.beta[1] ** 2 / sigma[1, 1]
        assert out.statistic == pytest.approx(t2, rel=1e-12)
        assert out.df == 1

    def test_rank_of_restriction_is_df(self):
        data = make_data(14)
        r = restriction_equal_correlation(3, 2)
        assert wald_restriction_test(data, r.matrix, r.rhs).df == 4

    def test_power_against_violated_restriction(self):
        # Strongly heterogeneous slopes at N=100: rejection well above 5%.
        from armfit.harness import dgp_section6

        table = dgp_section6(0, "heterogeneous")
        r = restriction_equal_correlation(4, 20)
        rejections = 0
        reps = 40
        for rep in range(reps):
            a = complete_randomize(table.structure, derive_seed(5, rep))
            out = wald_restriction_test(table.reveal(a), r.matrix, r.rhs)
            rejections += out.p_value < 0.05
        assert rejections / reps > 0.5

    def test_calibration_in_moderate_dimension(self):
        # Q=4, J=3, N=400, null built from the exact finite-population
        # coefficients: the level stays at or below nominal.
        rng = np.random.default_rng(15)
        n, j = 400, 3
        x = rng.standard_normal((n, j))
        beta = np.ones(j)
        y_cols = np.stack(
            [q + x @ beta + rng.standard_normal(n) for q in range(4)], axis=1
        )
        table = PotentialTable(y_cols, x, TreatmentStructure((100,) * 4))
        r = restriction_equal_correlation(4, j)
        from armfit.oracle import pop_gamma, pop_means

        theta = np.concatenate([pop_means(table), pop_gamma(table)])
        rhs = r.matrix @ theta
        rejections = 0
        reps = 300
        for rep in range(reps):
            a = complete_randomize(table.structure, derive_seed(6, rep))
            out = wald_restriction_test(table.reveal(a), r.matrix, rhs)
            rejections += out.p_value < 0.05
        assert rejections / reps <= 0.08


class TestRemPluginCov:
    def test_parts_sum_to_total(self):
        data = make_data(16, sizes=(10, 10, 10, 10), n_cov=2)
        g = np.array([[-1.0, -1.0, 1.0, 1.0], [-1.0, 1.0, -1.0, 1.0]])
        b = np.zeros(8)
        parts = rem_plugin_cov(data, b, g)
        e = data.structure.proportions
        s_adj = np.array(
            [data.y[data.group_mask(q)].var(ddof=1) for q in range(1, 5)]
        )
        assert parts.v_perp + parts.v_par == pytest.approx(np.diag(s_adj / e), abs=1e-12)

    def test_slope_adjustment_kills_truncated_part(self):
        data = make_data(17, sizes=(12, 12), n_cov=1)
        parts = rem_plugin_cov(data, within_group_slopes(data), [[-1.0, 1.0]])
        assert np.abs(parts.v_par).max() < 1e-20

    def test_full_rank_contrast_projection_identity(self):
        # With H = Q-1 the projection factor equals 1/e on the diagonal
        # minus one everywhere, so the truncated part has a hand formula.
        data = make_data(18, sizes=(8, 12), n_cov=1)
        e = data.structure.proportions
        phi_expected = np.diag(1.0 / e) - np.ones((2, 2))
        b = np.zeros(2)
        parts = rem_plugin_cov(data, b, [[-1.0, 1.0]])
        slopes = within_group_slopes(data).reshape(2, 1)
        s_xx = data.X.T @ data.X / (data.n_units - 1)
        d_hat = np.zeros((2, 2))
        d_hat[0, 0] = -slopes[0, 0]
        d_hat[1, 1] = -slopes[1, 0]
        expected = d_hat @ np.kron(phi_expected, s_xx) @ d_hat.T
        assert parts.v_par == pytest.approx(expected, rel=1e-10)


class TestRemReferenceSample:
    def test_infinite_threshold_recovers_total_covariance(self):
        v_perp = np.diag([1.0, 2.0])
        v_par = np.array([[0.5, 0.25], [0.25, 0.5]])
        draws = rem_reference_sample(v_perp, v_par, np.inf, jh=4, draws=60_000, seed=0)
        cov = np.cov(draws.T)
        assert cov == pytest.approx(v_perp + v_par, abs=0.05)

    def test_zero_truncated_part_is_plain_normal(self):
        v_perp = np.diag([1.0, 4.0])
        draws = rem_reference_sample(v_perp, np.zeros((2, 2)), 1.0, jh=2, draws=50_000, seed=1)
        assert np.cov(draws.T) == pytest.approx(v_perp, abs=0.06)

    def test_truncated_part_shrinks_by_nu(self):
        # Sample only the truncated component and compare its second moment
        # with the truncation factor times the input, within 3 empirical
        # standard errors of the product means.
        jh = 4
        a = chi2_quantile(0.10, jh)
        v_par = np.array([[1.0, 0.3], [0.3, 0.5]])
        n_draws = 50_000
        draws = rem_reference_sample(np.zeros((2, 2)), v_par, a, jh, n_draws, seed=2)
        nu = nu_factor(jh, a)
        for i in range(2):
            for k in range(2):
                prods = draws[:, i] * draws[:, k]
                se = prods.std(ddof=1) / np.sqrt(n_draws)
                assert abs(prods.mean() - nu * v_par[i, k]) <= 3 * se

    def test_deterministic(self):
        v = np.eye(2)
        a = rem_reference_sample(v, v, 3.0, jh=2, draws=100, seed=9)
        b = rem_reference_sample(v, v, 3.0, jh=2, draws=100, seed=9)
        assert np.array_equal(a, b)

    def test_non_psd_rejected(self):
        bad = np.array([[1.0, 0.0], [0.0, -1.0]])
        from armfit.errors import NumericalError

        with pytest.raises(NumericalError):
            rem_reference_sample(bad, np.zeros((2, 2)), 1.0, jh=2, draws=10, seed=0)

    def test_rank_above_jh_rejected(self):
        v_par = np.eye(3)
        with pytest.raises(ValidationError, match="rank"):
            rem_reference_sample(np.zeros((3, 3)), v_par, 1.0, jh=2, draws=10, seed=0)
