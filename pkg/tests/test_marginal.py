"""Marginal-model tests: per-item refits against the single-endpoint path,
and the stacked-sandwich correlation against known-truth simulations."""

import numpy as np
import pytest

import psprsim as ps
from psprsim.errors import SingularDesignError
from psprsim.marginal import sandwich_treatment_correlation
from psprsim.scales import N_ITEMS


def make_dataset(baseline, week52, arm):
    n = len(arm)
    return ps.ItemDataset(
        ids=np.array([f"S{i}" for i in range(n)]),
        arm=np.asarray(arm, dtype=np.int8),
        baseline=baseline,
        week52=week52,
    )


def random_dataset(n=60, seed=0):
    rng = np.random.default_rng(seed)
    baseline = rng.integers(0, 5, size=(n, N_ITEMS))
    week52 = np.clip(baseline + rng.integers(-1, 3, size=(n, N_ITEMS)), 0, 4)
    arm = np.r_[np.zeros(n // 2, dtype=np.int8), np.ones(n - n // 2, dtype=np.int8)]
    return make_dataset(baseline, week52, arm)


class TestFitMarginals:
    def test_no_change_gives_zero_t(self):
        rng = np.random.default_rng(1)
        baseline = rng.integers(0, 5, size=(40, N_ITEMS))
        data = make_dataset(baseline, baseline.copy(),
                            np.r_[np.zeros(20, dtype=np.int8), np.ones(20, dtype=np.int8)])
        fits = ps.fit_marginals(data)
        assert np.array_equal(fits.t_vector, np.zeros(N_ITEMS))

    def test_matches_single_endpoint_refit(self):
        data = random_dataset(seed=3)
        fits = ps.fit_marginals(data)
        for j in range(N_ITEMS):
            ref = ps.fit_ancova(data.week52[:, j], data.baseline[:, j], data.arm)
            assert fits.per_item[j].t_value == ref.t_value
            assert fits.per_item[j].coef_treatment == ref.coef_treatment
            assert fits.t_vector[j] == ref.t_value
        assert fits.df_marginal == data.n_subjects - 3

    def test_singular_item_named(self):
        data = random_dataset(seed=4)
        baseline = data.baseline.copy()
        baseline[:, 7] = 2  # constant baseline on one item
        bad = make_dataset(baseline, data.week52, data.arm)
        with pytest.raises(SingularDesignError, match="item26"):
            ps.fit_marginals(bad)

    def test_arm_symmetric_duplicate_is_exact_zero(self):
        rng = np.random.default_rng(5)
        n = 30
        baseline = rng.integers(0, 5, size=(n, N_ITEMS))
        week52 = np.clip(baseline + rng.integers(-1, 2, size=(n, N_ITEMS)), 0, 4)
        data = make_dataset(
            np.vstack([baseline, baseline]),
            np.vstack([week52, week52]),
            np.r_[np.zeros(n, dtype=np.int8), np.ones(n, dtype=np.int8)],
        )
        fits = ps.fit_marginals(data)
        # zero up to floating-point least-squares round-off
        assert np.abs(fits.t_vector).max() < 1e-10


class TestEstimateCorr:
    def test_duplicated_item_perfectly_correlated(self):
        data = random_dataset(seed=6)
        baseline = data.baseline.copy()
        week52 = data.week52.copy()
        baseline[:, 1] = baseline[:, 0]
        week52[:, 1] = week52[:, 0]
        dup = make_dataset(baseline, week52, data.arm)
        fits = ps.fit_marginals(dup)
        corr = ps.estimate_corr(dup, fits)
        assert corr.R[0, 1] == pytest.approx(1.0, abs=1e-10)
        assert corr.method == "stacked-score sandwich"

    def test_independent_items_near_zero(self):
        rng = np.random.default_rng(7)
        n = 10_000
        arm = (np.arange(n) % 2).astype(float)
        baseline = rng.normal(0, 1, size=(n, 2))
        week52 = 0.5 * baseline + rng.normal(0, 1, size=(n, 2))  # independent noise
        residuals = np.empty((n, 2))
        for j in range(2):
            fit = ps.fit_ancova(week52[:, j], baseline[:, j], arm)
            residuals[:, j] = fit.residuals
        R = sandwich_treatment_correlation(baseline, arm, residuals)
        assert abs(R[0, 1]) < 0.05

    def test_known_truth_residual_correlation(self):
        # bivariate normal outcomes with residual correlation 0.6
        rng = np.random.default_rng(8)
        n = 20_000
        arm = (np.arange(n) % 2).astype(float)
        baseline = rng.normal(0, 1, size=(n, 2))
        L = np.linalg.cholesky(np.array([[1.0, 0.6], [0.6, 1.0]]))
        noise = rng.standard_normal((n, 2)) @ L.T
        week52 = 0.5 * baseline + noise
        residuals = np.empty((n, 2))
        for j in range(2):
            fit = ps.fit_ancova(week52[:, j], baseline[:, j], arm)
            residuals[:, j] = fit.residuals
        R = sandwich_treatment_correlation(baseline, arm, residuals)
        assert R[0, 1] == pytest.approx(0.6, abs=0.03)

    def test_symmetric_psd_unit_diagonal(self):
        data = random_dataset(seed=9)
        fits = ps.fit_marginals(data)
        R = ps.estimate_corr(data, fits).R
        assert np.allclose(R, R.T)
        assert np.allclose(np.diag(R), 1.0)
        assert np.linalg.eigvalsh(R).min() >= -1e-10

    def test_item_relabeling_permutes_R(self):
        data = random_dataset(seed=10)
        fits = ps.fit_marginals(data)
        R = ps.estimate_corr(data, fits).R
        perm = np.random.default_rng(11).permutation(N_ITEMS)
        permuted = make_dataset(data.baseline[:, perm], data.week52[:, perm], data.arm)
        fits_p = ps.fit_marginals(permuted)
        R_p = ps.estimate_corr(permuted, fits_p).R
        assert np.allclose(R_p, R[np.ix_(perm, perm)], atol=1e-12)

    def test_affine_rescaling_invariance(self):
        # correlation, not covariance: per-item affine maps leave R unchanged
        rng = np.random.default_rng(12)
        n = 500
        arm = (np.arange(n) % 2).astype(float)
        baseline = rng.normal(0, 1, size=(n, 3))
        week52 = 0.4 * baseline + rng.normal(0, 1, size=(n, 3))

        def corr_of(b, w):
            residuals = np.column_stack(
                [ps.fit_ancova(w[:, j], b[:, j], arm).residuals for j in range(3)]
            )
            return sandwich_treatment_correlation(b, arm, residuals)

        R1 = corr_of(baseline, week52)
        scale = np.array([2.0, 0.5, 7.0])
        shift = np.array([-1.0, 3.0, 0.25])
        R2 = corr_of(baseline * scale + shift, week52 * scale + shift)
        assert np.allclose(R1, R2, atol=1e-9)
