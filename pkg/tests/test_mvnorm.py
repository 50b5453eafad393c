"""MVN sampling and rectangle-probability tests, including the 10^7-draw
plain Monte-Carlo oracle and the independence factorization check."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import ndtr

import psprsim as ps
from psprsim.errors import ValidationError
from psprsim.mvnorm import repair_correlation


class TestSampleMvn:
    def test_zero_covariance_returns_mean(self):
        spec = ps.MvnSpec(mean=np.array([1.0, -2.0, 3.0]), covariance=np.zeros((3, 3)))
        draws = ps.sample_mvn(spec, 20, ps.RngStream(4))
        assert np.array_equal(draws, np.tile([1.0, -2.0, 3.0], (20, 1)))

    def test_law_of_large_numbers(self):
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        spec = ps.MvnSpec(mean=np.zeros(2), covariance=cov)
        draws = ps.sample_mvn(spec, 50_000, ps.RngStream(8))
        sample_cov = np.cov(draws, rowvar=False)
        assert np.abs(sample_cov - cov).max() < 0.03
        assert np.abs(draws.mean(axis=0)).max() < 0.03

    def test_fixed_seed_reproducible(self):
        spec = ps.MvnSpec(mean=np.zeros(4), covariance=np.eye(4))
        a = ps.sample_mvn(spec, 100, ps.RngStream(77))
        b = ps.sample_mvn(spec, 100, ps.RngStream(77))
        assert np.array_equal(a, b)

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValidationError):
            ps.MvnSpec(mean=np.zeros(2), covariance=np.array([[1.0, 0.2], [0.4, 1.0]]))


def exchangeable(k, rho):
    R = np.full((k, k), rho)
    np.fill_diagonal(R, 1.0)
    return R


class TestRectUpper:
    def test_univariate_reduction(self):
        p, err = ps.mvn_rect_upper(np.array([1.96]), np.eye(1), rng=ps.RngStream(1))
        assert err == 0.0
        assert p == pytest.approx(float(ndtr(1.96)), abs=1e-12)
        assert p == pytest.approx(0.9750, abs=2e-4)

    def test_independence_factorization(self):
        tol = 1e-4
        for z in (-1.0, 0.0, 1.0, 2.0):
            p, err = ps.mvn_rect_upper(
                np.full(10, z), np.eye(10), tol=tol, rng=ps.RngStream(2)
            )
            assert abs(p - ndtr(z) ** 10) <= tol

    def test_brute_force_monte_carlo_oracle(self):
        # 10^7-draw plain MC oracle for k=3, exchangeable rho=0.5, upper=(1,1,1)
        rho, n = 0.5, 10_000_000
        R = exchangeable(3, rho)
        oracle_rng = np.random.default_rng(123)  # independent of RngStream
        L = np.linalg.cholesky(R)
        hits = 0
        for _ in range(10):  # chunked to bound memory
            z = oracle_rng.standard_normal((n // 10, 3)) @ L.T
            hits += int(np.all(z <= 1.0, axis=1).sum())
        p_mc = hits / n
        se_mc = np.sqrt(p_mc * (1 - p_mc) / n)
        p, err = ps.mvn_rect_upper(np.ones(3), R, tol=1e-4, rng=ps.RngStream(3))
        assert err <= 1e-4
        assert abs(p - p_mc) < 3 * np.sqrt(se_mc**2 + (err / 3) ** 2)

    def test_monotone_in_upper(self):
        R = exchangeable(5, 0.3)
        rng = np.random.default_rng(9)
        for _ in range(10):
            base = rng.uniform(-1.5, 1.5, 5)
            bigger = base.copy()
            j = rng.integers(5)
            bigger[j] += rng.uniform(0.1, 1.0)
            p_lo, e1 = ps.mvn_rect_upper(base, R, rng=ps.RngStream(10))
            p_hi, e2 = ps.mvn_rect_upper(bigger, R, rng=ps.RngStream(11))
            assert p_hi >= p_lo - (e1 + e2)
            assert 0.0 <= p_lo <= 1.0 and 0.0 <= p_hi <= 1.0

    def test_bonferroni_lower_bound(self):
        # P(Z <= z 1) >= 1 - k (1 - Phi(z)) for any correlation
        rng = np.random.default_rng(21)
        for trial in range(5):
            A = rng.normal(size=(10, 4))
            S = A @ A.T + np.eye(10)
            d = np.sqrt(np.diag(S))
            R = S / np.outer(d, d)
            z = rng.uniform(1.0, 2.5)
            p, err = ps.mvn_rect_upper(np.full(10, z), R, rng=ps.RngStream(trial))
            assert p >= 1 - 10 * (1 - ndtr(z)) - err - 1e-12

    def test_cross_check_against_scipy(self):
        # scipy's multivariate_normal.cdf is an independent implementation
        # of the same integral
        from scipy import stats

        rng = np.random.default_rng(41)
        for k in (3, 6, 10):
            A = rng.normal(size=(k, max(2, k // 2)))
            S = A @ A.T + np.eye(k)
            d = np.sqrt(np.diag(S))
            R = S / np.outer(d, d)
            upper = rng.uniform(-0.5, 2.0, k)
            ref = stats.multivariate_normal.cdf(
                upper, mean=np.zeros(k), cov=R,
                maxpts=2_000_000, abseps=1e-6, releps=0,
            )
            p, err = ps.mvn_rect_upper(upper, R, tol=1e-4, rng=ps.RngStream(k))
            assert abs(p - ref) < err + 2e-4

    def test_permutation_invariance(self):
        tol = 1e-4
        rng = np.random.default_rng(31)
        A = rng.normal(size=(6, 3))
        S = A @ A.T + np.eye(6)
        d = np.sqrt(np.diag(S))
        R = S / np.outer(d, d)
        upper = rng.uniform(-0.5, 2.0, 6)
        p1, _ = ps.mvn_rect_upper(upper, R, tol=tol, rng=ps.RngStream(1))
        perm = rng.permutation(6)
        p2, _ = ps.mvn_rect_upper(upper[perm], R[np.ix_(perm, perm)], tol=tol,
                                  rng=ps.RngStream(2))
        assert abs(p1 - p2) <= 2 * tol

    def test_deterministic_by_seed(self):
        R = exchangeable(4, 0.4)
        a = ps.mvn_rect_upper(np.ones(4), R, rng=ps.RngStream(42))
        b = ps.mvn_rect_upper(np.ones(4), R, rng=ps.RngStream(42))
        assert a == b

    def test_tol_out_of_range(self):
        for tol in (0.0, -1e-3, 0.5):
            with pytest.raises(ValidationError):
                ps.mvn_rect_upper(np.ones(3), exchangeable(3, 0.2), tol=tol)

    def test_invalid_correlation_rejected(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # |rho| > 1: not PSD
        with pytest.raises(ValidationError):
            ps.mvn_rect_upper(np.zeros(2), bad)
        with pytest.raises(ValidationError):
            ps.mvn_rect_upper(np.zeros(2), np.array([[1.0, 0.1], [0.3, 1.0]]))
        with pytest.raises(ValidationError):
            ps.mvn_rect_upper(np.zeros(2), 2 * np.eye(2))

    def test_dimension_cap(self):
        with pytest.raises(ValidationError):
            ps.mvn_rect_upper(np.zeros(21), np.eye(21))

    @given(st.floats(min_value=-2.5, max_value=2.5))
    def test_probability_in_unit_interval(self, z):
        p, _ = ps.mvn_rect_upper(np.full(3, z), exchangeable(3, 0.5),
                                 rng=ps.RngStream(5))
        assert 0.0 <= p <= 1.0


class TestRepairCorrelation:
    def test_psd_passthrough(self):
        R = exchangeable(4, 0.3)
        assert np.array_equal(repair_correlation(R), R)

    def test_near_singular_floored(self):
        R = exchangeable(3, 0.9999999999)  # eigenvalues ~ (3, 1e-10, 1e-10)
        out = repair_correlation(R)
        w = np.linalg.eigvalsh(out)
        assert w.min() >= 0
        assert np.allclose(np.diag(out), 1.0)

    def test_far_from_psd_rejected(self):
        R = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
        with pytest.raises(ValidationError):
            repair_correlation(R)
