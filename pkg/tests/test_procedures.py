"""Testing-procedure suite: direction conventions, the modified-df rule,
closed-testing oracles for Hommel, dominance properties, omnibus
calibration consistency, and MaxT's Bonferroni bound."""

import itertools

import numpy as np
import pytest

import psprsim as ps
from psprsim.errors import NumericalError, ValidationError
from psprsim.marginal import CorrelationEstimate
from psprsim.procedures import (
    bonferroni_adjust,
    holm_adjust,
    hommel_adjust,
    modified_df,
    simes_global,
)
from psprsim.scales import N_ITEMS

from conftest import arm_symmetric_dataset


@pytest.fixture(scope="module")
def effect_dataset(reference_pool):
    params = ps.DiscretizedMvnParams.estimate(reference_pool)
    scen = ps.builtin_scenarios()["d2"]
    return ps.gen_discretized_mvn(params, scen, 70, ps.RngStream(2))


class TestModifiedDf:
    def test_paper_value(self):
        assert modified_df(70, 10) == pytest.approx(69.185, abs=1e-12)
        assert modified_df(70, 10) == 0.5 * 137 * 1.01

    def test_monotone_in_n(self):
        assert modified_df(100, 10) > modified_df(70, 10)


class TestAdjustments:
    def test_bonferroni_direct(self):
        p = np.array([0.001, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95])
        assert bonferroni_adjust(p)[0] == pytest.approx(0.01)
        assert bonferroni_adjust(p).max() == 1.0

    def test_holm_vs_manual(self):
        p = np.array([0.01, 0.04, 0.03, 0.005])
        # sorted: 0.005, 0.01, 0.03, 0.04 -> *4, *3, *2, *1 -> cummax
        expect = {0.005: 0.02, 0.01: 0.03, 0.03: 0.06, 0.04: 0.06}
        out = holm_adjust(p)
        for pi, oi in zip(p, out):
            assert oi == pytest.approx(expect[pi])

    def test_hommel_against_closed_testing_oracle(self):
        # brute-force closed testing with local Simes tests, m = 5
        rng = np.random.default_rng(14)
        for _ in range(200):
            p = rng.uniform(0.0005, 1.0, size=5)
            adj = hommel_adjust(p)
            for i in range(5):
                worst = 0.0
                for r in range(1, 6):
                    for subset in itertools.combinations(range(5), r):
                        if i not in subset:
                            continue
                        sub = np.sort(p[list(subset)])
                        local = (len(sub) * sub / np.arange(1, len(sub) + 1)).min()
                        worst = max(worst, local)
                assert adj[i] == pytest.approx(min(1.0, worst), abs=1e-12)

    def test_dominance_over_random_vectors(self):
        # Simes <= Bonferroni globally; Hommel <= Holm <= Bonferroni per item
        rng = np.random.default_rng(15)
        for _ in range(10_000):
            p = rng.uniform(0, 1, size=10)
            assert simes_global(p) <= min(1.0, 10 * p.min()) + 1e-12
            hom = hommel_adjust(p)
            holm = holm_adjust(p)
            bonf = bonferroni_adjust(p)
            assert np.all(hom <= holm + 1e-12)
            assert np.all(holm <= bonf + 1e-12)

    def test_simes_identical_pvalues(self):
        assert simes_global(np.full(10, 0.37)) == pytest.approx(0.37)


class TestSumScore:
    def test_symmetric_arms_half(self):
        data = arm_symmetric_dataset()
        out = ps.test_sum_score(data)
        # 0.5 up to least-squares round-off
        assert out.p_one_sided == pytest.approx(0.5, abs=1e-12)
        assert out.statistic == pytest.approx(0.0, abs=1e-12)

    def test_item_permutation_invariance(self, effect_dataset):
        out1 = ps.test_sum_score(effect_dataset)
        perm = np.random.default_rng(16).permutation(N_ITEMS)
        permuted = ps.ItemDataset(
            ids=effect_dataset.ids,
            arm=effect_dataset.arm,
            baseline=effect_dataset.baseline[:, perm],
            week52=effect_dataset.week52[:, perm],
        )
        out2 = ps.test_sum_score(permuted)
        assert out1.p_one_sided == out2.p_one_sided

    def test_scheme_consistency_bit_identical(self, effect_dataset):
        pre = ps.apply_rescoring(effect_dataset, ps.fda_scheme())
        pairs = [
            (ps.test_sum_score(effect_dataset, scheme="fda"), ps.test_sum_score(pre)),
            (ps.test_bonferroni(effect_dataset, scheme="fda"), ps.test_bonferroni(pre)),
            (
                ps.test_obrien(effect_dataset, scheme="fda", variant="OLS"),
                ps.test_obrien(pre, variant="OLS"),
            ),
            (
                ps.test_maxt(effect_dataset, scheme="fda", rng=ps.RngStream(9)),
                ps.test_maxt(pre, rng=ps.RngStream(9)),
            ),
        ]
        for via_arg, via_data in pairs:
            assert via_arg.p_one_sided == via_data.p_one_sided
            assert via_arg.statistic == via_data.statistic


class TestIrtAndLmTests:
    def test_symmetric_arms_half(self, grm_model, latent_approx):
        data = arm_symmetric_dataset()
        irt_p = ps.test_irt(data, external_model=grm_model).p_one_sided
        lm_p = ps.test_lm_approx(data, approx=latent_approx).p_one_sided
        assert irt_p == pytest.approx(0.5, abs=1e-12)
        assert lm_p == pytest.approx(0.5, abs=1e-12)

    def test_scheme_mismatch_rejected(self, grm_model, effect_dataset):
        fda_data = ps.apply_rescoring(effect_dataset, ps.fda_scheme())
        with pytest.raises(ValidationError):
            ps.test_irt(fda_data, external_model=grm_model)

    def test_missing_model_rejected(self, effect_dataset):
        with pytest.raises(ValidationError):
            ps.test_irt(effect_dataset)
        with pytest.raises(ValidationError):
            ps.test_lm_approx(effect_dataset)

    def test_equal_weights_order_matches_sum_score(self, effect_dataset):
        approx = ps.LinearLatentApprox(
            intercept=0.0, weights=np.full(N_ITEMS, 0.02), r_squared=1.0
        )
        z = ps.approx_latent(approx, effect_dataset.week52)
        sums = effect_dataset.week52.sum(axis=1)
        # monotone transform of the sum: strictly ordered across distinct sums
        for s_lo, s_hi in itertools.pairwise(np.unique(sums)):
            assert z[sums == s_lo].max() < z[sums == s_hi].min()

    def test_detects_effect(self, grm_model, latent_approx, effect_dataset):
        out = ps.test_irt(effect_dataset, external_model=grm_model)
        assert out.p_one_sided < 0.5


class TestObrien:
    def test_exchangeable_correlation_gls_equals_ols(self, effect_dataset):
        fits = ps.fit_marginals(effect_dataset)
        R = np.full((10, 10), 0.4)
        np.fill_diagonal(R, 1.0)
        corr = CorrelationEstimate(R=R)
        ols = ps.test_obrien(effect_dataset, variant="OLS", fits=fits, corr=corr)
        gls = ps.test_obrien(effect_dataset, variant="GLS", fits=fits, corr=corr)
        assert gls.statistic == pytest.approx(ols.statistic, abs=1e-10)
        assert gls.p_one_sided == pytest.approx(ols.p_one_sided, abs=1e-10)

    def test_modified_df_used(self, effect_dataset):
        out = ps.test_obrien(effect_dataset, variant="OLS")
        assert out.diagnostics["df_modified"] == pytest.approx(modified_df(70, 10))
        assert out.p_one_sided == pytest.approx(
            ps.student_t_cdf(out.statistic, modified_df(70, 10)), abs=1e-15
        )

    def test_gls_drop_without_negative_weights(self, effect_dataset):
        fits = ps.fit_marginals(effect_dataset)
        R = np.full((10, 10), 0.3)
        np.fill_diagonal(R, 1.0)
        corr = CorrelationEstimate(R=R)
        drop = ps.test_obrien(effect_dataset, variant="GLS-drop", fits=fits, corr=corr)
        gls = ps.test_obrien(effect_dataset, variant="GLS", fits=fits, corr=corr)
        assert drop.dropped_items is None
        assert drop.diagnostics["no_negative_weight"] is True
        assert drop.statistic == gls.statistic

    def test_gls_drop_removes_most_negative_item(self, effect_dataset):
        fits = ps.fit_marginals(effect_dataset)
        # two nearly-duplicated endpoints force a negative inverse-row-sum
        R = np.eye(10) * 0.02 + 0.98 * np.ones((10, 10))
        R[0, 1] = R[1, 0] = 0.999
        R[0, 2:] = R[2:, 0] = 0.90
        np.fill_diagonal(R, 1.0)
        w = np.linalg.solve(R, np.ones(10))
        assert w.min() < 0  # scenario setup really has a negative weight
        corr = CorrelationEstimate(R=R)
        drop = ps.test_obrien(effect_dataset, variant="GLS-drop", fits=fits, corr=corr)
        assert drop.dropped_items == [int(np.argmin(w))]
        assert drop.diagnostics["m_active"] == 9
        assert drop.diagnostics["df_modified"] == pytest.approx(modified_df(70, 9))
        assert len(drop.weights) == 9

    def test_singular_correlation_raises(self, effect_dataset):
        fits = ps.fit_marginals(effect_dataset)
        R = np.ones((10, 10))
        corr = CorrelationEstimate(R=R)
        with pytest.raises((NumericalError, np.linalg.LinAlgError)):
            ps.test_obrien(effect_dataset, variant="GLS", fits=fits, corr=corr)

    def test_unknown_variant(self, effect_dataset):
        with pytest.raises(ValidationError):
            ps.test_obrien(effect_dataset, variant="WLS")


class TestBonferroniSimes:
    def test_all_half_pvalues(self):
        data = arm_symmetric_dataset()
        out = ps.test_bonferroni(data)
        assert out.p_one_sided == 1.0
        simes = ps.test_simes_hommel(data)
        assert simes.p_one_sided == pytest.approx(0.5)

    def test_per_item_vectors(self, effect_dataset):
        out = ps.test_bonferroni(effect_dataset)
        p = out.per_item_p["unadjusted"]
        assert np.array_equal(out.per_item_p["bonferroni"], bonferroni_adjust(p))
        assert np.array_equal(out.per_item_p["holm"], holm_adjust(p))
        assert out.p_one_sided == pytest.approx(min(1.0, 10 * p.min()))
        simes = ps.test_simes_hommel(effect_dataset)
        assert np.array_equal(simes.per_item_p["hommel"], hommel_adjust(p))
        assert simes.p_one_sided == pytest.approx(simes_global(p))
        assert simes.p_one_sided <= out.p_one_sided + 1e-12


class TestMaxT:
    def test_symmetric_arms_near_one(self, calib10):
        data = arm_symmetric_dataset()
        out = ps.test_maxt(data, rng=ps.RngStream(3))
        assert out.statistic == pytest.approx(0.0, abs=1e-9)
        assert 0.99 <= out.p_one_sided <= 1.0

    def test_independence_arithmetic(self):
        # all z = 0 with identity correlation: p = 1 - 0.5^10
        p, err = ps.mvn_rect_upper(np.zeros(10), np.eye(10), rng=ps.RngStream(4))
        assert 1 - p == pytest.approx(1 - 0.5**10, abs=max(err, 1e-6))

    def test_bonferroni_bound_over_random_datasets(self, reference_pool):
        from scipy.special import ndtr

        params = ps.DiscretizedMvnParams.estimate(reference_pool)
        scen = ps.builtin_scenarios()
        labels = ["d0", "d1", "d4", "d10"]
        count = 0
        for i in range(250):
            data = ps.gen_discretized_mvn(
                params, scen[labels[i % 4]], 40, ps.RngStream(5000 + i)
            )
            out = ps.test_maxt(data, tol=1e-3, rng=ps.RngStream(i))
            bound = min(1.0, 10 * (1 - float(ndtr(out.statistic))))
            err = out.diagnostics["mvn_error_estimate"]
            assert out.p_one_sided <= bound + err + 1e-12
            count += 1
        assert count == 250

    def test_uses_marginal_df_transform(self, effect_dataset):
        fits = ps.fit_marginals(effect_dataset)
        out = ps.test_maxt(effect_dataset, rng=ps.RngStream(6), fits=fits)
        z = out.diagnostics["z_values"]
        for j, t in enumerate(fits.t_vector):
            expect = ps.normal_quantile(ps.student_t_cdf(-t, fits.df_marginal))
            assert z[j] == pytest.approx(expect, abs=1e-12)
        assert out.statistic == z.max()


class TestOmnibus:
    def test_all_ones_give_global_one(self, calib10):
        out = ps.test_omnibus(np.ones(10), calib10)
        assert out.p_one_sided == 1.0

    def test_self_calibration_uniform_null(self, calib10):
        rng = np.random.default_rng(17)
        alpha = 0.025
        rejections = 0
        n_draws = 10_000
        for _ in range(n_draws):
            p = rng.uniform(0, 1, size=10)
            if ps.test_omnibus(p, calib10).p_one_sided <= alpha:
                rejections += 1
        rate = rejections / n_draws
        assert abs(rate - alpha) < 0.005

    def test_length_mismatch(self, calib10):
        with pytest.raises(ValidationError):
            ps.test_omnibus(np.ones(3), calib10)

    def test_sensitive_to_small_pvalues(self, calib10):
        small = np.r_[0.0001, np.full(9, 0.5)]
        out = ps.test_omnibus(small, calib10)
        assert out.p_one_sided < 0.01

    def test_cache_round_trip(self, calib10, tmp_path):
        from psprsim.procedures import (
            get_omnibus_calibration,
            load_omnibus_calibration,
            save_omnibus_calibration,
        )

        path = tmp_path / "calib.npz"
        save_omnibus_calibration(calib10, path)
        back = load_omnibus_calibration(path)
        assert back.m == calib10.m and back.reps == calib10.reps
        assert back.seed == calib10.seed and back.transform == calib10.transform
        assert np.array_equal(back.sorted_null_stats, calib10.sorted_null_stats)
        assert np.array_equal(back.sorted_partial_stats, calib10.sorted_partial_stats)
        # keyed cache: same parameters come back from disk
        c1 = get_omnibus_calibration(tmp_path, m=3, reps=1000, seed=5)
        c2 = get_omnibus_calibration(tmp_path, m=3, reps=1000, seed=5)
        assert np.array_equal(c1.sorted_null_stats, c2.sorted_null_stats)

    def test_invariants_of_tables(self, calib10):
        assert calib10.sorted_null_stats.shape == (calib10.reps,)
        assert np.all(np.diff(calib10.sorted_null_stats) >= 0)
        assert np.all(np.diff(calib10.sorted_partial_stats, axis=1) >= 0)


class TestOmnibusDomains:
    def test_symmetric_arms_lookup(self, calib3):
        data = arm_symmetric_dataset()
        out = ps.test_omnibus_domains(data, calib=calib3)
        assert np.allclose(out.per_item_p["domain"], 0.5)
        expected = calib3.global_p(calib3.combined_statistic(np.full(3, 0.5)))
        assert out.p_one_sided == expected

    def test_wrong_calibration_size(self, calib10):
        data = arm_symmetric_dataset()
        with pytest.raises(ValidationError):
            ps.test_omnibus_domains(data, calib=calib10)

    def test_single_domain_effect_beats_bonferroni(self, reference_pool, calib3):
        # history-domain-only effect (d4): the domain omnibus should win;
        # n = 25/group keeps both powers off the ceiling so the ordering
        # is resolvable
        params = ps.DiscretizedMvnParams.estimate(reference_pool)
        scen = ps.builtin_scenarios()["d4"]
        wins_dom = wins_bonf = 0
        for i in range(300):
            data = ps.gen_discretized_mvn(params, scen, 25, ps.RngStream(7000 + i))
            if ps.test_omnibus_domains(data, calib=calib3).p_one_sided <= 0.025:
                wins_dom += 1
            if ps.test_bonferroni(data).p_one_sided <= 0.025:
                wins_bonf += 1
        assert wins_dom > wins_bonf


class TestOutcomeContract:
    def test_all_procedures_unit_interval(self, grm_model, latent_approx, calib10,
                                          calib3, effect_dataset):
        fits = ps.fit_marginals(effect_dataset)
        corr = ps.estimate_corr(effect_dataset, fits)
        outcomes = [
            ps.test_sum_score(effect_dataset),
            ps.test_irt(effect_dataset, external_model=grm_model),
            ps.test_lm_approx(effect_dataset, approx=latent_approx),
            ps.test_obrien(effect_dataset, variant="OLS", fits=fits, corr=corr),
            ps.test_obrien(effect_dataset, variant="GLS", fits=fits, corr=corr),
            ps.test_obrien(effect_dataset, variant="GLS-drop", fits=fits, corr=corr),
            ps.test_bonferroni(effect_dataset, fits=fits),
            ps.test_simes_hommel(effect_dataset, fits=fits),
            ps.test_maxt(effect_dataset, rng=ps.RngStream(8), fits=fits, corr=corr),
            ps.test_omnibus(fits.p_vector, calib10),
            ps.test_omnibus_domains(effect_dataset, calib=calib3),
        ]
        assert len(outcomes) == len(ps.METHODS)
        for out in outcomes:
            assert 0.0 <= out.p_one_sided <= 1.0
            if out.per_item_p:
                for vec in out.per_item_p.values():
                    assert np.all((0.0 <= np.asarray(vec)) & (np.asarray(vec) <= 1.0))
