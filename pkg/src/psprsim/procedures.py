"""The eleven testing procedures.

Every procedure maps an ItemDataset (plus auxiliaries) to a TestOutcome with
a one-sided p-value under the benefit-negative convention: treatment coded
1, lower item scores beneficial, so evidence of benefit is negative t.

Procedures over per-item statistics (OLS/GLS/Bonf/Simes/Omnibus/MaxT) share
the marginal ANCOVA fits and the stacked-sandwich correlation; pass
precomputed `fits`/`corr` to avoid refitting inside replicate loops.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError
from .irt import GrModel, LinearLatentApprox, approx_latent, eap_scores
from .marginal import CorrelationEstimate, MarginalFits, estimate_corr, fit_marginals, subset_corr
from .mvnorm import mvn_rect_upper, repair_correlation
from .numkit import RngStream, fit_ancova, normal_quantile, student_t_cdf
from .scales import DOMAINS, N_ITEMS, ItemDataset, ScoringScheme, ensure_scheme

log = logging.getLogger(__name__)

METHODS = (
    "SumS",
    "IRT",
    "LM",
    "OLS",
    "GLS",
    "GLS-drop",
    "Bonf",
    "MaxT",
    "Simes",
    "Omnibus",
    "Omnibus-dom",
)

P_FLOOR = 1e-12  # floor inside the reciprocal transform
CALIBRATION_FORMAT_VERSION = 1


@dataclass
class TestOutcome:
    method: str
    statistic: float
    p_one_sided: float
    per_item_p: dict[str, np.ndarray] | None = None
    weights: np.ndarray | None = None
    dropped_items: list[int] | None = None
    diagnostics: dict = field(default_factory=dict)


def modified_df(n_per_group: float, m: int) -> float:
    """Small-sample df for the OLS/GLS reference: 0.5(2n-3)(1+1/m^2)."""
    return 0.5 * (2.0 * n_per_group - 3.0) * (1.0 + 1.0 / m**2)


# ---------------------------------------------------------------------------
# adjusted p-values
# ---------------------------------------------------------------------------


def bonferroni_adjust(p: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float) * p.size, 0.0, 1.0)


def holm_adjust(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    n = p.size
    o = np.argsort(p, kind="stable")
    adj = np.maximum.accumulate(p[o] * (n - np.arange(n)))
    out = np.empty(n)
    out[o] = adj
    return np.clip(out, 0.0, 1.0)


def hommel_adjust(p: np.ndarray) -> np.ndarray:
    """Closed-testing (Hommel) adjusted p-values; mirrors the classic
    stagewise algorithm."""
    p = np.asarray(p, dtype=float)
    n = p.size
    if n == 1:
        return p.copy()
    o = np.argsort(p, kind="stable")
    ps = p[o]
    i = np.arange(1, n + 1)
    q = np.full(n, (n * ps / i).min())
    pa = q.copy()
    for m in range(n - 1, 1, -1):
        i1 = np.arange(n - m + 1)
        i2 = np.arange(n - m + 1, n)
        q1 = (m * ps[i2] / np.arange(2, m + 1)).min()
        q[i1] = np.minimum(m * ps[i1], q1)
        q[i2] = q[n - m]
        pa = np.maximum(pa, q)
    pa = np.maximum(pa, ps)
    out = np.empty(n)
    out[o] = pa
    return np.clip(out, 0.0, 1.0)


def simes_global(p: np.ndarray) -> float:
    p = np.sort(np.asarray(p, dtype=float))
    n = p.size
    return float(min(1.0, (n * p / np.arange(1, n + 1)).min()))


# ---------------------------------------------------------------------------
# marginal machinery shared by the multi-item procedures
# ---------------------------------------------------------------------------


def _marginals(data: ItemDataset, fits: MarginalFits | None,
               corr: CorrelationEstimate | None, need_corr: bool):
    if fits is None:
        fits = fit_marginals(data)
    if need_corr and corr is None:
        corr = estimate_corr(data, fits)
    return fits, corr


# ---------------------------------------------------------------------------
# univariate endpoint tests
# ---------------------------------------------------------------------------


def test_sum_score(data: ItemDataset, scheme: ScoringScheme | str | None = None) -> TestOutcome:
    """ANCOVA on the plain item sum score."""
    data = ensure_scheme(data, scheme)
    base, week = data.sum_scores()
    fit = fit_ancova(week.astype(float), base.astype(float), data.arm)
    return TestOutcome(
        method="SumS",
        statistic=fit.t_value,
        p_one_sided=fit.p_one_sided,
        diagnostics={"coef": fit.coef_treatment, "se": fit.se, "df": fit.df},
    )


def test_irt(
    data: ItemDataset,
    scheme: ScoringScheme | str | None = None,
    external_model: GrModel | None = None,
) -> TestOutcome:
    """ANCOVA on EAP latent-trait estimates from a pre-fitted model."""
    data = ensure_scheme(data, scheme)
    if external_model is None:
        raise ValidationError("the IRT-based test needs a fitted graded-response model")
    if external_model.scheme != data.scheme.name:
        raise ValidationError(
            f"model was fitted on scheme {external_model.scheme!r}, "
            f"data uses {data.scheme.name!r}"
        )
    theta_base = eap_scores(external_model, data.baseline)
    theta_week = eap_scores(external_model, data.week52)
    fit = fit_ancova(theta_week, theta_base, data.arm)
    return TestOutcome(
        method="IRT",
        statistic=fit.t_value,
        p_one_sided=fit.p_one_sided,
        diagnostics={"coef": fit.coef_treatment, "se": fit.se, "df": fit.df},
    )


def test_lm_approx(
    data: ItemDataset,
    scheme: ScoringScheme | str | None = None,
    approx: LinearLatentApprox | None = None,
) -> TestOutcome:
    """ANCOVA on the weighted-sum latent surrogate."""
    data = ensure_scheme(data, scheme)
    if approx is None:
        raise ValidationError("the weighted-sum test needs a fitted linear approximation")
    if approx.scheme != data.scheme.name:
        raise ValidationError(
            f"approximation was fitted on scheme {approx.scheme!r}, "
            f"data uses {data.scheme.name!r}"
        )
    z_base = approx_latent(approx, data.baseline)
    z_week = approx_latent(approx, data.week52)
    fit = fit_ancova(z_week, z_base, data.arm)
    return TestOutcome(
        method="LM",
        statistic=fit.t_value,
        p_one_sided=fit.p_one_sided,
        diagnostics={"coef": fit.coef_treatment, "se": fit.se, "df": fit.df},
    )


# ---------------------------------------------------------------------------
# combined-t procedures
# ---------------------------------------------------------------------------


def test_obrien(
    data: ItemDataset,
    scheme: ScoringScheme | str | None = None,
    variant: str = "OLS",
    fits: MarginalFits | None = None,
    corr: CorrelationEstimate | None = None,
) -> TestOutcome:
    """Directional global tests on the vector of per-item t-statistics.

    OLS: equal weights, statistic 1't / sqrt(1'R1). GLS: weights R^-1 1.
    GLS-drop: when the GLS weight vector has a negative entry, drop the item
    with the most negative weight (once) and recompute on the remainder.
    The reference distribution is Student t with the modified df.
    """
    if variant not in ("OLS", "GLS", "GLS-drop"):
        raise ValidationError(f"unknown variant {variant!r}")
    data = ensure_scheme(data, scheme)
    fits, corr = _marginals(data, fits, corr, need_corr=True)
    t = fits.t_vector
    n_group = data.n_subjects / 2.0
    diagnostics: dict = {}
    dropped: list[int] | None = None

    R = corr.R
    ones = np.ones(t.size)
    if variant == "OLS":
        denom = float(ones @ R @ ones)
        if denom <= 0:
            raise NumericalError("nonpositive OLS variance (degenerate correlation)")
        stat = float(ones @ t) / np.sqrt(denom)
        weights = ones
        m_active = t.size
    else:
        try:
            w = np.linalg.solve(R, ones)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular correlation matrix: {exc}") from exc
        if variant == "GLS-drop" and w.min() < 0:
            drop = int(np.argmin(w))
            keep = np.array([j for j in range(t.size) if j != drop])
            dropped = [drop]
            sub = subset_corr(corr, keep)
            R = sub.R
            t = t[keep]
            ones = np.ones(t.size)
            try:
                w = np.linalg.solve(R, ones)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"singular correlation after drop: {exc}") from exc
            if w.min() < 0:
                diagnostics["negative_weights_after_drop"] = keep[w < 0].tolist()
        elif variant == "GLS-drop":
            diagnostics["no_negative_weight"] = True
        denom = float(w @ R @ w)
        if denom <= 0:
            raise NumericalError("nonpositive GLS variance (degenerate correlation)")
        stat = float(w @ t) / np.sqrt(denom)
        weights = w
        m_active = t.size
    df_mod = modified_df(n_group, m_active)
    p = student_t_cdf(stat, df_mod)
    return TestOutcome(
        method=variant,
        statistic=stat,
        p_one_sided=p,
        weights=weights,
        dropped_items=dropped,
        diagnostics={**diagnostics, "df_modified": df_mod, "m_active": m_active},
    )


# ---------------------------------------------------------------------------
# multiplicity-adjusted per-item procedures
# ---------------------------------------------------------------------------


def test_bonferroni(
    data: ItemDataset,
    scheme: ScoringScheme | str | None = None,
    fits: MarginalFits | None = None,
) -> TestOutcome:
    """Global min-p Bonferroni test plus Bonferroni/Holm per-item p-values."""
    data = ensure_scheme(data, scheme)
    fits, _ = _marginals(data, fits, None, need_corr=False)
    p = fits.p_vector
    return TestOutcome(
        method="Bonf",
        statistic=float(p.min()),
        p_one_sided=float(min(1.0, p.size * p.min())),
        per_item_p={
            "unadjusted": p,
            "bonferroni": bonferroni_adjust(p),
            "holm": holm_adjust(p),
        },
    )


def test_simes_hommel(
    data: ItemDataset,
    scheme: ScoringScheme | str | None = None,
    fits: MarginalFits | None = None,
) -> TestOutcome:
    """Simes global test; Hommel closed-testing per-item p-values."""
    data = ensure_scheme(data, scheme)
    fits, _ = _marginals(data, fits, None, need_corr=False)
    p = fits.p_vector
    g = simes_global(p)
    return TestOutcome(
        method="Simes",
        statistic=g,
        p_one_sided=g,
        per_item_p={"unadjusted": p, "hommel": hommel_adjust(p)},
    )


def test_maxt(
    data: ItemDataset,
    scheme: ScoringScheme | str | None = None,
    tol: float = 1e-4,
    rng: RngStream | None = None,
    fits: MarginalFits | None = None,
    corr: CorrelationEstimate | None = None,
) -> TestOutcome:
    """Correlation-aware max test on transformed z-values.

    z_i = Phi^-1(F_t(-t_i, df)) with the marginal df, so large positive z
    means benefit; the adjusted p is 1 - P(Z <= z_max 1) under N(0, R).
    """
    data = ensure_scheme(data, scheme)
    fits, corr = _marginals(data, fits, corr, need_corr=True)
    df = fits.df_marginal
    z = np.empty(N_ITEMS)
    for j, t in enumerate(fits.t_vector):
        if np.isinf(t):
            z[j] = -t  # infinitely beneficial t maps to +inf z
        else:
            u = min(max(student_t_cdf(-t, df), 1e-300), 1.0 - 1e-16)
            z[j] = normal_quantile(u)
    z_max = float(z.max())
    R = repair_correlation(corr.R)
    prob, err = mvn_rect_upper(np.full(N_ITEMS, z_max), R, tol=tol, rng=rng)
    p = float(min(max(1.0 - prob, 0.0), 1.0))
    return TestOutcome(
        method="MaxT",
        statistic=z_max,
        p_one_sided=p,
        per_item_p={"unadjusted": fits.p_vector},
        diagnostics={"z_values": z, "mvn_error_estimate": err},
    )


# ---------------------------------------------------------------------------
# omnibus tests on sorted transformed p-values
# ---------------------------------------------------------------------------


def _reciprocal(p: np.ndarray) -> np.ndarray:
    return 1.0 / np.maximum(p, P_FLOOR)

_TRANSFORMS = {"reciprocal": _reciprocal}


@dataclass
class OmnibusCalibration:
    """Monte-Carlo null tables for the omnibus combination test.

    sorted_partial_stats[s] holds the ascending null distribution of the
    partial sum S_{s+1}; sorted_null_stats holds the ascending null
    distribution of the combined statistic (the minimum per-s marginal p).
    """

    m: int
    transform: str
    reps: int
    seed: int
    sorted_partial_stats: np.ndarray
    sorted_null_stats: np.ndarray

    def partial_p(self, partial_sums: np.ndarray) -> np.ndarray:
        """Marginal Monte-Carlo p of each observed partial sum (large = extreme)."""
        ge = self.reps - np.array(
            [
                np.searchsorted(self.sorted_partial_stats[s], partial_sums[s], side="left")
                for s in range(self.m)
            ]
        )
        return (1.0 + ge) / (self.reps + 1.0)

    def combined_statistic(self, pvalues: np.ndarray) -> float:
        h = _TRANSFORMS[self.transform]
        partial = np.cumsum(h(np.sort(pvalues)))
        return float(self.partial_p(partial).min())

    def global_p(self, combined: float) -> float:
        le = np.searchsorted(self.sorted_null_stats, combined, side="right")
        return (1.0 + le) / (self.reps + 1.0)


def build_omnibus_calibration(
    m: int, reps: int = 100_000, seed: int = 0, transform: str = "reciprocal"
) -> OmnibusCalibration:
    """Simulate the null tables under independent uniform p-values."""
    if transform not in _TRANSFORMS:
        raise ValidationError(f"unknown omnibus transform {transform!r}")
    if m < 2 or reps < 100:
        raise ValidationError("need m >= 2 and reps >= 100")
    rng = RngStream(seed)
    u = rng.gen.random((reps, m))
    u.sort(axis=1)
    S = np.cumsum(_TRANSFORMS[transform](u), axis=1)  # (reps, m)
    sorted_partial = np.sort(S, axis=0).T.copy()  # (m, reps)
    # each calibration replicate's own combined statistic, same convention
    T = np.empty(reps)
    marg = np.empty((reps, m))
    for s in range(m):
        idx = np.searchsorted(sorted_partial[s], S[:, s], side="left")
        marg[:, s] = (1.0 + reps - idx) / (reps + 1.0)
    T = marg.min(axis=1)
    return OmnibusCalibration(
        m=m,
        transform=transform,
        reps=reps,
        seed=seed,
        sorted_partial_stats=sorted_partial,
        sorted_null_stats=np.sort(T),
    )


def save_omnibus_calibration(calib: OmnibusCalibration, path: str | Path) -> None:
    np.savez_compressed(
        path,
        format_version=CALIBRATION_FORMAT_VERSION,
        m=calib.m,
        transform=calib.transform,
        reps=calib.reps,
        seed=calib.seed,
        sorted_partial_stats=calib.sorted_partial_stats,
        sorted_null_stats=calib.sorted_null_stats,
    )


def load_omnibus_calibration(path: str | Path) -> OmnibusCalibration:
    with np.load(path, allow_pickle=False) as doc:
        if int(doc["format_version"]) != CALIBRATION_FORMAT_VERSION:
            raise ValidationError(
                f"unsupported calibration format {doc['format_version']}"
            )
        return OmnibusCalibration(
            m=int(doc["m"]),
            transform=str(doc["transform"]),
            reps=int(doc["reps"]),
            seed=int(doc["seed"]),
            sorted_partial_stats=doc["sorted_partial_stats"],
            sorted_null_stats=doc["sorted_null_stats"],
        )


def get_omnibus_calibration(
    cache_dir: str | Path | None,
    m: int,
    reps: int = 100_000,
    seed: int = 0,
    transform: str = "reciprocal",
) -> OmnibusCalibration:
    """Build or reuse a cached calibration keyed by (m, transform, reps, seed)."""
    if cache_dir is None:
        return build_omnibus_calibration(m, reps, seed, transform)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"omnibus_m{m}_{transform}_r{reps}_s{seed}_v{CALIBRATION_FORMAT_VERSION}.npz"
    if path.exists():
        return load_omnibus_calibration(path)
    calib = build_omnibus_calibration(m, reps, seed, transform)
    save_omnibus_calibration(calib, path)
    return calib


def test_omnibus(pvalues, calib: OmnibusCalibration) -> TestOutcome:
    """Combination test over cumulative sums of transformed sorted p-values."""
    p = np.asarray(pvalues, dtype=float)
    if p.size != calib.m:
        raise ValidationError(
            f"calibration is for m={calib.m} but got {p.size} p-values"
        )
    combined = calib.combined_statistic(p)
    return TestOutcome(
        method="Omnibus",
        statistic=combined,
        p_one_sided=calib.global_p(combined),
        per_item_p={"unadjusted": p},
    )


def domain_pvalues(data: ItemDataset) -> np.ndarray:
    """One ANCOVA p-value per domain sum score (History, Bulbar, Gait/Midline)."""
    p = np.empty(len(DOMAINS))
    for i, idx in enumerate(DOMAINS.values()):
        cols = list(idx)
        base = data.baseline[:, cols].sum(axis=1).astype(float)
        week = data.week52[:, cols].sum(axis=1).astype(float)
        p[i] = fit_ancova(week, base, data.arm).p_one_sided
    return p


def test_omnibus_domains(
    data: ItemDataset,
    scheme: ScoringScheme | str | None = None,
    calib: OmnibusCalibration | None = None,
) -> TestOutcome:
    """Sum-score ANCOVA within each domain; omnibus combination across them."""
    data = ensure_scheme(data, scheme)
    if calib is None or calib.m != len(DOMAINS):
        raise ValidationError("needs an omnibus calibration with m = 3")
    p = domain_pvalues(data)
    out = test_omnibus(p, calib)
    out.method = "Omnibus-dom"
    out.per_item_p = {"domain": p}
    return out
