"""Foundational numerical kernels.

Univariate distribution functions, the three-column ANCOVA fit used as the
per-endpoint workhorse, a small Cholesky with pivot-aware errors, and the
deterministic RNG contract shared by every stochastic component.

RNG algorithm (fixed): numpy's Philox 4x64 counter-based generator, keyed
directly with a 64-bit seed (no SeedSequence entropy pooling), so the same
seed yields the same stream on every platform and under any thread count.
Child streams are derived by splitmix64-style mixing of the parent seed with
a key, never by sharing generator state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import FactorizationError, SingularDesignError, ValidationError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """splitmix64 finalizer; bijective on 64-bit integers."""
    x &= _MASK64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & _MASK64
    return x ^ (x >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over a uint64 array."""
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x


class RngStream:
    """Deterministic random stream keyed by a 64-bit seed."""

    __slots__ = ("seed", "gen")

    def __init__(self, seed: int):
        seed = int(seed) & _MASK64
        self.seed = seed
        self.gen = np.random.Generator(np.random.Philox(key=seed))

    def child(self, key: int) -> "RngStream":
        """Derive an independent stream; (seed, key) -> child seed is a fixed mix."""
        return RngStream(mix64((self.seed + _GOLDEN * (int(key) + 1)) & _MASK64))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed})"


def student_t_cdf(x: float, df: float) -> float:
    """CDF of Student's t with (possibly non-integer) df > 0."""
    if not df > 0:
        raise ValidationError(f"t distribution needs df > 0, got {df}")
    return float(special.stdtr(df, x))


def normal_cdf(x):
    """Standard normal CDF (vectorized)."""
    return special.ndtr(x)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF on (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValidationError(f"normal quantile needs p in (0,1), got {p}")
    return float(special.ndtri(p))


def cholesky(S: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == S for symmetric positive-definite S.

    Raises FactorizationError carrying the failing pivot index when S is not
    positive definite. Intended for the small matrices (<= 32) used here.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValidationError(f"cholesky needs a square matrix, got shape {S.shape}")
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, float(np.abs(S).max(initial=1.0)))):
        raise ValidationError("cholesky needs a symmetric matrix")
    n = S.shape[0]
    L = np.zeros_like(S)
    for j in range(n):
        d = S[j, j] - L[j, :j] @ L[j, :j]
        if d <= 0.0 or not np.isfinite(d):
            raise FactorizationError(
                f"matrix not positive definite at pivot {j} (value {d:.3e})", pivot=j
            )
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (S[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass
class AncovaFit:
    """Result of the outcome ~ 1 + baseline + treatment least-squares fit.

    One-sided convention: treatment coded 1, control 0, lower scores are
    beneficial, so negative t means benefit and p_one_sided = F_t(t, df).
    """

    coef_treatment: float
    se: float
    t_value: float
    df: float
    p_one_sided: float
    residuals: np.ndarray = field(repr=False)
    coef_intercept: float = 0.0
    coef_baseline: float = 0.0

    design_columns = ("intercept", "baseline", "treatment")


def fit_ancova(outcome, baseline, arm) -> AncovaFit:
    """ANCOVA of outcome on baseline and a binary treatment indicator.

    Least squares via QR for conditioning. The treatment coefficient's t test
    (df = n - 3) gives the one-sided p-value under the benefit-negative
    convention.
    """
    y = np.asarray(outcome, dtype=float)
    b = np.asarray(baseline, dtype=float)
    g = np.asarray(arm, dtype=float)
    n = y.shape[0]
    if b.shape[0] != n or g.shape[0] != n:
        raise ValidationError(
            f"length mismatch: outcome {n}, baseline {b.shape[0]}, arm {g.shape[0]}"
        )
    if n < 4:
        raise ValidationError(f"ANCOVA needs at least 4 subjects, got {n}")
    uniq = np.unique(g)
    if not np.all(np.isin(uniq, (0.0, 1.0))):
        raise ValidationError("arm must be coded 0 (control) / 1 (treatment)")
    if uniq.size < 2:
        raise ValidationError("both arms must be present")

    X = np.column_stack([np.ones(n), b, g])
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if np.any(diag < 1e-10 * max(diag.max(), 1.0)):
        raise SingularDesignError(
            "ANCOVA design matrix is rank deficient (constant baseline?)"
        )
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    df = n - 3
    coef_t = float(coef[2])
    scale = 1.0 + float(y @ y)
    if rss <= 1e-20 * scale:
        # perfect fit: zero residuals force se = 0; a (numerically) zero
        # coefficient is then an exact null result, a nonzero one is
        # infinitely significant
        se = 0.0
        t = 0.0 if abs(coef_t) <= 1e-8 * np.sqrt(scale) else float(np.sign(coef_t)) * np.inf
    else:
        sigma2 = rss / df
        # (X'X)^-1 = R^-1 R^-T; only the treatment diagonal entry is needed
        rinv_row = np.linalg.solve(R.T, np.eye(3)[:, 2])
        var_unit = float(rinv_row @ rinv_row)
        se = float(np.sqrt(sigma2 * var_unit))
        t = coef_t / se
    if np.isinf(t):
        p = 0.0 if t < 0 else 1.0
    else:
        p = student_t_cdf(t, df)
    return AncovaFit(
        coef_treatment=coef_t,
        se=se,
        t_value=t,
        df=float(df),
        p_one_sided=p,
        residuals=resid,
        coef_intercept=float(coef[0]),
        coef_baseline=float(coef[1]),
    )
