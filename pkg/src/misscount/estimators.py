"""Closed-form estimators, approximate posteriors, and identifiability checks
for the single-geography, no-covariate model.

Parameterization used throughout: per category j,

    v_j = p_j * lam_j      rate of recorded cases per unit exposure,
    u_j = (1-p_j) * lam_j  rate of missing cases per unit exposure,

so lam_j = v_j + u_j and p_j = v_j / lam_j. The recorded-count columns give
v directly; the missing totals identify u through the exposure matrix as a
linear regression, which is where the rank condition comes from.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erfcx

from .errors import DomainError, IdentifiabilityError, ValidationError
from .tables import CaseTable, DesignMatrices, PopulationTable

# Numerical rank threshold: singular values below
# max(n, m) * s_max * eps * RANK_TOL_FACTOR are treated as zero.
RANK_TOL_FACTOR = 64.0

# Ratio of a minority category's exposure to the reference category's exposure
# above which the two-category approximate posterior is a poor approximation.
MINORITY_EXPOSURE_WARN = 0.2


def _rank(a: np.ndarray) -> tuple[int, float]:
    """Numerical rank and the tolerance used, via singular values."""
    if a.size == 0:
        return 0, 0.0
    s = np.linalg.svd(a, compute_uv=False)
    tol = max(a.shape) * s[0] * np.finfo(np.float64).eps * RANK_TOL_FACTOR
    return int(np.sum(s > tol)), float(tol)


def _single_geo_arrays(pop: PopulationTable, cases: CaseTable):
    cases.conforms(pop)
    if pop.n_geos != 1:
        raise ValidationError("closed-form estimators expect a single-geography table (pool first)")
    e = pop.counts[:, 0, :].astype(np.float64)
    x = cases.observed[:, 0, :].astype(np.float64)
    m = cases.missing[:, 0].astype(np.float64)
    return e, x, m


@dataclass(frozen=True)
class SimpleEstimates:
    """Moment estimates of the rate components.

    lam = v + u entrywise; p = v / lam where lam > 0, NaN where the estimated
    total rate is zero (no information about the observation probability).
    """

    v: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    p: np.ndarray


def estimate_v(pop: PopulationTable, cases: CaseTable) -> np.ndarray:
    """Recorded-rate component: column case totals over column exposure totals."""
    e, x, _ = _single_geo_arrays(pop, cases)
    col = e.sum(axis=0)
    if np.any(col <= 0):
        raise DomainError("every category needs positive total exposure to estimate v")
    return x.sum(axis=0) / col


def estimate_u(pop: PopulationTable, cases: CaseTable) -> np.ndarray:
    """Missing-rate component: least-squares fit of missing totals on exposures.

    Solves min_u ||m - E u|| via QR. The solution is the unbiased linear
    estimator of u; entries can be negative in small samples and are returned
    unclipped. Raises IdentifiabilityError when the exposure matrix is
    numerically rank-deficient.
    """
    e, _, m = _single_geo_arrays(pop, cases)
    n_cat = e.shape[1]
    rank, _ = _rank(e)
    if rank < n_cat:
        raise IdentifiabilityError(
            f"exposure matrix has rank {rank} < {n_cat}; u is not identified",
            rank=rank,
            required=n_cat,
        )
    q, r = np.linalg.qr(e)
    return solve_triangular(r, q.T @ m, lower=False)


def estimate_lambda(pop: PopulationTable, cases: CaseTable) -> SimpleEstimates:
    """Unbiased closed-form rate estimates: lam = v + u."""
    v = estimate_v(pop, cases)
    u = estimate_u(pop, cases)
    lam = v + u
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(lam > 0, v / lam, np.nan)
    return SimpleEstimates(v=v, u=u, lam=lam, p=p)


# --- Stable normal hazard machinery -----------------------------------------
#
# h(z) = phi(z) / Phi(z) is evaluated through erfcx for z >= -8 and through
# the continued fraction of the Mills ratio for z < -8 (the erfcx route stays
# accurate there too, but the asymptotic route is kept as the pinned
# deep-tail evaluation and converges to machine precision for such z).
# The derived quantities
#     t1(z) = z + h(z)            (> 0, the truncated-normal mean factor)
#     w1(z) = 1 - z h(z) - h(z)^2 (in (0,1), the truncated-normal var factor)
#     w2(z) = 2 - z Psi - Psi^2,  Psi = 1 / t1(z)
# suffer catastrophic cancellation for very negative z, where they behave as
# 1/z, 1/z^2 and 2/z^2; beyond |z| = 71 they switch to asymptotic series with
# relative error below ~1e-8 at the crossover and falling as z^-4.

_SQRT_2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_TAIL_Z = -8.0
_SERIES_T = 71.0


def _mills_cf(t: float) -> float:
    """Mills ratio Phi(-t)/phi(t) for t >= 8 by continued fraction."""
    # R(t) = 1/(t + 1/(t + 2/(t + 3/(t + ...)))); 40 levels is far past
    # convergence for t >= 8.
    acc = 0.0
    for k in range(40, 0, -1):
        acc = k / (t + acc)
    return 1.0 / (t + acc)


def norm_hazard(z) -> np.ndarray | float:
    """phi(z)/Phi(z), overflow-safe for any float z."""
    z_arr = np.atleast_1d(np.asarray(z, dtype=np.float64))
    out = np.empty_like(z_arr)
    main = z_arr >= _TAIL_Z
    if np.any(main):
        out[main] = _SQRT_2_OVER_PI / erfcx(-z_arr[main] / _SQRT_2)
    if np.any(~main):
        out[~main] = [1.0 / _mills_cf(float(-zz)) for zz in z_arr[~main]]
    return out if np.ndim(z) else float(out[0])


def _t1(z: float) -> float:
    """z + h(z), computed without cancellation for deep negative z."""
    if z <= -_SERIES_T:
        t = -z
        t2 = t * t
        return (1.0 - 2.0 / t2 + 10.0 / (t2 * t2) - 74.0 / (t2 * t2 * t2)) / t
    return z + norm_hazard(z)


def _w1(z: float) -> float:
    """1 - z h - h^2, the variance factor of a lower-truncated normal."""
    if abs(z) >= _SERIES_T:
        if z > 0:
            h = norm_hazard(z)
            return 1.0 - z * h - h * h
        t2 = z * z
        return (1.0 - 6.0 / t2 + 50.0 / (t2 * t2)) / t2
    h = norm_hazard(z)
    return 1.0 - z * h - h * h


def _w2(z: float) -> float:
    """2 - z Psi - Psi^2 with Psi = 1/(z + h(z)); exposure-weighted variant."""
    if z <= -_SERIES_T:
        t2 = z * z
        return (2.0 - 18.0 / t2 + 210.0 / (t2 * t2)) / t2
    psi = 1.0 / _t1(z)
    return 2.0 - z * psi - psi * psi


# --- Approximate posterior for the first category's rate --------------------


@dataclass(frozen=True)
class ApproxPosterior:
    """Gaussian-filter approximate posterior of the first category's rate.

    mean/variance approximate E[lam_1 | data] and Var[lam_1 | data]. z is the
    standardized distance of the prior-rate point from the missing-signal
    moments s1, s2 (weighted sums of missing totals), E_plus1 is the first
    category's total exposure, u2 the fixed second-category missing-rate
    component and beta1 the power of the shape weighting (1 or 2).
    Invariants: variance >= 0 and z == (s1 - u2*(r1 + E_plus1)) / sqrt(s2).
    """

    mean: float
    variance: float
    z: float
    s1: float
    s2: float
    E_plus1: float
    u2: float
    beta1: int
    negative_u_flag: bool = False


def approx_posterior_lambda1(
    pop: PopulationTable,
    cases: CaseTable,
    u2: float,
    r1: float,
    alpha1: float,
    beta1: int,
) -> ApproxPosterior:
    """Closed-form approximate posterior of the first category's rate (J = 2).

    Conditions on the second category's missing-rate component u2 and on a
    gamma prior with shape alpha1 and rate r1 for the recorded-rate component,
    and a power-function prior with exponent beta1 - 1 (beta1 in {1, 2}) for
    the missing-rate component. The missing-signal moments are

        s1 = sum_i m_i E_i1 / E_i2,   s2 = sum_i m_i (E_i1 / E_i2)^2,

    and with sigma = u2 / sqrt(s2), z = (s1 - u2 (r1 + E_plus1)) / sqrt(s2):

        beta1 = 1: E[u1] = sigma (z + h(z)),   Var[u1] = sigma^2 (1 - z h - h^2)
        beta1 = 2: E[u1] = sigma (z + Psi),    Var[u1] = sigma^2 (2 - z Psi - Psi^2)

    with h the normal hazard and Psi = 1/(z + h(z)). The recorded component
    contributes (alpha1 + sum_i x_i1) / (r1 + E_plus1) to the mean and the
    matching gamma variance.
    """
    e, x, m = _single_geo_arrays(pop, cases)
    if pop.n_categories != 2:
        raise ValidationError("approx_posterior_lambda1 requires exactly two categories")
    if not (u2 > 0 and np.isfinite(u2)):
        raise DomainError("u2 must be positive and finite")
    if not (r1 > 0 and alpha1 > 0):
        raise DomainError("prior rate r1 and shape alpha1 must be positive")
    if beta1 not in (1, 2):
        raise DomainError("beta1 must be 1 or 2")
    if np.any(e[:, 1] <= 0):
        raise DomainError("second-category exposures must be positive in every stratum")
    ratio = e[:, 0] / e[:, 1]
    if float(ratio.max(initial=0.0)) > MINORITY_EXPOSURE_WARN:
        warnings.warn(
            "first-category exposure exceeds "
            f"{MINORITY_EXPOSURE_WARN:g} of the second category's in some stratum; "
            "the minority-category approximation degrades",
            stacklevel=2,
        )
    s1 = float(np.sum(m * ratio))
    s2 = float(np.sum(m * ratio * ratio))
    if s2 <= 0:
        raise DomainError(
            "no missing cases weighted toward the first category (s2 = 0); "
            "the approximate posterior is degenerate"
        )
    e_plus1 = float(e[:, 0].sum())
    sum_x1 = float(x[:, 0].sum())
    sigma = u2 / np.sqrt(s2)
    z = (s1 - u2 * (r1 + e_plus1)) / np.sqrt(s2)
    base_mean = (alpha1 + sum_x1) / (r1 + e_plus1)
    base_var = (alpha1 + sum_x1) / (r1 + e_plus1) ** 2
    if beta1 == 1:
        mean_u = sigma * _t1(z)
        var_u = sigma * sigma * _w1(z)
    else:
        psi = 1.0 / _t1(z)
        mean_u = sigma * (z + psi)
        var_u = sigma * sigma * _w2(z)
    return ApproxPosterior(
        mean=base_mean + mean_u,
        variance=base_var + var_u,
        z=z,
        s1=s1,
        s2=s2,
        E_plus1=e_plus1,
        u2=u2,
        beta1=beta1,
        negative_u_flag=bool(mean_u < 0),
    )


def approx_posterior_asymptote(
    u1_star: float,
    u2_star: float,
    v1_star: float,
    n_strata: int,
    n_repeats: int,
    r1: float,
) -> ApproxPosterior:
    """Large-table limit of the approximate posterior under unit exposures.

    With n = n_strata * n_repeats unit-exposure strata generated at true
    components (v1*, u1*, u2*), the moments concentrate: s1 -> u1* n (after
    removing the part matched by E_plus1), s2 -> u2* n, so

        z* = (u1* n - u2* r1) / sqrt(u2* n),
        mean -> v1* + sigma* (z* + h(z*)),   sigma* = sqrt(u2* / n),
        variance -> (u2* / n) (1 - z* h - h^2).

    The returned record stores the limiting moment values (s1 = u1* n,
    s2 = u2* n, E_plus1 = 0) under which the z invariant holds exactly.
    """
    if min(u1_star, u2_star, v1_star) <= 0 or r1 <= 0:
        raise DomainError("asymptote requires positive rate components and prior rate")
    if n_strata < 1 or n_repeats < 1:
        raise DomainError("table dimensions must be positive")
    n = float(n_strata * n_repeats)
    sigma = np.sqrt(u2_star / n)
    z = (u1_star * n - u2_star * r1) / np.sqrt(u2_star * n)
    mean_u = sigma * _t1(z)
    var_u = sigma * sigma * _w1(z)
    return ApproxPosterior(
        mean=v1_star + mean_u,
        variance=var_u,
        z=float(z),
        s1=u1_star * n,
        s2=u2_star * n,
        E_plus1=0.0,
        u2=u2_star,
        beta1=1,
        negative_u_flag=bool(mean_u < 0),
    )


def beta_shift_statistic(z: float) -> float:
    """Standardized mean shift between the beta1=2 and beta1=1 posteriors.

    (mean_2 - mean_1) / sd_1 = sqrt(w1(z)) / t1(z), exact under the
    approximate posterior family; the prior-power change moves the posterior
    mean by this many posterior standard deviations.
    """
    return float(np.sqrt(_w1(z)) / _t1(z))


# --- Fisher information and identifiability checks ---------------------------


def fisher_info_simple(pop: PopulationTable, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Expected information for (v, u), block diagonal, at the given point.

    Block order (v_1..v_J, u_1..u_J): the v block is diagonal with entries
    sum_i E_ij / v_j; the u block is E' diag(1/(E u)) E. Raises DomainError
    when a needed denominator is zero or negative.
    """
    e = pop.pool_geos().counts[:, 0, :].astype(np.float64) if pop.n_geos != 1 else (
        pop.counts[:, 0, :].astype(np.float64)
    )
    n_cat = e.shape[1]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != (n_cat,) or v.shape != (n_cat,):
        raise ValidationError(f"u and v must have shape ({n_cat},)")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DomainError("v components must be positive and finite")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise DomainError("u components must be non-negative and finite")
    row_rate = e @ u
    if np.any(row_rate <= 0):
        raise DomainError("every stratum needs a positive missing-rate denominator (E u > 0)")
    info = np.zeros((2 * n_cat, 2 * n_cat))
    info[:n_cat, :n_cat] = np.diag(e.sum(axis=0) / v)
    info[n_cat:, n_cat:] = e.T @ (e / row_rate[:, None])
    return info


@dataclass(frozen=True)
class IdentifiabilityReport:
    """Outcome of an identifiability check.

    conditions: the theorem's named conditions, each True/False.
    supplementary: extra regularity conditions reported alongside (they do
      not enter the verdict).
    details: computed ranks, tolerances and offending values for diagnosis.
    verdict: conjunction of `conditions`.
    """

    kind: str
    conditions: dict[str, bool]
    supplementary: dict[str, bool]
    details: dict[str, object]
    verdict: bool

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "conditions": dict(self.conditions),
            "supplementary": dict(self.supplementary),
            "details": dict(self.details),
            "verdict": self.verdict,
        }


def check_global_id(pop: PopulationTable, lam: np.ndarray, p: np.ndarray) -> IdentifiabilityReport:
    """Global identifiability of the no-covariate model at (lam, p).

    E.a: the exposure matrix has full column rank.
    E.b: every rate is strictly positive and finite.
    E.c: every observation probability is strictly inside (0, 1).
    Supplementary E.d: every stratum has positive total exposure (needed for
    a positive-definite information matrix, not for identifiability itself).
    """
    e = (pop if pop.n_geos == 1 else pop.pool_geos()).counts[:, 0, :].astype(np.float64)
    n_cat = e.shape[1]
    lam = np.asarray(lam, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if lam.shape != (n_cat,) or p.shape != (n_cat,):
        raise ValidationError(f"lam and p must have shape ({n_cat},)")
    rank, tol = _rank(e)
    conditions = {
        "E.a": rank == n_cat,
        "E.b": bool(np.all(lam > 0) and np.all(np.isfinite(lam))),
        "E.c": bool(np.all(p > 0) and np.all(p < 1)),
    }
    supplementary = {"E.d": bool(np.all(e.sum(axis=1) > 0))}
    details: dict[str, object] = {
        "exposure_rank": rank,
        "exposure_rank_required": n_cat,
        "rank_tolerance": tol,
    }
    return IdentifiabilityReport(
        kind="global",
        conditions=conditions,
        supplementary=supplementary,
        details=details,
        verdict=all(conditions.values()),
    )


def check_local_id(
    pop: PopulationTable,
    design: DesignMatrices,
    lam: np.ndarray,
    p: np.ndarray,
    beta: np.ndarray,
) -> IdentifiabilityReport:
    """Local identifiability of the covariate model at (lam, p, beta).

    For a single-geography table with exposures E (I x J) and stratum design
    Z (I x K):

    S.a: rank(E) = J.
    S.b: rank(Z) = K.
    S.c: I >= J + K.
    S.d: every observation probability lies strictly in (0, 1).
    S.e: every rate is strictly positive and finite.
    S.f: every stratum's covariate-scaled total exposure is in (0, inf).
    S.g: rank([diag(E_:1) Z, ..., diag(E_:J) Z, E_:1, ..., E_:J]) > J + K.

    p may be a (J,) vector (shared across strata) or an (I, J) matrix.
    """
    if pop.n_geos != 1:
        raise ValidationError("check_local_id expects a single-geography table")
    e = pop.counts[:, 0, :].astype(np.float64)
    n_strata, n_cat = e.shape
    z = design.Z
    if z.shape[0] != n_strata:
        raise ValidationError("design matrix rows do not match strata")
    n_cov = z.shape[1]
    lam = np.asarray(lam, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        p = np.broadcast_to(p, (n_strata, n_cat))
    if lam.shape != (n_cat,) or beta.shape != (n_cov,) or p.shape != (n_strata, n_cat):
        raise ValidationError("parameter shapes do not match the table and design")
    rank_e, tol_e = _rank(e)
    rank_z, tol_z = _rank(z)
    scaled_totals = np.exp(z @ beta) * e.sum(axis=1)
    big = np.concatenate([e[:, [j]] * z for j in range(n_cat)] + [e], axis=1)
    rank_big, tol_big = _rank(big)
    conditions = {
        "S.a": rank_e == n_cat,
        "S.b": rank_z == n_cov,
        "S.c": n_strata >= n_cat + n_cov,
        "S.d": bool(np.all(p > 0) and np.all(p < 1)),
        "S.e": bool(np.all(lam > 0) and np.all(np.isfinite(lam))),
        "S.f": bool(np.all(scaled_totals > 0) and np.all(np.isfinite(scaled_totals))),
        "S.g": rank_big > n_cat + n_cov,
    }
    details: dict[str, object] = {
        "exposure_rank": rank_e,
        "design_rank": rank_z,
        "joint_rank": rank_big,
        "joint_rank_required_exceeds": n_cat + n_cov,
        "rank_tolerances": {"exposure": tol_e, "design": tol_z, "joint": tol_big},
        "n_strata": n_strata,
    }
    return IdentifiabilityReport(
        kind="local",
        conditions=conditions,
        supplementary={},
        details=details,
        verdict=all(conditions.values()),
    )
