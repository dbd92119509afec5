"""Joint count model: likelihoods, hierarchical priors, unconstrained posterior.

Model structure, per stratum i, geography g, category j:

    recorded cases   X[i,g,j] ~ Poisson(p[i,g,j] * lam[g,j] * exp(z_i'beta_g) * E[i,g,j])
    missing total    M[i,g]   ~ Poisson(exp(z_i'beta_g) * sum_j (1-p[i,g,j]) * lam[g,j] * E[i,g,j])
    p[i,g,j] = inv_logit(z_i'gamma_g + eta[g,j])

independently across cells; this factorized form is the exact marginal of the
latent per-category splits of the missing counts (see `exact` for the
enumeration check). Geography-level parameter vectors are exchangeable draws
from normal hierarchies with diagonal scale, and hyper means/scales carry
normal / half-normal hyperpriors.

The complete-case variant drops the missingness part entirely: it models only
X[i,g,j] ~ Poisson(lam[g,j] * exp(z_i'beta_g) * E[i,g,j]) and ignores any
missing totals present in the case table.

Zero-rate convention everywhere: a structurally zero rate contributes 0 when
the count is 0 and -inf when it is positive; no exception is raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import isnan
from typing import Sequence

import numpy as np
from scipy.special import expit, gammaln, log_expit

from .errors import ConfigurationError, ValidationError
from .tables import CaseTable, DesignMatrices, PopulationTable

LOG_HALF_NORMAL_CONST = 0.5 * np.log(2.0 / np.pi)
_LOG_2PI = np.log(2.0 * np.pi)


def _vec(x, n: int, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise ValidationError(f"{name} must have shape ({n},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class GeoParams:
    """One geography's parameter block.

    log_lambda[j]: log per-exposure disease rate of category j.
    eta[j]: category intercept on the logit observation-probability scale
      (None for complete-case models, which have no missingness block).
    beta[k]: stratum covariate effects on the log disease rate.
    gamma[k]: stratum covariate effects on the logit observation probability
      (None for complete-case models).
    """

    log_lambda: np.ndarray
    eta: np.ndarray | None
    beta: np.ndarray
    gamma: np.ndarray | None

    def __post_init__(self) -> None:
        j = np.asarray(self.log_lambda).shape[0]
        k = np.asarray(self.beta).shape[0]
        object.__setattr__(self, "log_lambda", _vec(self.log_lambda, j, "log_lambda"))
        object.__setattr__(self, "beta", _vec(self.beta, k, "beta"))
        if (self.eta is None) != (self.gamma is None):
            raise ValidationError("eta and gamma must both be present or both absent")
        if self.eta is not None:
            object.__setattr__(self, "eta", _vec(self.eta, j, "eta"))
            object.__setattr__(self, "gamma", _vec(self.gamma, k, "gamma"))

    @property
    def has_missingness(self) -> bool:
        return self.eta is not None


@dataclass(frozen=True)
class HyperParams:
    """Hierarchy-level means and scales for the geography blocks.

    Optional area-covariate coefficient matrices (pi_*) shift the hyper means
    per geography: the mean for block b in geography g is alpha_b + pi_b @ W[g].
    They are fixed inputs, not sampled quantities, and default to absent
    (equivalently zero).
    """

    alpha_lambda: np.ndarray
    alpha_eta: np.ndarray | None
    alpha_beta: np.ndarray
    alpha_gamma: np.ndarray | None
    sigma_lambda: np.ndarray
    sigma_eta: np.ndarray | None
    sigma_beta: np.ndarray
    sigma_gamma: np.ndarray | None
    pi_lambda: np.ndarray | None = None
    pi_eta: np.ndarray | None = None
    pi_beta: np.ndarray | None = None
    pi_gamma: np.ndarray | None = None

    def __post_init__(self) -> None:
        j = np.asarray(self.alpha_lambda).shape[0]
        k = np.asarray(self.alpha_beta).shape[0]
        object.__setattr__(self, "alpha_lambda", _vec(self.alpha_lambda, j, "alpha_lambda"))
        object.__setattr__(self, "alpha_beta", _vec(self.alpha_beta, k, "alpha_beta"))
        for name, size in (("sigma_lambda", j), ("sigma_beta", k)):
            v = _vec(getattr(self, name), size, name)
            if np.any(v <= 0):
                raise ValidationError(f"{name} must be positive")
            object.__setattr__(self, name, v)
        miss = [self.alpha_eta, self.alpha_gamma, self.sigma_eta, self.sigma_gamma]
        present = [m is not None for m in miss]
        if any(present) != all(present):
            raise ValidationError("missingness hyper blocks must all be present or all absent")
        if self.alpha_eta is not None:
            object.__setattr__(self, "alpha_eta", _vec(self.alpha_eta, j, "alpha_eta"))
            object.__setattr__(self, "alpha_gamma", _vec(self.alpha_gamma, k, "alpha_gamma"))
            for name, size in (("sigma_eta", j), ("sigma_gamma", k)):
                v = _vec(getattr(self, name), size, name)
                if np.any(v <= 0):
                    raise ValidationError(f"{name} must be positive")
                object.__setattr__(self, name, v)
        for name in ("pi_lambda", "pi_eta", "pi_beta", "pi_gamma"):
            m = getattr(self, name)
            if m is not None:
                a = np.asarray(m, dtype=np.float64)
                if a.ndim != 2 or not np.all(np.isfinite(a)):
                    raise ValidationError(f"{name} must be a finite 2-d matrix")
                object.__setattr__(self, name, a)

    @property
    def has_missingness(self) -> bool:
        return self.alpha_eta is not None


@dataclass(frozen=True)
class PriorConfig:
    """Hyperprior constants: normal (mean, sd) for means, half-normal scales for sigmas."""

    mean_alpha_lambda: float = -5.0
    sd_alpha_lambda: float = 1.0
    mean_alpha_eta: float = 2.0
    sd_alpha_eta: float = 1.0
    mean_alpha_beta: float = 0.0
    sd_alpha_beta: float = 1.0
    mean_alpha_gamma: float = 0.0
    sd_alpha_gamma: float = 1.0
    scale_sigma_lambda: float = 1.0
    scale_sigma_eta: float = 1.0
    scale_sigma_beta: float = 1.0
    scale_sigma_gamma: float = 0.25

    def __post_init__(self) -> None:
        for name in (
            "sd_alpha_lambda",
            "sd_alpha_eta",
            "sd_alpha_beta",
            "sd_alpha_gamma",
            "scale_sigma_lambda",
            "scale_sigma_eta",
            "scale_sigma_beta",
            "scale_sigma_gamma",
        ):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def simulation(cls) -> "PriorConfig":
        """Prior constants used by the simulation study."""
        return cls()

    @classmethod
    def applied(cls) -> "PriorConfig":
        """Applied-analysis variant: wider half-normal scale on sigma_gamma."""
        return cls(scale_sigma_gamma=1.0)


def _poisson_ll(counts: np.ndarray, rates: np.ndarray) -> float:
    """Sum of Poisson log-pmfs with the zero-rate convention."""
    counts = np.asarray(counts, dtype=np.float64)
    zero = rates == 0.0
    if np.any(zero):
        if np.any(counts[zero] > 0):
            return -np.inf
        counts = counts[~zero]
        rates = rates[~zero]
    val = float(np.sum(counts * np.log(rates) - rates - gammaln(counts + 1.0)))
    return -np.inf if isnan(val) else val


def log_lik_simple(
    pop: PopulationTable, cases: CaseTable, lam: np.ndarray, p: np.ndarray
) -> float:
    """Log-likelihood of the single-geography, no-covariate model.

    lam[j] >= 0 are per-exposure rates, p[j] in [0, 1] observation
    probabilities shared across strata. Factorized form: recorded counts are
    Poisson with rate p*lam*E and the missing total per stratum is Poisson
    with the complementary rate summed over categories.
    """
    cases.conforms(pop)
    if pop.n_geos != 1:
        raise ValidationError("log_lik_simple expects a single-geography table (pool first)")
    j = pop.n_categories
    lam = _vec(lam, j, "lam")
    p = _vec(p, j, "p")
    if np.any(lam < 0):
        raise ValidationError("lam must be non-negative")
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("p must lie in [0, 1]")
    e = pop.counts[:, 0, :].astype(np.float64)
    x = cases.observed[:, 0, :]
    m = cases.missing[:, 0]
    ll = _poisson_ll(x, p * lam * e)
    ll += _poisson_ll(m, e @ ((1.0 - p) * lam))
    return ll


def _stack_params(params: Sequence[GeoParams], n_geos: int):
    if len(params) != n_geos:
        raise ValidationError(f"expected {n_geos} geography blocks, got {len(params)}")
    with_miss = params[0].has_missingness
    if any(pr.has_missingness != with_miss for pr in params):
        raise ValidationError("geography blocks disagree on having a missingness part")
    log_lambda = np.stack([pr.log_lambda for pr in params])
    beta = np.stack([pr.beta for pr in params])
    if with_miss:
        eta = np.stack([pr.eta for pr in params])
        gamma = np.stack([pr.gamma for pr in params])
    else:
        eta = gamma = None
    return log_lambda, eta, beta, gamma


def _loglik_joint_arrays(
    e: np.ndarray,
    x: np.ndarray,
    m: np.ndarray,
    log_e: np.ndarray,
    pos: np.ndarray,
    z: np.ndarray,
    log_lambda: np.ndarray,
    eta: np.ndarray,
    beta: np.ndarray,
    gamma: np.ndarray,
    lgamma_const: float,
    want_grad: bool,
):
    """Joint-model log-likelihood and block gradients on raw arrays.

    Shapes: e, x (I,G,J) with `pos` the e > 0 mask and log_e = log(e) where
    positive, else 0; m (I,G); z (I,K); blocks (G,J) / (G,K). The caller
    guarantees x is zero wherever e is zero. Non-finite log-likelihoods are
    returned as -inf with no gradient.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        zb = z @ beta.T  # (I,G)
        logit_p = (z @ gamma.T)[:, :, None] + eta[None, :, :]  # (I,G,J)
        p = expit(logit_p)
        log_mu = log_expit(logit_p) + log_lambda[None, :, :] + zb[:, :, None] + log_e
        mu = np.where(pos, np.exp(log_mu), 0.0)
        ll_x = np.sum(np.where(pos, x * log_mu - mu, 0.0))
        lam = np.exp(log_lambda)  # (G,J)
        d = np.exp(zb)[:, :, None] * (1.0 - p) * lam[None, :, :] * e  # (I,G,J)
        nu = d.sum(axis=2)  # (I,G)
        nu_zero = nu == 0.0
        if np.any(m[nu_zero] > 0):
            return -np.inf, None
        safe_nu = np.where(nu_zero, 1.0, nu)
        ll_m = np.sum(np.where(nu_zero, 0.0, m * np.log(safe_nu) - nu))
        ll = float(ll_x + ll_m) - lgamma_const
        if isnan(ll) or ll == np.inf:
            return -np.inf, None
        if not want_grad or ll == -np.inf:
            return ll, None
        a = np.where(pos, x - mu, 0.0)  # (I,G,J)
        b = np.where(nu_zero, 0.0, m / safe_nu - 1.0)  # (I,G)
        g_log_lambda = a.sum(axis=0) + np.einsum("ig,igj->gj", b, d)
        g_eta = (a * (1.0 - p)).sum(axis=0) - np.einsum("ig,igj->gj", b, d * p)
        g_beta = (a.sum(axis=2) + m - nu).T @ z
        g_gamma = ((a * (1.0 - p)).sum(axis=2) - b * (d * p).sum(axis=2)).T @ z
    return ll, (g_log_lambda, g_eta, g_beta, g_gamma)


def _loglik_cc_arrays(
    e: np.ndarray,
    x: np.ndarray,
    log_e: np.ndarray,
    pos: np.ndarray,
    z: np.ndarray,
    log_lambda: np.ndarray,
    beta: np.ndarray,
    lgamma_const: float,
    want_grad: bool,
):
    """Complete-case log-likelihood and gradients: recorded counts only."""
    with np.errstate(over="ignore", invalid="ignore"):
        zb = z @ beta.T  # (I,G)
        log_mu = log_lambda[None, :, :] + zb[:, :, None] + log_e
        mu = np.where(pos, np.exp(log_mu), 0.0)
        ll = float(np.sum(np.where(pos, x * log_mu - mu, 0.0))) - lgamma_const
        if isnan(ll) or ll == np.inf:
            return -np.inf, None
        if not want_grad or ll == -np.inf:
            return ll, None
        a = np.where(pos, x - mu, 0.0)
        g_log_lambda = a.sum(axis=0)
        g_beta = a.sum(axis=2).T @ z
    return ll, (g_log_lambda, g_beta)


def _prep_tables(pop: PopulationTable, cases: CaseTable | None, design: DesignMatrices):
    e = pop.counts.astype(np.float64)
    if design.Z.shape[0] != pop.n_strata:
        raise ValidationError("design matrix rows do not match strata")
    if cases is not None:
        cases.conforms(pop)
        x = cases.observed.astype(np.float64)
        m = cases.missing.astype(np.float64)
    else:
        x = m = None
    pos = e > 0
    log_e = np.where(pos, np.log(np.where(pos, e, 1.0)), 0.0)
    return e, x, m, pos, log_e


def _structural_x_ok(x: np.ndarray, pos: np.ndarray) -> bool:
    return not np.any(x[~pos] > 0)


def log_lik_full(
    pop: PopulationTable, cases: CaseTable, design: DesignMatrices, params: GeoParams
) -> float:
    """Single-geography covariate model log-likelihood."""
    if pop.n_geos != 1:
        raise ValidationError("log_lik_full expects a single-geography table")
    return log_lik_geo(pop, cases, design, [params])


def log_lik_geo(
    pop: PopulationTable,
    cases: CaseTable,
    design: DesignMatrices,
    params: Sequence[GeoParams],
) -> float:
    """Multi-geography model log-likelihood (independent across geographies).

    Parameter blocks without a missingness part select the complete-case
    likelihood, which ignores the table's missing totals.
    """
    e, x, m, pos, log_e = _prep_tables(pop, cases, design)
    log_lambda, eta, beta, gamma = _stack_params(params, pop.n_geos)
    if not _structural_x_ok(x, pos):
        return -np.inf
    if eta is None:
        lgamma_const = float(gammaln(x + 1.0).sum())
        ll, _ = _loglik_cc_arrays(e, x, log_e, pos, design.Z, log_lambda, beta, lgamma_const, False)
    else:
        lgamma_const = float(gammaln(x + 1.0).sum() + gammaln(m + 1.0).sum())
        ll, _ = _loglik_joint_arrays(
            e, x, m, log_e, pos, design.Z, log_lambda, eta, beta, gamma, lgamma_const, False
        )
    return ll


def _normal_ll(x: np.ndarray, mean: np.ndarray, sd) -> float:
    z = (x - mean) / sd
    return float(np.sum(-0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI))


def _half_normal_ll(x: np.ndarray, scale) -> float:
    if np.any(x <= 0):
        return -np.inf
    z = x / scale
    return float(np.sum(LOG_HALF_NORMAL_CONST - np.log(scale) - 0.5 * z * z))


def _hyper_means(hyper: HyperParams, block: str, n_geos: int, w: np.ndarray | None) -> np.ndarray:
    alpha = getattr(hyper, f"alpha_{block}")
    pi = getattr(hyper, f"pi_{block}")
    means = np.broadcast_to(alpha, (n_geos, alpha.shape[0]))
    if pi is not None:
        if w is None:
            raise ValidationError(f"pi_{block} given but no area covariate matrix W")
        means = means + w @ pi.T
    return means


def log_prior_hier(
    params: Sequence[GeoParams],
    hyper: HyperParams,
    w: np.ndarray | None = None,
) -> float:
    """Normal hierarchy over geography blocks with diagonal scales."""
    log_lambda, eta, beta, gamma = _stack_params(params, len(params))
    if hyper.has_missingness != (eta is not None):
        raise ValidationError("hyper and geography blocks disagree on the missingness part")
    g = len(params)
    total = _normal_ll(log_lambda, _hyper_means(hyper, "lambda", g, w), hyper.sigma_lambda)
    total += _normal_ll(beta, _hyper_means(hyper, "beta", g, w), hyper.sigma_beta)
    if hyper.has_missingness:
        total += _normal_ll(eta, _hyper_means(hyper, "eta", g, w), hyper.sigma_eta)
        total += _normal_ll(gamma, _hyper_means(hyper, "gamma", g, w), hyper.sigma_gamma)
    return total


def log_hyperprior(hyper: HyperParams, config: PriorConfig) -> float:
    """Normal hyperpriors on the means, half-normal on the scales."""
    al = hyper.alpha_lambda
    ab = hyper.alpha_beta
    total = _normal_ll(al, np.full_like(al, config.mean_alpha_lambda), config.sd_alpha_lambda)
    total += _normal_ll(ab, np.full_like(ab, config.mean_alpha_beta), config.sd_alpha_beta)
    total += _half_normal_ll(hyper.sigma_lambda, config.scale_sigma_lambda)
    total += _half_normal_ll(hyper.sigma_beta, config.scale_sigma_beta)
    if hyper.has_missingness:
        ae = hyper.alpha_eta
        ag = hyper.alpha_gamma
        total += _normal_ll(ae, np.full_like(ae, config.mean_alpha_eta), config.sd_alpha_eta)
        total += _normal_ll(ag, np.full_like(ag, config.mean_alpha_gamma), config.sd_alpha_gamma)
        total += _half_normal_ll(hyper.sigma_eta, config.scale_sigma_eta)
        total += _half_normal_ll(hyper.sigma_gamma, config.scale_sigma_gamma)
    return total


@dataclass(frozen=True)
class ParamPacker:
    """Fixed layout between structured parameters and one unconstrained vector.

    Block order: log_lambda (G*J), [eta (G*J)], beta (G*K), [gamma (G*K)],
    alpha_lambda (J), [alpha_eta (J)], alpha_beta (K), [alpha_gamma (K)],
    then log-sigma blocks in the same order as the alphas. Scales enter the
    vector on the log scale, so every real vector is a valid point.
    """

    n_geos: int
    n_categories: int
    n_covariates: int
    with_missingness: bool = True

    def __post_init__(self) -> None:
        g, j, k = self.n_geos, self.n_categories, self.n_covariates
        blocks: list[tuple[str, int]] = [("log_lambda", g * j)]
        if self.with_missingness:
            blocks.append(("eta", g * j))
        blocks.append(("beta", g * k))
        if self.with_missingness:
            blocks.append(("gamma", g * k))
        blocks.append(("alpha_lambda", j))
        if self.with_missingness:
            blocks.append(("alpha_eta", j))
        blocks.append(("alpha_beta", k))
        if self.with_missingness:
            blocks.append(("alpha_gamma", k))
        blocks.append(("log_sigma_lambda", j))
        if self.with_missingness:
            blocks.append(("log_sigma_eta", j))
        blocks.append(("log_sigma_beta", k))
        if self.with_missingness:
            blocks.append(("log_sigma_gamma", k))
        sl: dict[str, slice] = {}
        at = 0
        for name, size in blocks:
            sl[name] = slice(at, at + size)
            at += size
        object.__setattr__(self, "_slices", sl)
        object.__setattr__(self, "_dim", at)

    @property
    def slices(self) -> dict[str, slice]:
        return self._slices

    @property
    def dim(self) -> int:
        return self._dim

    def names(self) -> list[str]:
        g, j, k = self.n_geos, self.n_categories, self.n_covariates
        per_category = {"alpha_lambda", "alpha_eta", "log_sigma_lambda", "log_sigma_eta"}
        out: list[str] = []
        for name in self.slices:
            if name in ("log_lambda", "eta"):
                out += [f"{name}_g{gg}_c{jj}" for gg in range(g) for jj in range(j)]
            elif name in ("beta", "gamma"):
                out += [f"{name}_g{gg}_k{kk}" for gg in range(g) for kk in range(k)]
            elif name in per_category:
                out += [f"{name}_c{jj}" for jj in range(j)]
            else:
                out += [f"{name}_k{kk}" for kk in range(k)]
        return out

    def pack(self, params: Sequence[GeoParams], hyper: HyperParams) -> np.ndarray:
        g = self.n_geos
        log_lambda, eta, beta, gamma = _stack_params(params, g)
        if (eta is not None) != self.with_missingness:
            raise ValidationError("parameter blocks do not match this packer's model kind")
        if hyper.has_missingness != self.with_missingness:
            raise ValidationError("hyper parameters do not match this packer's model kind")
        theta = np.empty(self.dim)
        sl = self.slices
        theta[sl["log_lambda"]] = log_lambda.ravel()
        theta[sl["beta"]] = beta.ravel()
        theta[sl["alpha_lambda"]] = hyper.alpha_lambda
        theta[sl["alpha_beta"]] = hyper.alpha_beta
        theta[sl["log_sigma_lambda"]] = np.log(hyper.sigma_lambda)
        theta[sl["log_sigma_beta"]] = np.log(hyper.sigma_beta)
        if self.with_missingness:
            theta[sl["eta"]] = eta.ravel()
            theta[sl["gamma"]] = gamma.ravel()
            theta[sl["alpha_eta"]] = hyper.alpha_eta
            theta[sl["alpha_gamma"]] = hyper.alpha_gamma
            theta[sl["log_sigma_eta"]] = np.log(hyper.sigma_eta)
            theta[sl["log_sigma_gamma"]] = np.log(hyper.sigma_gamma)
        return theta

    def unpack_arrays(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        g, j, k = self.n_geos, self.n_categories, self.n_covariates
        sl = self.slices
        out = {
            "log_lambda": theta[sl["log_lambda"]].reshape(g, j),
            "beta": theta[sl["beta"]].reshape(g, k),
            "alpha_lambda": theta[sl["alpha_lambda"]],
            "alpha_beta": theta[sl["alpha_beta"]],
            "log_sigma_lambda": theta[sl["log_sigma_lambda"]],
            "log_sigma_beta": theta[sl["log_sigma_beta"]],
        }
        if self.with_missingness:
            out["eta"] = theta[sl["eta"]].reshape(g, j)
            out["gamma"] = theta[sl["gamma"]].reshape(g, k)
            out["alpha_eta"] = theta[sl["alpha_eta"]]
            out["alpha_gamma"] = theta[sl["alpha_gamma"]]
            out["log_sigma_eta"] = theta[sl["log_sigma_eta"]]
            out["log_sigma_gamma"] = theta[sl["log_sigma_gamma"]]
        return out

    def unpack(self, theta: np.ndarray) -> tuple[list[GeoParams], HyperParams]:
        a = self.unpack_arrays(np.asarray(theta, dtype=np.float64))
        params = [
            GeoParams(
                log_lambda=a["log_lambda"][g],
                eta=a["eta"][g] if self.with_missingness else None,
                beta=a["beta"][g],
                gamma=a["gamma"][g] if self.with_missingness else None,
            )
            for g in range(self.n_geos)
        ]
        hyper = HyperParams(
            alpha_lambda=a["alpha_lambda"],
            alpha_eta=a.get("alpha_eta"),
            alpha_beta=a["alpha_beta"],
            alpha_gamma=a.get("alpha_gamma"),
            sigma_lambda=np.exp(a["log_sigma_lambda"]),
            sigma_eta=np.exp(a["log_sigma_eta"]) if self.with_missingness else None,
            sigma_beta=np.exp(a["log_sigma_beta"]),
            sigma_gamma=np.exp(a["log_sigma_gamma"]) if self.with_missingness else None,
        )
        return params, hyper


class PosteriorTarget:
    """Unnormalized log-posterior on the unconstrained vector, with gradient.

    The density includes the log-scale change-of-variables terms for the
    sigma blocks, so it is the exact sampling target. `cases=None` drops the
    likelihood (prior-only target). Instances are picklable and reusable
    across many evaluations; all data-dependent constants are precomputed.
    """

    def __init__(
        self,
        pop: PopulationTable,
        cases: CaseTable | None,
        design: DesignMatrices,
        config: PriorConfig,
        *,
        model: str = "joint",
        hyper_fixed: HyperParams | None = None,
    ):
        if model not in ("joint", "complete_case"):
            raise ConfigurationError(f"unknown model kind: {model!r}")
        self.model = model
        self.pop = pop
        self.design = design
        self.config = config
        self.packer = ParamPacker(
            n_geos=pop.n_geos,
            n_categories=pop.n_categories,
            n_covariates=design.Z.shape[1],
            with_missingness=(model == "joint"),
        )
        e, x, m, pos, log_e = _prep_tables(pop, cases, design)
        self._e, self._x, self._m, self._pos, self._log_e = e, x, m, pos, log_e
        self._z = np.ascontiguousarray(design.Z)
        self._w = design.W
        self._x_ok = True
        if x is not None:
            self._x_ok = _structural_x_ok(x, pos)
            if self.packer.with_missingness:
                self._lgamma_const = float(gammaln(x + 1.0).sum() + gammaln(m + 1.0).sum())
            else:
                self._lgamma_const = float(gammaln(x + 1.0).sum())
        else:
            self._lgamma_const = 0.0
        # Fixed area-covariate shifts of the hyper means, per block: (G, n) or None.
        self._shifts: dict[str, np.ndarray | None] = {}
        for block in ("lambda", "eta", "beta", "gamma"):
            pi = getattr(hyper_fixed, f"pi_{block}", None) if hyper_fixed is not None else None
            if pi is not None:
                if self._w is None:
                    raise ValidationError(f"pi_{block} given but design has no W")
                self._shifts[block] = self._w @ pi.T
            else:
                self._shifts[block] = None

    @property
    def dim(self) -> int:
        return self.packer.dim

    def names(self) -> list[str]:
        return self.packer.names()

    def value(self, theta: np.ndarray) -> float:
        return self._eval(np.asarray(theta, dtype=np.float64), want_grad=False)[0]

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        val, grad = self._eval(np.asarray(theta, dtype=np.float64), want_grad=True)
        if grad is None:
            grad = np.zeros(self.packer.dim)
        return val, grad

    def _eval(self, theta: np.ndarray, want_grad: bool):
        pk = self.packer
        a = pk.unpack_arrays(theta)
        cfg = self.config
        sl = pk.slices
        grad = np.zeros(pk.dim) if want_grad else None

        total = 0.0
        if self._x is not None:
            if not self._x_ok:
                return -np.inf, None
            if pk.with_missingness:
                ll, lik_grads = _loglik_joint_arrays(
                    self._e, self._x, self._m, self._log_e, self._pos, self._z,
                    a["log_lambda"], a["eta"], a["beta"], a["gamma"],
                    self._lgamma_const, want_grad,
                )
            else:
                ll, lik_grads = _loglik_cc_arrays(
                    self._e, self._x, self._log_e, self._pos, self._z,
                    a["log_lambda"], a["beta"], self._lgamma_const, want_grad,
                )
            if ll == -np.inf:
                return -np.inf, None
            total += ll
            if want_grad:
                if pk.with_missingness:
                    g_ll, g_eta, g_beta, g_gamma = lik_grads
                    grad[sl["log_lambda"]] += g_ll.ravel()
                    grad[sl["eta"]] += g_eta.ravel()
                    grad[sl["beta"]] += g_beta.ravel()
                    grad[sl["gamma"]] += g_gamma.ravel()
                else:
                    g_ll, g_beta = lik_grads
                    grad[sl["log_lambda"]] += g_ll.ravel()
                    grad[sl["beta"]] += g_beta.ravel()

        blocks = [
            ("lambda", "log_lambda", cfg.mean_alpha_lambda, cfg.sd_alpha_lambda,
             cfg.scale_sigma_lambda),
            ("beta", "beta", cfg.mean_alpha_beta, cfg.sd_alpha_beta, cfg.scale_sigma_beta),
        ]
        if pk.with_missingness:
            blocks.insert(
                1, ("eta", "eta", cfg.mean_alpha_eta, cfg.sd_alpha_eta, cfg.scale_sigma_eta)
            )
            blocks.append(
                ("gamma", "gamma", cfg.mean_alpha_gamma, cfg.sd_alpha_gamma,
                 cfg.scale_sigma_gamma)
            )
        with np.errstate(over="ignore", invalid="ignore"):
            for block, geo_name, mean0, sd0, hn_scale in blocks:
                vals = a[geo_name]  # (G, n)
                alpha = a[f"alpha_{block}"]
                log_sigma = a[f"log_sigma_{block}"]
                sigma = np.exp(log_sigma)
                inv_sigma = np.exp(-log_sigma)
                n = alpha.shape[0]
                means = alpha[None, :]
                if self._shifts[block] is not None:
                    means = means + self._shifts[block]
                r = (vals - means) * inv_sigma[None, :]
                # Hierarchy normals + hyperpriors on (alpha, sigma)
                # + log-scale Jacobian (one +log sigma per scale entry).
                za = (alpha - mean0) / sd0
                zs = sigma / hn_scale
                total += float(
                    np.sum(-0.5 * r * r)
                    - pk.n_geos * np.sum(log_sigma)
                    - 0.5 * pk.n_geos * n * _LOG_2PI
                    + np.sum(-0.5 * za * za)
                    - n * (np.log(sd0) + 0.5 * _LOG_2PI)
                    + np.sum(-0.5 * zs * zs)
                    + n * (LOG_HALF_NORMAL_CONST - np.log(hn_scale))
                    + np.sum(log_sigma)
                )
                if want_grad:
                    grad[sl[geo_name]] += (-r * inv_sigma[None, :]).ravel()
                    grad[sl[f"alpha_{block}"]] += (r * inv_sigma[None, :]).sum(axis=0) - za / sd0
                    grad[sl[f"log_sigma_{block}"]] += (
                        np.sum(r * r, axis=0) - pk.n_geos - zs * zs + 1.0
                    )
        if isnan(total):
            return -np.inf, None
        return total, grad


def log_posterior_unnormalized(
    pop: PopulationTable,
    cases: CaseTable | None,
    design: DesignMatrices,
    params: Sequence[GeoParams],
    hyper: HyperParams,
    config: PriorConfig,
    *,
    model: str = "joint",
    jacobian: bool = True,
) -> float:
    """Structured-argument view of the unconstrained sampling target.

    Equals likelihood + hierarchy prior + hyperprior, plus (when
    jacobian=True) the sum of log sigma terms from the log-scale
    reparameterization; with jacobian=True this matches PosteriorTarget
    evaluated at the packed vector exactly.
    """
    target = PosteriorTarget(pop, cases, design, config, model=model, hyper_fixed=hyper)
    theta = target.packer.pack(params, hyper)
    value = target.value(theta)
    if not jacobian and np.isfinite(value):
        sigmas = [hyper.sigma_lambda, hyper.sigma_beta]
        if target.packer.with_missingness:
            sigmas += [hyper.sigma_eta, hyper.sigma_gamma]
        value -= float(sum(np.sum(np.log(s)) for s in sigmas))
    return value


def grad_log_posterior(
    pop: PopulationTable,
    cases: CaseTable | None,
    design: DesignMatrices,
    params: Sequence[GeoParams],
    hyper: HyperParams,
    config: PriorConfig,
    *,
    model: str = "joint",
) -> np.ndarray:
    """Gradient of the unconstrained target (jacobian included) in pack order."""
    target = PosteriorTarget(pop, cases, design, config, model=model, hyper_fixed=hyper)
    theta = target.packer.pack(params, hyper)
    return target.value_and_grad(theta)[1]


class NonCenteredView:
    """Exact change of variables that samples geo blocks as standardized offsets.

    For each listed block (``"log_lambda"``, ``"eta"``, ``"beta"``,
    ``"gamma"``) the sampling coordinate is ``(value - mean) / scale`` rather
    than the value itself, where mean and scale are the block's hyper mean
    (including any area-covariate shift) and hyper scale. Dimension and names
    are unchanged, the log-density gains the Jacobian term, and `to_model`
    maps draws back to model coordinates, so the posterior over model
    coordinates is identical. Standardized coordinates decouple weakly
    informed blocks from their scales, which removes the funnel that defeats
    step-size adaptation in centered coordinates.
    """

    _HYPER = {
        "log_lambda": ("alpha_lambda", "log_sigma_lambda", "lambda"),
        "eta": ("alpha_eta", "log_sigma_eta", "eta"),
        "beta": ("alpha_beta", "log_sigma_beta", "beta"),
        "gamma": ("alpha_gamma", "log_sigma_gamma", "gamma"),
    }

    def __init__(self, target: PosteriorTarget, blocks: Sequence[str]):
        bad = [b for b in blocks if b not in self._HYPER]
        if bad:
            raise ConfigurationError(f"blocks cannot be non-centered: {bad}")
        absent = [b for b in blocks if b not in target.packer.slices]
        if absent:
            raise ConfigurationError(f"blocks absent from this model: {absent}")
        self.target = target
        self.blocks = tuple(dict.fromkeys(blocks))
        self.n_geos = target.packer.n_geos

    @property
    def dim(self) -> int:
        return self.target.dim

    def names(self) -> list[str]:
        return self.target.names()

    def _pieces(self, block: str):
        sl = self.target.packer.slices
        alpha_name, sigma_name, shift_key = self._HYPER[block]
        return sl[block], sl[alpha_name], sl[sigma_name], self.target._shifts[shift_key]

    def to_model(self, psi: np.ndarray) -> np.ndarray:
        """Map points (or arrays of points, last axis = dim) to model coordinates."""
        psi = np.asarray(psi, dtype=np.float64)
        theta = psi.copy()
        g = self.n_geos
        # Overflowing scales produce non-finite coordinates; the target then
        # reports a non-finite density and the sampler rejects the point.
        with np.errstate(over="ignore", invalid="ignore"):
            for block in self.blocks:
                b_sl, a_sl, s_sl, shift = self._pieces(block)
                n = a_sl.stop - a_sl.start
                raw = psi[..., b_sl].reshape(psi.shape[:-1] + (g, n))
                mean = psi[..., a_sl][..., None, :]
                if shift is not None:
                    mean = mean + shift
                scale = np.exp(psi[..., s_sl])[..., None, :]
                theta[..., b_sl] = (mean + scale * raw).reshape(psi.shape[:-1] + (g * n,))
        return theta

    def log_jacobian(self, psi: np.ndarray) -> np.ndarray | float:
        """log |d theta / d psi| per point; subtract from view lp to get model lp."""
        psi = np.asarray(psi, dtype=np.float64)
        out = 0.0
        for block in self.blocks:
            _, _, s_sl, _ = self._pieces(block)
            out = out + self.n_geos * psi[..., s_sl].sum(axis=-1)
        return out

    def value(self, psi: np.ndarray) -> float:
        psi = np.asarray(psi, dtype=np.float64)
        val = self.target.value(self.to_model(psi))
        return val + float(self.log_jacobian(psi)) if np.isfinite(val) else val

    def value_and_grad(self, psi: np.ndarray) -> tuple[float, np.ndarray]:
        psi = np.asarray(psi, dtype=np.float64)
        theta = self.to_model(psi)
        val, g_theta = self.target.value_and_grad(theta)
        if not np.isfinite(val):
            return -np.inf, np.zeros(self.dim)
        grad = g_theta.copy()
        g = self.n_geos
        for block in self.blocks:
            b_sl, a_sl, s_sl, _ = self._pieces(block)
            n = a_sl.stop - a_sl.start
            gb = g_theta[b_sl].reshape(g, n)
            scale = np.exp(psi[s_sl])
            offset = scale[None, :] * psi[b_sl].reshape(g, n)
            grad[b_sl] = (gb * scale[None, :]).ravel()
            grad[a_sl] += gb.sum(axis=0)
            grad[s_sl] += (gb * offset).sum(axis=0) + g
        return val + float(self.log_jacobian(psi)), grad
