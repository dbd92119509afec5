"""Simulation-study engine: data generation, comparator fits, metrics.

The generating process draws geography-level parameter vectors from the same
normal hierarchy the joint model assumes, simulates latent category-labelled
case counts from the Poisson disease model, then hides each case's category
independently with a stratum- and category-specific observation probability.
Observation levels are stated as probability ratios against the reference
(last) category, and the reference level itself is solved by bisection so the
case-weighted expected observed proportion hits the scenario target.

Comparators: the joint model on the observed table; a complete-case fit that
drops missing-category cases; and two multiple-imputation pipelines (ad-hoc
population-share allocation, and a Dirichlet-multinomial Gibbs sampler that
assumes the missing labels are missing at random). Imputed datasets are fit
with the complete-data disease model and their draws pooled into one superset.

Replicate metrics use the replicate's own realized geography parameters as
the truth for data-dependent estimands.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
from scipy.special import expit, logit

from .errors import (
    ConfigurationError,
    ConformanceError,
    DomainError,
    ImputationError,
    RuntimeFailure,
)
from .model import (
    GeoParams,
    HyperParams,
    NonCenteredView,
    ParamPacker,
    PosteriorTarget,
    PriorConfig,
)
from .rng import STREAM_STUDY, derive_rng
from .sampler import PosteriorDraws, SamplerConfig, sample_posterior
from .tables import CaseTable, DesignMatrices, PopulationTable

logger = logging.getLogger("misscount.study")

# Logit-scale observation level used when a scenario asks for no missingness.
NO_MISSINGNESS_LOGIT = 30.0

# Observation-probability ratios vs the reference category, by label, used
# when a scenario does not list explicit ratios.
DEFAULT_OBSERVATION_RATIOS = {
    "Black": 0.75 / 0.9,
    "Hispanic/Latino": 1.0,
    "Asian/Pacific Islander": 0.6 / 0.9,
    "Other": 0.6 / 0.9,
    "White": 1.0,
}

_BISECT_TOL = 1e-10

_METHOD_TAGS = {"joint": 1, "complete_case": 2, "adhoc_mi": 3, "gibbs_mi": 4}
_DATA_TAG = 0

ENV_WORKERS = "MISSCOUNT_WORKERS"


@dataclass(frozen=True)
class ScenarioSpec:
    """Generating-process constants for one simulation scenario.

    Age effect vectors have one entry per age band of the population table and
    are centered before entering the design (their common level belongs to the
    rate intercept). Scales of zero are allowed and make the corresponding
    block deterministic. A target observed proportion of exactly 1.0 disables
    missingness outright.
    """

    target_observed_proportion: float = 0.9
    n_replicates: int = 50
    seed: int = 0
    alpha_lambda_level: float = -4.0
    age_effects_risk: tuple[float, ...] = (
        -2.5, -2.0, 0.0, 0.0, 0.5, 0.5, 1.0, 1.0, 1.5,
    )
    age_effects_observation: tuple[float, ...] = (
        -0.3, -0.3, -0.2, -0.2, -0.2, -0.1, 0.1, 0.4, 0.8,
    )
    sex_effect_risk: float = 0.0
    sex_effect_observation: float = 0.0
    sigma_lambda: float = 0.5
    sigma_eta: float = 0.3
    sigma_beta: float = 0.5
    sigma_gamma: float = 0.3
    observation_ratios: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.target_observed_proportion <= 1.0):
            raise ConfigurationError("target_observed_proportion must lie in (0, 1]")
        if self.n_replicates < 1:
            raise ConfigurationError("n_replicates must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        for name in ("sigma_lambda", "sigma_eta", "sigma_beta", "sigma_gamma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.observation_ratios is not None:
            r = self.observation_ratios
            if len(r) < 1 or any(v <= 0 for v in r):
                raise ConfigurationError("observation ratios must be positive")
            if abs(r[-1] - 1.0) > 1e-12:
                raise ConfigurationError(
                    "the reference (last) category's observation ratio must be 1"
                )

    def ratios_for(self, categories: tuple[str, ...]) -> np.ndarray:
        if self.observation_ratios is not None:
            if len(self.observation_ratios) != len(categories):
                raise ConfigurationError(
                    f"observation_ratios has {len(self.observation_ratios)} entries "
                    f"for {len(categories)} categories"
                )
            return np.asarray(self.observation_ratios, dtype=float)
        try:
            out = np.asarray([DEFAULT_OBSERVATION_RATIOS[c] for c in categories])
        except KeyError as exc:
            raise ConfigurationError(
                f"no default observation ratio for category {exc.args[0]!r}; "
                "set observation_ratios explicitly"
            ) from None
        if abs(out[-1] - 1.0) > 1e-12:
            raise ConfigurationError(
                f"the reference category {categories[-1]!r} must have ratio 1; "
                "reorder the table or set observation_ratios explicitly"
            )
        return out


def _parse_strata(strata: tuple[str, ...]) -> tuple[list[str], list[str], list[int]]:
    """Split labels like F_30_39 into sexes and age bands (appearance order)."""
    sexes: list[str] = []
    bands: list[str] = []
    band_idx: list[int] = []
    sex_of: list[str] = []
    for label in strata:
        head, _, rest = label.partition("_")
        if head not in ("F", "M") or not rest:
            raise ConfigurationError(
                f"stratum label {label!r} is not SEX_AGEBAND with sex F or M"
            )
        sex_of.append(head)
        if rest not in bands:
            bands.append(rest)
        band_idx.append(bands.index(rest))
    sexes = sex_of
    return sexes, bands, band_idx


def build_default_design(pop: PopulationTable) -> DesignMatrices:
    """Sex and age-band contrasts parsed from the stratum labels.

    Column 0 codes sex as +-1/2 (M positive); the remaining columns are sum
    contrasts of the age bands against the last band, so a zero-sum vector of
    per-band effects maps one-to-one onto the coefficients.
    """
    sexes, bands, band_idx = _parse_strata(pop.strata)
    n = len(pop.strata)
    n_bands = len(bands)
    z = np.zeros((n, n_bands))
    names = ["sex_M"] + [f"age_{b}" for b in bands[:-1]]
    for i in range(n):
        z[i, 0] = 0.5 if sexes[i] == "M" else -0.5
        b = band_idx[i]
        if b < n_bands - 1:
            z[i, 1 + b] = 1.0
        else:
            z[i, 1:] = -1.0
    return DesignMatrices(Z=z, covariate_names=tuple(names))


def _effect_coefficients(
    age_effects: tuple[float, ...], sex_effect: float, n_bands: int, what: str
) -> np.ndarray:
    if len(age_effects) != n_bands:
        raise ConfigurationError(
            f"{what} has {len(age_effects)} entries for {n_bands} age bands"
        )
    a = np.asarray(age_effects, dtype=float)
    centered = a - a.mean()
    return np.concatenate(([sex_effect], centered[:-1]))


def scenario_coefficients(
    scenario: ScenarioSpec, pop: PopulationTable
) -> tuple[np.ndarray, np.ndarray]:
    """Hyper-mean coefficient vectors (risk, observation) for the default design."""
    _, bands, _ = _parse_strata(pop.strata)
    risk = _effect_coefficients(
        scenario.age_effects_risk, scenario.sex_effect_risk, len(bands), "age_effects_risk"
    )
    obs = _effect_coefficients(
        scenario.age_effects_observation, scenario.sex_effect_observation,
        len(bands), "age_effects_observation",
    )
    return risk, obs


def solve_reference_observation(
    pop: PopulationTable, scenario: ScenarioSpec, design: DesignMatrices | None = None
) -> np.ndarray:
    """Category levels on the logit observation scale hitting the target.

    Candidate levels are logit(ratio_j * p_ref); the weighted expected
    observed proportion (weights: exposure times the hyper-mean relative
    risk) is monotone in p_ref, so bisection converges. Raises when the
    target is unreachable under the given ratios.
    """
    if scenario.target_observed_proportion == 1.0:
        return np.full(pop.n_categories, NO_MISSINGNESS_LOGIT)
    design = design if design is not None else build_default_design(pop)
    risk_coef, obs_coef = scenario_coefficients(scenario, pop)
    ratios = scenario.ratios_for(pop.categories)
    e = pop.counts.astype(float)
    w = e * np.exp(design.Z @ risk_coef)[:, None, None]
    total_w = w.sum()
    if total_w <= 0:
        raise DomainError("population table has no exposure")
    stratum_shift = (design.Z @ obs_coef)[:, None, None]

    def observed_fraction(p_ref: float) -> float:
        levels = logit(ratios * p_ref)
        p = expit(levels[None, None, :] + stratum_shift)
        return float((w * p).sum() / total_w)

    hi_ref = float(1.0 / ratios.max())
    lo, hi = 1e-12, hi_ref - 1e-12
    target = scenario.target_observed_proportion
    if not (observed_fraction(lo) <= target <= observed_fraction(hi)):
        raise ConfigurationError(
            f"target observed proportion {target} is unreachable with "
            f"observation ratios {tuple(np.round(ratios, 6))}"
        )
    while hi - lo > _BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if observed_fraction(mid) < target:
            lo = mid
        else:
            hi = mid
    p_ref = 0.5 * (lo + hi)
    return logit(ratios * p_ref)


def scenario_hyper(
    scenario: ScenarioSpec, pop: PopulationTable, design: DesignMatrices | None = None
) -> HyperParams:
    """The generating hyperparameters as a HyperParams value (scales must be > 0)."""
    for name in ("sigma_lambda", "sigma_eta", "sigma_beta", "sigma_gamma"):
        if getattr(scenario, name) <= 0:
            raise ConfigurationError(
                f"{name} must be positive to express the scenario as HyperParams"
            )
    j = pop.n_categories
    risk_coef, obs_coef = scenario_coefficients(scenario, pop)
    k = risk_coef.shape[0]
    return HyperParams(
        alpha_lambda=np.full(j, scenario.alpha_lambda_level),
        alpha_eta=solve_reference_observation(pop, scenario, design),
        alpha_beta=risk_coef,
        alpha_gamma=obs_coef,
        sigma_lambda=np.full(j, scenario.sigma_lambda),
        sigma_eta=np.full(j, scenario.sigma_eta),
        sigma_beta=np.full(k, scenario.sigma_beta),
        sigma_gamma=np.full(k, scenario.sigma_gamma),
    )


def generate_dataset(
    pop: PopulationTable,
    scenario: ScenarioSpec,
    rng: np.random.Generator,
    design: DesignMatrices | None = None,
) -> tuple[CaseTable, list[GeoParams], np.ndarray]:
    """Simulate one replicate.

    Returns the observed case table (recorded categories plus missing-total
    column), the realized per-geography parameters, and the latent complete
    count tensor. Draw order is fixed (rates, observation levels, risk
    coefficients, observation coefficients, latent counts, recorded counts),
    so equal rng states give equal datasets.
    """
    design = design if design is not None else build_default_design(pop)
    g, j = pop.n_geos, pop.n_categories
    risk_coef, obs_coef = scenario_coefficients(scenario, pop)
    k = risk_coef.shape[0]
    if design.Z.shape[1] != k:
        raise ConfigurationError(
            f"design has {design.Z.shape[1]} covariates, scenario implies {k}"
        )
    alpha_eta = solve_reference_observation(pop, scenario, design)

    log_lambda = scenario.alpha_lambda_level + scenario.sigma_lambda * rng.standard_normal((g, j))
    eta = alpha_eta[None, :] + scenario.sigma_eta * rng.standard_normal((g, j))
    beta = risk_coef[None, :] + scenario.sigma_beta * rng.standard_normal((g, k))
    gamma = obs_coef[None, :] + scenario.sigma_gamma * rng.standard_normal((g, k))

    e = pop.counts.astype(float)
    risk = np.exp(design.Z @ beta.T)
    mu = e * np.exp(log_lambda)[None, :, :] * risk[:, :, None]
    y = rng.poisson(mu)
    p = expit(eta[None, :, :] + (design.Z @ gamma.T)[:, :, None])
    x = rng.binomial(y, p)
    m = (y - x).sum(axis=2)

    cases = CaseTable(
        observed=x.astype(np.int64),
        missing=m.astype(np.int64),
        strata=pop.strata,
        geos=pop.geos,
        categories=pop.categories,
    )
    params = [
        GeoParams(log_lambda=log_lambda[gg], eta=eta[gg], beta=beta[gg], gamma=gamma[gg])
        for gg in range(g)
    ]
    return cases, params, y


@dataclass(frozen=True)
class EstimandSet:
    """Population-level summaries of one parameter configuration.

    incidence[j]: exposure-weighted mean case rate of category j.
    standardized_incidence[j]: the rate category j would have under the
      population-average stratum rates; sir[j] is their ratio.
    relative_risk[j]: incidence[j] / incidence[reference].
    rate_ratio[j]: hyper-level rate of category j relative to the reference.
    observation_probability[j]: hyper-level observation probability (None for
      models without a missingness block).
    stratum_rate[i]: population-average case rate of stratum i.
    """

    categories: tuple[str, ...]
    strata: tuple[str, ...]
    incidence: np.ndarray
    relative_risk: np.ndarray
    standardized_incidence: np.ndarray
    sir: np.ndarray
    rate_ratio: np.ndarray
    observation_probability: np.ndarray | None
    stratum_rate: np.ndarray

    def as_dict(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for name in (
            "incidence", "relative_risk", "standardized_incidence", "sir", "rate_ratio",
        ):
            vec = getattr(self, name)
            for c, v in zip(self.categories, vec):
                out[f"{name}[{c}]"] = float(v)
        if self.observation_probability is not None:
            for c, v in zip(self.categories, self.observation_probability):
                out[f"observation_probability[{c}]"] = float(v)
        return out


def compute_estimands(
    params: list[GeoParams],
    hyper: HyperParams,
    pop: PopulationTable,
    design: DesignMatrices,
) -> EstimandSet:
    """Exposure-weighted incidence summaries for one parameter configuration."""
    e = pop.counts.astype(float)
    i_n, g_n, j_n = e.shape
    if len(params) != g_n:
        raise ConformanceError(f"got {len(params)} geography blocks for {g_n} geographies")
    rate = np.empty((i_n, g_n, j_n))
    for g, par in enumerate(params):
        rate[:, g, :] = np.exp(
            par.log_lambda[None, :] + (design.Z @ par.beta)[:, None]
        )

    denom_j = e.sum(axis=(0, 1))
    denom_i = e.sum(axis=(1, 2))
    if np.any(denom_j == 0) or np.any(denom_i == 0):
        raise DomainError("a category or stratum has zero total exposure")
    incidence = (e * rate).sum(axis=(0, 1)) / denom_j
    psi = (e * rate).sum(axis=(1, 2)) / denom_i
    standardized = (e * psi[:, None, None]).sum(axis=(0, 1)) / denom_j
    sir = incidence / standardized
    relative_risk = incidence / incidence[-1]
    rate_ratio = np.exp(hyper.alpha_lambda - hyper.alpha_lambda[-1])
    obs_prob = expit(hyper.alpha_eta) if hyper.alpha_eta is not None else None
    return EstimandSet(
        categories=pop.categories,
        strata=pop.strata,
        incidence=incidence,
        relative_risk=relative_risk,
        standardized_incidence=standardized,
        sir=sir,
        rate_ratio=rate_ratio,
        observation_probability=obs_prob,
        stratum_rate=psi,
    )


def estimand_draws(
    draws: PosteriorDraws, pop: PopulationTable, design: DesignMatrices
) -> dict[str, np.ndarray]:
    """Per-draw estimand values, keyed like EstimandSet.as_dict()."""
    with_missingness = any(n.startswith("eta_") for n in draws.names)
    packer = ParamPacker(
        n_geos=pop.n_geos,
        n_categories=pop.n_categories,
        n_covariates=design.Z.shape[1],
        with_missingness=with_missingness,
    )
    if packer.dim != len(draws.names):
        raise ConformanceError(
            f"draws have {len(draws.names)} parameters, expected {packer.dim}"
        )
    flat = draws.flat()
    s = flat.shape[0]
    g, j = pop.n_geos, pop.n_categories
    k = design.Z.shape[1]
    sl = packer.slices
    log_lambda = flat[:, sl["log_lambda"]].reshape(s, g, j)
    beta = flat[:, sl["beta"]].reshape(s, g, k)
    alpha_lambda = flat[:, sl["alpha_lambda"]]

    e = pop.counts.astype(float)
    denom_j = e.sum(axis=(0, 1))
    denom_i = e.sum(axis=(1, 2))
    if np.any(denom_j == 0) or np.any(denom_i == 0):
        raise DomainError("a category or stratum has zero total exposure")
    # rate[s,i,g,j] = exp(log_lambda[s,g,j] + (Z beta[s,g])[i])
    shift = np.einsum("ik,sgk->sig", design.Z, beta)
    rate = np.exp(log_lambda[:, None, :, :] + shift[:, :, :, None])
    weighted = e[None] * rate
    incidence = weighted.sum(axis=(1, 2)) / denom_j
    psi = weighted.sum(axis=(2, 3)) / denom_i
    standardized = np.einsum("si,ij->sj", psi, e.sum(axis=1)) / denom_j
    sir = incidence / standardized
    relative_risk = incidence / incidence[:, -1][:, None]
    rate_ratio = np.exp(alpha_lambda - alpha_lambda[:, -1][:, None])

    out: dict[str, np.ndarray] = {}
    for name, arr in (
        ("incidence", incidence),
        ("relative_risk", relative_risk),
        ("standardized_incidence", standardized),
        ("sir", sir),
        ("rate_ratio", rate_ratio),
    ):
        for idx, c in enumerate(pop.categories):
            out[f"{name}[{c}]"] = arr[:, idx]
    if with_missingness:
        alpha_eta = flat[:, sl["alpha_eta"]]
        probs = expit(alpha_eta)
        for idx, c in enumerate(pop.categories):
            out[f"observation_probability[{c}]"] = probs[:, idx]
    return out


# Hierarchical blocks sampled as standardized offsets. The log-rate block
# stays centered: the counts inform it strongly, so offsets only add depth.
_JOINT_OFFSET_BLOCKS = ("eta", "beta", "gamma")
_COMPLETE_CASE_OFFSET_BLOCKS = ("beta",)


def _sample_offset_coordinates(
    target: PosteriorTarget, config: SamplerConfig, blocks: tuple[str, ...]
) -> PosteriorDraws:
    """Sample in standardized-offset coordinates, return model-coordinate draws.

    Offsets remove the funnel between a weakly informed geo block and its
    scale. Draws and the lp statistic are mapped back, so callers never see
    the sampling coordinates.
    """
    view = NonCenteredView(target, blocks=blocks)
    raw = sample_posterior(view, config)
    stats = dict(raw.stats)
    stats["lp"] = raw.stats["lp"] - view.log_jacobian(raw.draws)
    return PosteriorDraws(
        draws=view.to_model(raw.draws),
        names=raw.names,
        divergent=raw.divergent,
        stats=stats,
        config=raw.config,
    )


def fit_joint(
    pop: PopulationTable,
    cases: CaseTable,
    design: DesignMatrices,
    config: SamplerConfig,
    priors: PriorConfig | None = None,
) -> PosteriorDraws:
    """Sample the joint disease-and-missingness model."""
    priors = priors if priors is not None else PriorConfig.simulation()
    target = PosteriorTarget(pop, cases, design, priors, model="joint")
    return _sample_offset_coordinates(target, config, _JOINT_OFFSET_BLOCKS)


def fit_complete_case(
    pop: PopulationTable,
    cases: CaseTable,
    design: DesignMatrices,
    config: SamplerConfig,
    priors: PriorConfig | None = None,
) -> PosteriorDraws:
    """Sample the disease model on recorded categories only (missing totals ignored)."""
    priors = priors if priors is not None else PriorConfig.simulation()
    target = PosteriorTarget(pop, cases, design, priors, model="complete_case")
    return _sample_offset_coordinates(target, config, _COMPLETE_CASE_OFFSET_BLOCKS)


def impute_adhoc(
    pop: PopulationTable, cases: CaseTable, rng: np.random.Generator
) -> CaseTable:
    """Allocate each cell's missing cases by one multinomial draw on population shares."""
    cases.conforms(pop)
    e = pop.counts.astype(float)
    totals = e.sum(axis=2)
    bad = (cases.missing > 0) & (totals == 0)
    if np.any(bad):
        i, g = np.argwhere(bad)[0]
        raise ImputationError(
            f"cell ({cases.strata[i]}, {cases.geos[g]}) has missing cases "
            "but zero population"
        )
    observed = cases.observed.copy()
    i_n, g_n = cases.missing.shape
    for i in range(i_n):
        for g in range(g_n):
            m = int(cases.missing[i, g])
            if m == 0:
                continue
            shares = e[i, g] / totals[i, g]
            observed[i, g] += rng.multinomial(m, shares)
    return CaseTable(
        observed=observed,
        missing=np.zeros_like(cases.missing),
        strata=cases.strata,
        geos=cases.geos,
        categories=cases.categories,
    )


def impute_gibbs(
    cases: CaseTable,
    n_burn: int,
    n_keep: int,
    thin: int,
    rng: np.random.Generator,
) -> list[CaseTable]:
    """Dirichlet-multinomial Gibbs completion assuming missing-at-random labels.

    Each cell alternates allocation ~ Multinomial(missing, proportions) with
    proportions ~ Dirichlet(1 + observed + allocation); every thin-th
    post-burn-in allocation becomes one completed dataset, floor(n_keep/thin)
    in total. Cells are independent, so each runs its chain to completion in
    table order.
    """
    if n_burn < 0 or n_keep < 1 or thin < 1:
        raise ConfigurationError("need n_burn >= 0, n_keep >= 1, thin >= 1")
    n_out = n_keep // thin
    if n_out < 1:
        raise ConfigurationError("thin exceeds n_keep; no datasets would be produced")
    i_n, g_n, j_n = cases.observed.shape
    kept = np.zeros((n_out, i_n, g_n, j_n), dtype=np.int64)
    ones = np.ones(j_n)
    for i in range(i_n):
        for g in range(g_n):
            m = int(cases.missing[i, g])
            if m == 0:
                continue
            y = cases.observed[i, g]
            theta = rng.dirichlet(ones + y)
            t = 0
            for s in range(n_burn + n_keep):
                alloc = rng.multinomial(m, theta)
                theta = rng.dirichlet(ones + y + alloc)
                if s >= n_burn and (s - n_burn + 1) % thin == 0 and t < n_out:
                    kept[t, i, g] = alloc
                    t += 1
    out = []
    for t in range(n_out):
        out.append(
            CaseTable(
                observed=cases.observed + kept[t],
                missing=np.zeros_like(cases.missing),
                strata=cases.strata,
                geos=cases.geos,
                categories=cases.categories,
            )
        )
    return out


def pool_mi(fits: list[PosteriorDraws]) -> PosteriorDraws:
    """Concatenate per-imputation posteriors into one superset of draws."""
    if not fits:
        raise ConfigurationError("pool_mi needs at least one fit")
    names = fits[0].names
    for f in fits[1:]:
        if f.names != names:
            raise ConformanceError("fits have mismatched parameter indices")
    stats: dict[str, np.ndarray] = {}
    for key in fits[0].stats:
        stats[key] = np.concatenate([f.stats[key] for f in fits], axis=0)
    return PosteriorDraws(
        draws=np.concatenate([f.draws for f in fits], axis=0),
        names=names,
        divergent=np.concatenate([f.divergent for f in fits], axis=0),
        stats=stats,
        config=fits[0].config,
    )


@dataclass(frozen=True)
class MetricsCell:
    """Replicate-averaged performance of one method on one estimand."""

    mean_bias: float
    se_bias: float
    mean_mse: float
    coverage_50: float
    coverage_80: float
    mean_length_50: float
    mean_length_80: float
    n_replicates: int

    def __post_init__(self) -> None:
        for cov in (self.coverage_50, self.coverage_80):
            if not (0.0 <= cov <= 1.0):
                raise DomainError("coverage must lie in [0, 1]")


@dataclass(frozen=True)
class MetricsTable:
    """Per (method, estimand) metrics plus the raw per-replicate records."""

    methods: tuple[str, ...]
    estimands: tuple[str, ...]
    cells: dict[tuple[str, str], MetricsCell]
    n_failed: dict[str, int]
    replicate_records: dict[tuple[str, str], dict[str, np.ndarray]] = field(repr=False)

    def cell(self, method: str, estimand: str) -> MetricsCell:
        return self.cells[(method, estimand)]

    def to_rows(self) -> list[dict]:
        rows = []
        for (method, estimand), c in sorted(self.cells.items()):
            rows.append(
                {
                    "method": method,
                    "estimand": estimand,
                    "mean_bias": c.mean_bias,
                    "se_bias": c.se_bias,
                    "mean_mse": c.mean_mse,
                    "coverage_50": c.coverage_50,
                    "coverage_80": c.coverage_80,
                    "mean_length_50": c.mean_length_50,
                    "mean_length_80": c.mean_length_80,
                    "n_replicates": c.n_replicates,
                    "n_failed": self.n_failed.get(method, 0),
                }
            )
        return rows


def _method_seed(scenario_seed: int, rep: int, tag: int) -> int:
    return int(derive_rng(scenario_seed, STREAM_STUDY, rep, tag).integers(2**63))


def _record_fit(
    records: dict, method: str, draws_obj: PosteriorDraws, truth: dict[str, float],
    pop: PopulationTable, design: DesignMatrices,
) -> None:
    est = estimand_draws(draws_obj, pop, design)
    for name, arr in est.items():
        if name not in truth:
            continue
        t = truth[name]
        q10, q25, q75, q90 = np.quantile(arr, (0.10, 0.25, 0.75, 0.90))
        rec = records.setdefault((method, name), {
            "bias": [], "post_var": [], "cov50": [], "cov80": [], "len50": [], "len80": [],
        })
        rec["bias"].append(float(arr.mean()) - t)
        rec["post_var"].append(float(arr.var(ddof=1)))
        rec["cov50"].append(float(q25 <= t <= q75))
        rec["cov80"].append(float(q10 <= t <= q90))
        rec["len50"].append(float(q75 - q25))
        rec["len80"].append(float(q90 - q10))


def _run_replicate(
    rep: int,
    scenario: ScenarioSpec,
    methods: tuple[str, ...],
    pop: PopulationTable,
    design: DesignMatrices,
    fit_config: SamplerConfig,
    mi_fit_config: SamplerConfig,
    n_imputations: int,
    gibbs_burn: int,
    gibbs_thin: int,
    priors: PriorConfig | None,
) -> tuple[dict, dict[str, int]]:
    data_rng = derive_rng(scenario.seed, STREAM_STUDY, rep, _DATA_TAG)
    cases, true_params, _ = generate_dataset(pop, scenario, data_rng, design)
    truth_hyper = scenario_hyper(scenario, pop, design)
    truth = compute_estimands(true_params, truth_hyper, pop, design).as_dict()

    records: dict = {}
    failed: dict[str, int] = {}
    for method in methods:
        seed = _method_seed(scenario.seed, rep, _METHOD_TAGS[method])
        try:
            if method == "joint":
                fit = fit_joint(pop, cases, design, replace(fit_config, seed=seed), priors)
            elif method == "complete_case":
                fit = fit_complete_case(
                    pop, cases, design, replace(fit_config, seed=seed), priors
                )
            elif method in ("adhoc_mi", "gibbs_mi"):
                imp_rng = derive_rng(scenario.seed, STREAM_STUDY, rep,
                                     _METHOD_TAGS[method], 1)
                if method == "adhoc_mi":
                    completed = [
                        impute_adhoc(pop, cases, imp_rng) for _ in range(n_imputations)
                    ]
                else:
                    completed = impute_gibbs(
                        cases, gibbs_burn, n_imputations * gibbs_thin, gibbs_thin, imp_rng
                    )
                seed_rng = derive_rng(scenario.seed, STREAM_STUDY, rep,
                                      _METHOD_TAGS[method], 2)
                fits = []
                for table in completed:
                    cfg = replace(mi_fit_config, seed=int(seed_rng.integers(2**63)))
                    fits.append(fit_complete_case(pop, table, design, cfg, priors))
                fit = pool_mi(fits)
            else:
                raise ConfigurationError(f"unknown method {method!r}")
        except RuntimeFailure as exc:
            logger.warning("replicate %d method %s failed: %s", rep, method, exc)
            failed[method] = failed.get(method, 0) + 1
            continue
        _record_fit(records, method, fit, truth, pop, design)
    logger.info("replicate %d done (%s)", rep, ", ".join(methods))
    return records, failed


def evaluate_replicates(
    scenario: ScenarioSpec,
    methods: tuple[str, ...],
    pop: PopulationTable,
    design: DesignMatrices | None = None,
    *,
    fit_config: SamplerConfig | None = None,
    mi_fit_config: SamplerConfig | None = None,
    n_imputations: int = 20,
    gibbs_burn: int = 500,
    gibbs_thin: int = 25,
    priors: PriorConfig | None = None,
    workers: int | None = None,
) -> MetricsTable:
    """Run the scenario's replicates for each method and tabulate metrics.

    Per replicate and estimand: bias is posterior mean minus the replicate's
    realized truth, MSE is bias squared plus posterior variance, and coverage
    flags whether the central 50%/80% interval contains the truth. Failed
    fits are counted and excluded. Parallelism across replicates comes from
    `workers` (default: the MISSCOUNT_WORKERS environment variable, else 1);
    results are identical for any worker count.
    """
    if scenario.n_replicates < 2:
        raise ConfigurationError("need at least 2 replicates for SE estimates")
    if not methods:
        raise ConfigurationError("no methods requested")
    for m in methods:
        if m not in _METHOD_TAGS:
            raise ConfigurationError(f"unknown method {m!r}")
    design = design if design is not None else build_default_design(pop)
    fit_config = fit_config if fit_config is not None else SamplerConfig()
    mi_fit_config = mi_fit_config if mi_fit_config is not None else replace(
        fit_config, chains=2
    )
    if workers is None:
        workers = int(os.environ.get(ENV_WORKERS, "1"))

    run = partial(
        _run_replicate,
        scenario=scenario,
        methods=tuple(methods),
        pop=pop,
        design=design,
        fit_config=fit_config,
        mi_fit_config=mi_fit_config,
        n_imputations=n_imputations,
        gibbs_burn=gibbs_burn,
        gibbs_thin=gibbs_thin,
        priors=priors,
    )
    reps = range(scenario.n_replicates)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, reps))
    else:
        results = [run(r) for r in reps]

    merged: dict = {}
    n_failed: dict[str, int] = {m: 0 for m in methods}
    for records, failed in results:
        for key, rec in records.items():
            tgt = merged.setdefault(key, {k: [] for k in rec})
            for k, vals in rec.items():
                tgt[k].extend(vals)
        for m, c in failed.items():
            n_failed[m] += c

    cells: dict[tuple[str, str], MetricsCell] = {}
    replicate_records: dict[tuple[str, str], dict[str, np.ndarray]] = {}
    estimands: list[str] = []
    for key in sorted(merged):
        rec = {k: np.asarray(v) for k, v in merged[key].items()}
        replicate_records[key] = rec
        bias = rec["bias"]
        n = bias.shape[0]
        mse = bias**2 + rec["post_var"]
        cells[key] = MetricsCell(
            mean_bias=float(bias.mean()),
            se_bias=float(bias.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan"),
            mean_mse=float(mse.mean()),
            coverage_50=float(rec["cov50"].mean()),
            coverage_80=float(rec["cov80"].mean()),
            mean_length_50=float(rec["len50"].mean()),
            mean_length_80=float(rec["len80"].mean()),
            n_replicates=n,
        )
        if key[1] not in estimands:
            estimands.append(key[1])
    return MetricsTable(
        methods=tuple(methods),
        estimands=tuple(estimands),
        cells=cells,
        n_failed=n_failed,
        replicate_records=replicate_records,
    )
