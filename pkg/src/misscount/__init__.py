"""Joint Bayesian modeling of disease counts with category-dependent missingness.

The package fits a hierarchical Poisson disease model jointly with a model of
which cases get their category recorded, so that category-dependent
(not-missing-at-random) censoring does not bias incidence estimates. It also
ships the closed-form moment estimators and identifiability checks for the
single-geography model, exact enumeration oracles for the marginalized
likelihoods, an HMC sampler with convergence diagnostics, comparator methods
(complete-case, two multiple-imputation pipelines), and a simulation-study
harness with a packaged population table.
"""

from .diagnostics import Diagnostics, ess_bulk, ess_tail, split_rhat, summarize
from .errors import (
    ConfigurationError,
    ConformanceError,
    DomainError,
    IdentifiabilityError,
    ImputationError,
    InitializationError,
    MisscountError,
    ParseError,
    RuntimeFailure,
    SamplingFailure,
    ValidationError,
)
from .estimators import (
    ApproxPosterior,
    IdentifiabilityReport,
    SimpleEstimates,
    approx_posterior_asymptote,
    approx_posterior_lambda1,
    beta_shift_statistic,
    check_global_id,
    check_local_id,
    estimate_lambda,
    estimate_u,
    estimate_v,
    fisher_info_simple,
)
from .io import (
    load_cases_csv,
    load_design_csv,
    load_draws_npz,
    load_population_csv,
    packaged_population,
    save_cases_csv,
    save_draws_csv,
    save_draws_npz,
    save_population_csv,
)
from .model import (
    GeoParams,
    HyperParams,
    NonCenteredView,
    ParamPacker,
    PosteriorTarget,
    PriorConfig,
    grad_log_posterior,
    log_lik_full,
    log_lik_geo,
    log_lik_simple,
    log_posterior_unnormalized,
    log_prior_hier,
    log_hyperprior,
)
from .rng import derive_rng
from .sampler import PosteriorDraws, SamplerConfig, sample_posterior
from .study import (
    EstimandSet,
    MetricsCell,
    MetricsTable,
    ScenarioSpec,
    build_default_design,
    compute_estimands,
    estimand_draws,
    evaluate_replicates,
    fit_complete_case,
    fit_joint,
    generate_dataset,
    impute_adhoc,
    impute_gibbs,
    pool_mi,
    scenario_hyper,
    solve_reference_observation,
)
from .tables import CaseTable, DesignMatrices, PopulationTable

__version__ = "0.1.0"

__all__ = [
    "ApproxPosterior",
    "CaseTable",
    "ConfigurationError",
    "ConformanceError",
    "Diagnostics",
    "DesignMatrices",
    "DomainError",
    "EstimandSet",
    "GeoParams",
    "HyperParams",
    "IdentifiabilityError",
    "IdentifiabilityReport",
    "ImputationError",
    "InitializationError",
    "MetricsCell",
    "MetricsTable",
    "MisscountError",
    "NonCenteredView",
    "ParamPacker",
    "ParseError",
    "PopulationTable",
    "PosteriorDraws",
    "PosteriorTarget",
    "PriorConfig",
    "RuntimeFailure",
    "SamplingFailure",
    "SamplerConfig",
    "ScenarioSpec",
    "SimpleEstimates",
    "ValidationError",
    "approx_posterior_asymptote",
    "approx_posterior_lambda1",
    "beta_shift_statistic",
    "build_default_design",
    "check_global_id",
    "check_local_id",
    "compute_estimands",
    "derive_rng",
    "ess_bulk",
    "ess_tail",
    "estimand_draws",
    "estimate_lambda",
    "estimate_u",
    "estimate_v",
    "evaluate_replicates",
    "fisher_info_simple",
    "fit_complete_case",
    "fit_joint",
    "generate_dataset",
    "grad_log_posterior",
    "impute_adhoc",
    "impute_gibbs",
    "load_cases_csv",
    "load_design_csv",
    "load_draws_npz",
    "load_population_csv",
    "log_hyperprior",
    "log_lik_full",
    "log_lik_geo",
    "log_lik_simple",
    "log_posterior_unnormalized",
    "log_prior_hier",
    "packaged_population",
    "pool_mi",
    "sample_posterior",
    "save_cases_csv",
    "save_draws_csv",
    "save_draws_npz",
    "save_population_csv",
    "scenario_hyper",
    "solve_reference_observation",
    "split_rhat",
    "summarize",
    "__version__",
]
