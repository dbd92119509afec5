"""Simulation-study engine: generation, estimands, imputation, metrics.

Monte Carlo checks run at fixed seeds with 3-standard-error bands around
analytic targets (pooled statistics where many cells are compared at once).
The Gibbs imputer is checked against direct enumeration of the collapsed
allocation posterior on a tiny instance.
"""

from __future__ import annotations

from math import lgamma

import numpy as np
import pytest
from scipy.special import expit

from misscount.errors import (
    ConfigurationError,
    ConformanceError,
    DomainError,
    ImputationError,
)
from misscount.io import packaged_population
from misscount.model import GeoParams, HyperParams, ParamPacker
from misscount.rng import STREAM_STUDY, derive_rng
from misscount.sampler import PosteriorDraws, SamplerConfig
from misscount.study import (
    DEFAULT_OBSERVATION_RATIOS,
    NO_MISSINGNESS_LOGIT,
    ScenarioSpec,
    build_default_design,
    compute_estimands,
    estimand_draws,
    evaluate_replicates,
    generate_dataset,
    impute_adhoc,
    impute_gibbs,
    pool_mi,
    scenario_coefficients,
    scenario_hyper,
    solve_reference_observation,
)
from misscount.tables import CaseTable, DesignMatrices, PopulationTable

from conftest import make_cases, make_pop


def small_pop() -> PopulationTable:
    counts = np.array(
        [
            [[4000, 1000], [3000, 800]],
            [[3500, 900], [2800, 700]],
            [[5000, 1500], [4200, 1300]],
            [[4600, 1400], [3900, 1100]],
        ],
        dtype=np.int64,
    )
    return PopulationTable(
        strata=("F_00_39", "M_00_39", "F_40_99", "M_40_99"),
        geos=("gA", "gB"),
        categories=("c0", "c1"),
        counts=counts,
    )


def two_band_scenario(**kwargs) -> ScenarioSpec:
    base = dict(
        target_observed_proportion=0.8,
        age_effects_risk=(-0.5, 0.5),
        age_effects_observation=(-0.3, 0.3),
        observation_ratios=(0.8, 1.0),
        seed=1,
    )
    base.update(kwargs)
    return ScenarioSpec(**base)


class TestScenarioSpec:
    def test_defaults_are_coherent(self):
        s = ScenarioSpec()
        assert s.target_observed_proportion == 0.9
        assert len(s.age_effects_risk) == len(s.age_effects_observation) == 9

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"target_observed_proportion": 0.0},
            {"target_observed_proportion": 1.2},
            {"n_replicates": 0},
            {"seed": -1},
            {"sigma_eta": -0.1},
            {"observation_ratios": (0.5, -1.0, 1.0)},
            {"observation_ratios": (0.5, 0.9)},
        ],
    )
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            ScenarioSpec(**kwargs)

    def test_ratios_for_known_labels(self):
        s = ScenarioSpec()
        cats = ("Black", "Hispanic/Latino", "Other", "White")
        ratios = s.ratios_for(cats)
        assert ratios == pytest.approx(
            [DEFAULT_OBSERVATION_RATIOS[c] for c in cats]
        )
        assert ratios[-1] == 1.0

    def test_ratios_for_unknown_label_needs_explicit_ratios(self):
        with pytest.raises(ConfigurationError):
            ScenarioSpec().ratios_for(("c0", "c1"))

    def test_ratios_for_length_mismatch(self):
        s = ScenarioSpec(observation_ratios=(0.5, 1.0))
        with pytest.raises(ConfigurationError):
            s.ratios_for(("a", "b", "c"))


class TestDefaultDesign:
    def test_sex_and_age_contrasts(self):
        pop = small_pop()
        design = build_default_design(pop)
        assert design.covariate_names == ("sex_M", "age_00_39")
        expected = np.array(
            [[-0.5, 1.0], [0.5, 1.0], [-0.5, -1.0], [0.5, -1.0]]
        )
        np.testing.assert_array_equal(design.Z, expected)

    def test_unparseable_stratum_label_rejected(self):
        pop = PopulationTable(
            strata=("X_10",),
            geos=("g",),
            categories=("c",),
            counts=np.ones((1, 1, 1), dtype=np.int64),
        )
        with pytest.raises(ConfigurationError):
            build_default_design(pop)

    def test_scenario_coefficients_center_age_effects(self):
        pop = small_pop()
        s = two_band_scenario(
            age_effects_risk=(1.0, 3.0), sex_effect_risk=0.25
        )
        risk, obs = scenario_coefficients(s, pop)
        # centered (1,3) -> (-1,+1); only the leading bands are kept
        assert risk == pytest.approx([0.25, -1.0])
        assert obs == pytest.approx([0.0, -0.3])

    def test_wrong_age_effect_length_rejected(self):
        with pytest.raises(ConfigurationError):
            scenario_coefficients(
                two_band_scenario(age_effects_risk=(0.0,) * 3), small_pop()
            )


class TestReferenceSolver:
    def test_solved_level_hits_target(self):
        pop = small_pop()
        s = two_band_scenario()
        design = build_default_design(pop)
        alpha_eta = solve_reference_observation(pop, s, design)
        risk, obs = scenario_coefficients(s, pop)
        w = pop.counts * np.exp(design.Z @ risk)[:, None, None]
        p = expit(alpha_eta[None, None, :] + (design.Z @ obs)[:, None, None])
        achieved = float((w * p).sum() / w.sum())
        assert abs(achieved - 0.8) < 1e-8

    def test_ratio_ordering_preserved(self):
        alpha_eta = solve_reference_observation(small_pop(), two_band_scenario())
        assert expit(alpha_eta[0]) == pytest.approx(0.8 * expit(alpha_eta[1]), rel=1e-9)

    def test_no_missingness_uses_logit_cap(self):
        s = two_band_scenario(target_observed_proportion=1.0)
        alpha_eta = solve_reference_observation(small_pop(), s)
        np.testing.assert_array_equal(
            alpha_eta, np.full(2, NO_MISSINGNESS_LOGIT)
        )

    def test_unreachable_target_rejected(self):
        # c0 holds most exposure at ratio 0.8, capping the weighted mean
        # observed proportion well below 0.9.
        with pytest.raises(ConfigurationError):
            solve_reference_observation(
                small_pop(), two_band_scenario(target_observed_proportion=0.9)
            )

    def test_higher_target_raises_all_levels(self):
        lo = solve_reference_observation(
            small_pop(), two_band_scenario(target_observed_proportion=0.5)
        )
        hi = solve_reference_observation(
            small_pop(), two_band_scenario(target_observed_proportion=0.8)
        )
        assert np.all(hi > lo)

    def test_scenario_hyper_requires_positive_scales(self):
        with pytest.raises(ConfigurationError):
            scenario_hyper(two_band_scenario(sigma_eta=0.0), small_pop())

    def test_scenario_hyper_carries_solved_levels(self):
        pop = small_pop()
        s = two_band_scenario()
        hyper = scenario_hyper(s, pop)
        np.testing.assert_allclose(
            hyper.alpha_eta, solve_reference_observation(pop, s)
        )
        assert hyper.alpha_lambda == pytest.approx([-4.0, -4.0])


class TestGenerateDataset:
    def test_no_missingness_degenerate_limit(self):
        # Zero scales and zero effects: X = Y exactly, M = 0, and the pooled
        # case rate estimates the flat per-person rate.
        pop = small_pop()
        s = ScenarioSpec(
            target_observed_proportion=1.0,
            seed=1,
            alpha_lambda_level=np.log(0.01),
            age_effects_risk=(0.0, 0.0),
            age_effects_observation=(0.0, 0.0),
            sigma_lambda=0.0,
            sigma_eta=0.0,
            sigma_beta=0.0,
            sigma_gamma=0.0,
            observation_ratios=(1.0, 1.0),
        )
        rng = np.random.default_rng(7)
        reps = 400
        total = np.zeros(pop.counts.shape)
        for _ in range(reps):
            cases, _, latent = generate_dataset(pop, s, rng)
            assert cases.missing.sum() == 0
            np.testing.assert_array_equal(cases.observed, latent)
            total += cases.observed
        exposure = pop.counts.astype(float)
        pooled = total.sum() / (reps * exposure.sum())
        se_pooled = np.sqrt(0.01 / (reps * exposure.sum()))
        assert abs(pooled - 0.01) < 3 * se_pooled
        cell_z = (total / reps / exposure - 0.01) / np.sqrt(0.01 / (reps * exposure))
        assert np.abs(cell_z).max() < 4.0

    def test_marginal_observed_rate_matches_thinned_intensity(self):
        # With all scales zero the observed-count mean is p * lambda * e^{Z b}
        # cellwise; checked in a 3-SE band after 600 replicates.
        pop = small_pop()
        s = two_band_scenario(
            sigma_lambda=0.0, sigma_eta=0.0, sigma_beta=0.0, sigma_gamma=0.0
        )
        design = build_default_design(pop)
        risk, obs = scenario_coefficients(s, pop)
        alpha_eta = solve_reference_observation(pop, s, design)
        lam = np.exp(s.alpha_lambda_level)
        p = expit(alpha_eta[None, None, :] + (design.Z @ obs)[:, None, None])
        rate_x = p * lam * np.exp(design.Z @ risk)[:, None, None] * pop.counts
        rng = np.random.default_rng(3)
        reps = 600
        acc = np.zeros(pop.counts.shape)
        for _ in range(reps):
            cases, _, _ = generate_dataset(pop, s, rng, design)
            acc += cases.observed
        z = (acc / reps - rate_x) / np.sqrt(rate_x / reps)
        assert np.abs(z).max() < 3.0

    def test_missing_totals_are_latent_minus_observed(self):
        rng = derive_rng(0, STREAM_STUDY, 0, 0)
        cases, _, latent = generate_dataset(small_pop(), two_band_scenario(), rng)
        np.testing.assert_array_equal(
            cases.missing, (latent - cases.observed).sum(axis=2)
        )

    def test_deterministic_given_stream(self):
        a = generate_dataset(
            small_pop(), two_band_scenario(), derive_rng(9, STREAM_STUDY, 4, 0)
        )
        b = generate_dataset(
            small_pop(), two_band_scenario(), derive_rng(9, STREAM_STUDY, 4, 0)
        )
        np.testing.assert_array_equal(a[0].observed, b[0].observed)
        np.testing.assert_array_equal(a[0].missing, b[0].missing)
        np.testing.assert_array_equal(a[2], b[2])

    def test_design_covariate_mismatch_rejected(self):
        design = DesignMatrices(Z=np.zeros((4, 5)))
        with pytest.raises(ConfigurationError):
            generate_dataset(
                small_pop(), two_band_scenario(), np.random.default_rng(0), design
            )

    def test_packaged_table_realized_white_observation(self, packaged_pop):
        # At the 90% target with the default category ratios, the realized
        # observed share among reference-category cases sits near 0.971.
        s = ScenarioSpec(target_observed_proportion=0.9, seed=0)
        design = build_default_design(packaged_pop)
        rng = np.random.default_rng(2024)
        jw = packaged_pop.categories.index("White")
        fracs = []
        for _ in range(200):
            cases, _, latent = generate_dataset(packaged_pop, s, rng, design)
            fracs.append(
                cases.observed[:, :, jw].sum() / latent[:, :, jw].sum()
            )
        assert abs(float(np.mean(fracs)) - 0.971) < 0.005


def _random_params(rng, g, j, k) -> list[GeoParams]:
    return [
        GeoParams(
            log_lambda=-4.0 + 0.3 * rng.standard_normal(j),
            eta=2.0 + 0.3 * rng.standard_normal(j),
            beta=0.2 * rng.standard_normal(k),
            gamma=0.2 * rng.standard_normal(k),
        )
        for _ in range(g)
    ]


def _random_hyper(rng, j, k) -> HyperParams:
    return HyperParams(
        alpha_lambda=-4.0 + 0.2 * rng.standard_normal(j),
        alpha_eta=2.0 + 0.2 * rng.standard_normal(j),
        alpha_beta=0.2 * rng.standard_normal(k),
        alpha_gamma=0.2 * rng.standard_normal(k),
        sigma_lambda=np.full(j, 0.5),
        sigma_eta=np.full(j, 0.3),
        sigma_beta=np.full(k, 0.5),
        sigma_gamma=np.full(k, 0.3),
    )


class TestComputeEstimands:
    def test_homogeneous_rates_give_unit_sir(self):
        pop = small_pop()
        design = build_default_design(pop)
        c = 0.013
        params = [
            GeoParams(
                log_lambda=np.full(2, np.log(c)), eta=None, beta=np.zeros(2), gamma=None
            )
            for _ in range(2)
        ]
        hyper = _random_hyper(np.random.default_rng(0), 2, 2)
        out = compute_estimands(params, hyper, pop, design)
        np.testing.assert_allclose(out.incidence, c, rtol=1e-12)
        np.testing.assert_allclose(out.standardized_incidence, c, rtol=1e-12)
        np.testing.assert_allclose(out.sir, 1.0, rtol=1e-12)
        np.testing.assert_allclose(out.relative_risk, out.incidence / c, rtol=1e-12)

    def test_single_cell_hand_computation(self):
        pop = PopulationTable(
            strata=("F_a",),
            geos=("g",),
            categories=("c0", "c1"),
            counts=np.array([[[300, 100]]], dtype=np.int64),
        )
        design = DesignMatrices(Z=np.zeros((1, 1)))
        params = [
            GeoParams(
                log_lambda=np.log([0.02, 0.05]), eta=None, beta=np.zeros(1), gamma=None
            )
        ]
        hyper = HyperParams(
            alpha_lambda=np.log([0.02, 0.05]),
            alpha_eta=None,
            alpha_beta=np.zeros(1),
            alpha_gamma=None,
            sigma_lambda=np.ones(2),
            sigma_eta=None,
            sigma_beta=np.ones(1),
            sigma_gamma=None,
        )
        out = compute_estimands(params, hyper, pop, design)
        assert out.incidence == pytest.approx([0.02, 0.05])
        psi = (300 * 0.02 + 100 * 0.05) / 400
        assert out.stratum_rate[0] == pytest.approx(psi)
        np.testing.assert_allclose(out.standardized_incidence, psi)
        assert out.sir == pytest.approx([0.02 / psi, 0.05 / psi])
        assert out.rate_ratio == pytest.approx([0.4, 1.0])
        assert out.observation_probability is None

    def test_equal_rate_levels_still_separate_incidence_by_age(self):
        # Identical category rate levels: the rate-ratio estimand is exactly
        # one while incidences differ through age composition alone.
        counts = np.array(
            [[[5000, 500]], [[4000, 600]], [[500, 4000]], [[400, 3000]]],
            dtype=np.int64,
        )
        pop = PopulationTable(
            strata=("F_00_39", "M_00_39", "F_40_99", "M_40_99"),
            geos=("g",),
            categories=("young_heavy", "old_heavy"),
            counts=counts,
        )
        design = build_default_design(pop)
        params = [
            GeoParams(
                log_lambda=np.full(2, -4.0),
                eta=None,
                beta=np.array([0.0, -1.0]),
                gamma=None,
            )
        ]
        hyper = HyperParams(
            alpha_lambda=np.full(2, -4.0),
            alpha_eta=None,
            alpha_beta=np.array([0.0, -1.0]),
            alpha_gamma=None,
            sigma_lambda=np.ones(2),
            sigma_eta=None,
            sigma_beta=np.ones(2),
            sigma_gamma=None,
        )
        out = compute_estimands(params, hyper, pop, design)
        np.testing.assert_allclose(out.rate_ratio, 1.0)
        assert abs(out.incidence[0] - out.incidence[1]) > 1e-4
        assert out.incidence[0] < out.incidence[1]

    def test_weighted_incidence_identity(self):
        # Category-weighted incidence and stratum-weighted rates both equal
        # total expected cases over total population.
        pop = small_pop()
        design = build_default_design(pop)
        rng = np.random.default_rng(17)
        params = _random_params(rng, 2, 2, 2)
        out = compute_estimands(params, _random_hyper(rng, 2, 2), pop, design)
        e = pop.counts.astype(float)
        lhs = float(np.dot(e.sum(axis=(0, 1)), out.incidence))
        rhs = float(np.dot(e.sum(axis=(1, 2)), out.stratum_rate))
        assert lhs == pytest.approx(rhs, rel=1e-12)
        np.testing.assert_allclose(
            out.sir * out.standardized_incidence, out.incidence, rtol=1e-12
        )

    def test_zero_exposure_category_rejected(self):
        pop = make_pop(np.array([[[10, 0]]], dtype=np.int64))
        design = DesignMatrices(Z=np.zeros((1, 1)))
        params = [
            GeoParams(log_lambda=np.zeros(2), eta=None, beta=np.zeros(1), gamma=None)
        ]
        with pytest.raises(DomainError):
            compute_estimands(
                params, _random_hyper(np.random.default_rng(0), 2, 1), pop, design
            )

    def test_wrong_geography_count_rejected(self):
        pop = small_pop()
        design = build_default_design(pop)
        rng = np.random.default_rng(0)
        with pytest.raises(ConformanceError):
            compute_estimands(
                _random_params(rng, 3, 2, 2), _random_hyper(rng, 2, 2), pop, design
            )


class TestEstimandDraws:
    def test_matches_per_configuration_estimands(self):
        pop = small_pop()
        design = build_default_design(pop)
        packer = ParamPacker(
            n_geos=2, n_categories=2, n_covariates=2, with_missingness=True
        )
        rng = np.random.default_rng(23)
        configs = []
        rows = []
        for _ in range(3):
            params = _random_params(rng, 2, 2, 2)
            hyper = _random_hyper(rng, 2, 2)
            configs.append((params, hyper))
            rows.append(packer.pack(params, hyper))
        draws = PosteriorDraws(
            draws=np.asarray(rows)[None, :, :],
            names=tuple(packer.names()),
            divergent=np.zeros((1, 3), dtype=bool),
            stats={},
            config=SamplerConfig(),
        )
        per_draw = estimand_draws(draws, pop, design)
        for s, (params, hyper) in enumerate(configs):
            expected = compute_estimands(params, hyper, pop, design).as_dict()
            assert set(per_draw) == set(expected)
            for key, arr in per_draw.items():
                assert arr[s] == pytest.approx(expected[key], rel=1e-10)

    def test_name_count_mismatch_rejected(self):
        pop = small_pop()
        design = build_default_design(pop)
        draws = PosteriorDraws(
            draws=np.zeros((1, 2, 3)),
            names=("log_lambda_g0_c0", "eta_g0_c0", "x"),
            divergent=np.zeros((1, 2), dtype=bool),
            stats={},
            config=SamplerConfig(),
        )
        with pytest.raises(ConformanceError):
            estimand_draws(draws, pop, design)


class TestImputeAdhoc:
    def test_no_missing_is_identity(self):
        pop = make_pop(np.array([[[50, 50]]], dtype=np.int64))
        cases = make_cases(
            np.array([[[3, 4]]], dtype=np.int64), np.array([[0]], dtype=np.int64)
        )
        out = impute_adhoc(pop, cases, np.random.default_rng(0))
        np.testing.assert_array_equal(out.observed, cases.observed)
        assert out.missing.sum() == 0

    def test_degenerate_shares_send_all_to_populated_category(self):
        pop = make_pop(np.array([[[100, 0]]], dtype=np.int64))
        cases = make_cases(
            np.array([[[0, 0]]], dtype=np.int64), np.array([[5]], dtype=np.int64)
        )
        out = impute_adhoc(pop, cases, np.random.default_rng(0))
        np.testing.assert_array_equal(out.observed, [[[5, 0]]])

    def test_zero_population_with_missing_rejected(self):
        pop = make_pop(np.array([[[0, 0]]], dtype=np.int64))
        cases = make_cases(
            np.array([[[0, 0]]], dtype=np.int64), np.array([[2]], dtype=np.int64)
        )
        with pytest.raises(ImputationError):
            impute_adhoc(pop, cases, np.random.default_rng(0))

    def test_totals_preserved(self):
        pop = small_pop()
        cases, _, _ = generate_dataset(
            pop, two_band_scenario(), derive_rng(2, STREAM_STUDY, 0, 0)
        )
        out = impute_adhoc(pop, cases, np.random.default_rng(1))
        assert out.missing.sum() == 0
        assert out.observed.sum() == cases.observed.sum() + cases.missing.sum()
        assert np.all(out.observed >= cases.observed)

    def test_empirical_allocation_matches_population_shares(self):
        pop = make_pop(np.array([[[60, 30, 10]]], dtype=np.int64))
        cases = make_cases(
            np.zeros((1, 1, 3), dtype=np.int64), np.array([[1]], dtype=np.int64)
        )
        rng = np.random.default_rng(11)
        n = 100_000
        acc = np.zeros(3)
        for _ in range(n):
            acc += impute_adhoc(pop, cases, rng).observed[0, 0]
        shares = acc / n
        expected = np.array([0.6, 0.3, 0.1])
        se = np.sqrt(expected * (1 - expected) / n)
        assert np.all(np.abs(shares - expected) < 3 * se)

    def test_approaches_true_allocation_as_missingness_saturates(self):
        # With equal category rate levels the true conditional allocation of
        # a missing case is proportional to (1 - p_j) E_j; as the observed
        # share falls, (1 - p_j) flattens and the population-share rule
        # becomes exact.
        pop = small_pop()
        tvs = []
        for target in (0.6, 0.3, 0.1, 0.02):
            s = two_band_scenario(
                target_observed_proportion=target,
                age_effects_observation=(0.0, 0.0),
            )
            alpha_eta = solve_reference_observation(pop, s)
            p = expit(alpha_eta)
            e = pop.counts.astype(float)
            true_alloc = (1 - p)[None, None, :] * e
            true_alloc /= true_alloc.sum(axis=2, keepdims=True)
            adhoc = e / e.sum(axis=2, keepdims=True)
            tvs.append(0.5 * np.abs(true_alloc - adhoc).sum(axis=2).max())
        assert all(a > b for a, b in zip(tvs, tvs[1:]))
        assert tvs[-1] < 0.005


class TestImputeGibbs:
    def test_no_missing_returns_identical_completions(self):
        cases = make_cases(
            np.array([[[4, 1]]], dtype=np.int64), np.array([[0]], dtype=np.int64)
        )
        outs = impute_gibbs(
            cases, n_burn=10, n_keep=30, thin=10, rng=np.random.default_rng(0)
        )
        assert len(outs) == 3
        for t in outs:
            np.testing.assert_array_equal(t.observed, cases.observed)
            assert t.missing.sum() == 0

    def test_symmetric_cell_allocates_evenly(self):
        cases = make_cases(
            np.zeros((1, 1, 2), dtype=np.int64), np.array([[1]], dtype=np.int64)
        )
        outs = impute_gibbs(
            cases, n_burn=100, n_keep=20_000, thin=1, rng=np.random.default_rng(9)
        )
        share = float(np.mean([t.observed[0, 0, 0] for t in outs]))
        assert abs(share - 0.5) < 3 * 0.5 / np.sqrt(20_000)

    def test_stationary_distribution_matches_enumeration(self):
        # Collapsed allocation posterior: P(eps) proportional to the
        # multinomial coefficient times the Dirichlet normalizer ratio.
        y = np.array([2, 1])
        m = 3

        def log_beta(v):
            return sum(lgamma(t) for t in v) - lgamma(sum(v))

        states = [(k, m - k) for k in range(m + 1)]
        logp = [
            lgamma(m + 1)
            - lgamma(eps[0] + 1)
            - lgamma(eps[1] + 1)
            + log_beta([1 + y[0] + eps[0], 1 + y[1] + eps[1]])
            - log_beta([1 + y[0], 1 + y[1]])
            for eps in states
        ]
        exact = np.exp(logp)
        exact /= exact.sum()

        cases = make_cases(
            y.reshape(1, 1, 2).astype(np.int64), np.array([[m]], dtype=np.int64)
        )
        outs = impute_gibbs(
            cases, n_burn=200, n_keep=20_000, thin=1, rng=np.random.default_rng(5)
        )
        alloc = np.array([int(t.observed[0, 0, 0] - y[0]) for t in outs])
        empirical = np.bincount(alloc, minlength=m + 1) / alloc.size
        assert 0.5 * np.abs(empirical - exact).sum() < 0.02

    def test_dataset_count_is_keep_over_thin(self):
        cases = make_cases(
            np.array([[[1, 1]]], dtype=np.int64), np.array([[2]], dtype=np.int64)
        )
        outs = impute_gibbs(
            cases, n_burn=5, n_keep=50, thin=7, rng=np.random.default_rng(0)
        )
        assert len(outs) == 50 // 7
        for t in outs:
            assert t.observed.sum() == cases.observed.sum() + 2

    def test_invalid_chain_settings_rejected(self):
        cases = make_cases(
            np.array([[[1, 1]]], dtype=np.int64), np.array([[1]], dtype=np.int64)
        )
        with pytest.raises(ConfigurationError):
            impute_gibbs(cases, n_burn=-1, n_keep=10, thin=1, rng=np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            impute_gibbs(cases, n_burn=0, n_keep=5, thin=10, rng=np.random.default_rng(0))


def _fake_fit(values, names=("a",)) -> PosteriorDraws:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return PosteriorDraws(
        draws=arr[None, :, :],
        names=tuple(names),
        divergent=np.zeros((1, arr.shape[0]), dtype=bool),
        stats={"lp": np.zeros((1, arr.shape[0]))},
        config=SamplerConfig(),
    )


class TestPoolMi:
    def test_pooling_identical_fits_keeps_summaries(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal(50)
        pooled = pool_mi([_fake_fit(values), _fake_fit(values)])
        assert pooled.draws.shape == (2, 50, 1)
        assert float(pooled.flat().mean()) == pytest.approx(float(values.mean()))
        assert float(pooled.flat().std()) == pytest.approx(float(values.std()))

    def test_two_point_masses_average(self):
        pooled = pool_mi([_fake_fit(np.full(10, 3.0)), _fake_fit(np.full(10, 7.0))])
        assert float(pooled.flat().mean()) == pytest.approx(5.0)

    def test_pooled_variance_dominates_mean_within_variance(self):
        rng = np.random.default_rng(1)
        fits = [
            _fake_fit(center + 0.1 * rng.standard_normal(200))
            for center in (-1.0, 0.5, 1.0)
        ]
        pooled = pool_mi(fits)
        within = np.mean([f.flat().var(ddof=1) for f in fits])
        assert pooled.flat().var(ddof=1) >= within

    def test_stats_concatenate_along_chains(self):
        pooled = pool_mi([_fake_fit(np.zeros(5)), _fake_fit(np.ones(5))])
        assert pooled.stats["lp"].shape == (2, 5)
        assert pooled.divergent.shape == (2, 5)

    def test_name_mismatch_rejected(self):
        with pytest.raises(ConformanceError):
            pool_mi([_fake_fit(np.zeros(5), ("a",)), _fake_fit(np.zeros(5), ("b",))])

    def test_empty_list_rejected(self):
        with pytest.raises(ConfigurationError):
            pool_mi([])


class TestEvaluateReplicates:
    def test_complete_case_smoke(self):
        scenario = two_band_scenario(seed=4, n_replicates=2)
        table = evaluate_replicates(
            scenario,
            ("complete_case",),
            small_pop(),
            fit_config=SamplerConfig(
                chains=2, warmup_iters=200, sampling_iters=200, seed=0
            ),
        )
        assert table.methods == ("complete_case",)
        assert "incidence[c0]" in table.estimands
        assert table.n_failed == {"complete_case": 0}
        cell = table.cell("complete_case", "incidence[c0]")
        assert cell.n_replicates == 2
        assert 0.0 <= cell.coverage_50 <= 1.0
        assert 0.0 <= cell.coverage_80 <= 1.0
        assert cell.mean_length_80 >= cell.mean_length_50 >= 0.0
        rec = table.replicate_records[("complete_case", "incidence[c0]")]
        assert cell.mean_mse == pytest.approx(
            float((rec["bias"] ** 2 + rec["post_var"]).mean())
        )
        rows = table.to_rows()
        assert {r["estimand"] for r in rows} >= {"incidence[c0]", "sir[c1]"}

    def test_validation_errors(self):
        pop = small_pop()
        with pytest.raises(ConfigurationError):
            evaluate_replicates(
                two_band_scenario(n_replicates=1), ("joint",), pop
            )
        with pytest.raises(ConfigurationError):
            evaluate_replicates(
                two_band_scenario(n_replicates=2), ("nope",), pop
            )
        with pytest.raises(ConfigurationError):
            evaluate_replicates(two_band_scenario(n_replicates=2), (), pop)
