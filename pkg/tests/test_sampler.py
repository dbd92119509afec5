"""Sampler behavior on analytically known targets.

Calibration checks compare against closed-form posteriors (standard and
correlated Gaussians, the Poisson-Gamma conjugate pair) with MCSE-scaled
tolerances, so no tuned constants hide in the assertions. Failure-mode
tests use synthetic targets built to trip one specific guard each.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy import stats as sps
from scipy.special import expit

from misscount.errors import ConfigurationError, InitializationError, SamplingFailure
from misscount.diagnostics import split_rhat, summarize
from misscount.sampler import (
    PosteriorDraws,
    SamplerConfig,
    _warmup_schedule,
    sample_posterior,
)


class StdNormal:
    """Isotropic unit Gaussian in d dimensions."""

    def __init__(self, d: int):
        self._d = d

    @property
    def dim(self) -> int:
        return self._d

    def names(self) -> list[str]:
        return [f"x{i}" for i in range(self._d)]

    def value_and_grad(self, theta):
        return -0.5 * float(theta @ theta), -theta


class MVNormal:
    """Zero-mean Gaussian with a fixed covariance."""

    def __init__(self, cov: np.ndarray):
        self._prec = np.linalg.inv(cov)

    @property
    def dim(self) -> int:
        return self._prec.shape[0]

    def names(self) -> list[str]:
        return [f"x{i}" for i in range(self.dim)]

    def value_and_grad(self, theta):
        g = self._prec @ theta
        return -0.5 * float(theta @ g), -g


class LogRateTarget:
    """Posterior of the log rate for counts x_i ~ Poisson(rate), Gamma(a, b) prior.

    The rate posterior is Gamma(a + sum x, b + n); on the log scale the
    density picks up the usual exp-transform volume term, which is what the
    closed-form shape/rate below already encode.
    """

    def __init__(self, a: float, b: float, n: int, sum_x: float):
        self.shape = a + sum_x
        self.rate = b + n

    @property
    def dim(self) -> int:
        return 1

    def names(self) -> list[str]:
        return ["log_rate"]

    def value_and_grad(self, theta):
        t = float(theta[0])
        val = self.shape * t - self.rate * np.exp(t)
        return val, np.array([self.shape - self.rate * np.exp(t)])


class Bimodal:
    """Equal mixture of unit Gaussians at +/- mu; separated enough to trap chains."""

    def __init__(self, mu: float):
        self.mu = mu

    @property
    def dim(self) -> int:
        return 1

    def names(self) -> list[str]:
        return ["x"]

    def value_and_grad(self, theta):
        t = float(theta[0])
        a = -0.5 * (t - self.mu) ** 2
        b = -0.5 * (t + self.mu) ** 2
        w = expit(a - b)
        grad = np.array([-(t - self.mu) * w - (t + self.mu) * (1.0 - w)])
        return float(np.logaddexp(a, b)), grad


class SuddenCliff:
    """Density that drops by a constant after a fixed evaluation budget.

    Once the drop happens every proposed state sits thousands of nats below
    the cached trajectory start, so every remaining transition diverges.
    """

    def __init__(self, budget: int):
        self.calls = 0
        self.budget = budget

    @property
    def dim(self) -> int:
        return 2

    def names(self) -> list[str]:
        return ["a", "b"]

    def value_and_grad(self, theta):
        self.calls += 1
        drop = -5000.0 if self.calls > self.budget else 0.0
        return -0.5 * float(theta @ theta) + drop, -theta


class NeverFinite:
    @property
    def dim(self) -> int:
        return 2

    def names(self) -> list[str]:
        return ["a", "b"]

    def value_and_grad(self, theta):
        return -np.inf, np.zeros(2)


class TestSamplerConfig:
    def test_defaults_are_valid(self):
        cfg = SamplerConfig()
        assert cfg.chains == 4
        assert 0.5 < cfg.target_accept < 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"chains": 0},
            {"warmup_iters": 0},
            {"sampling_iters": 0},
            {"target_accept": 0.5},
            {"target_accept": 1.0},
            {"max_tree_depth": 0},
            {"max_tree_depth": 15},
            {"init_scale": 0.0},
            {"seed": -1},
        ],
    )
    def test_out_of_domain_values_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            SamplerConfig(**kwargs)


class TestPosteriorDrawsContainer:
    def _make(self):
        rng = np.random.default_rng(0)
        return PosteriorDraws(
            draws=rng.standard_normal((2, 5, 3)),
            names=("a", "b", "c"),
            divergent=np.zeros((2, 5), dtype=bool),
            stats={},
            config=SamplerConfig(),
        )

    def test_shape_accessors(self):
        pd = self._make()
        assert pd.n_chains == 2
        assert pd.n_iterations == 5
        assert pd.flat().shape == (10, 3)

    def test_column_lookup(self):
        pd = self._make()
        np.testing.assert_array_equal(pd.column("b"), pd.draws[:, :, 1])
        with pytest.raises(KeyError):
            pd.column("zzz")

    def test_rejects_mismatched_names(self):
        with pytest.raises(ConfigurationError):
            PosteriorDraws(
                draws=np.zeros((1, 4, 2)),
                names=("a",),
                divergent=np.zeros((1, 4), dtype=bool),
                stats={},
                config=SamplerConfig(),
            )

    def test_rejects_wrong_rank(self):
        with pytest.raises(ConfigurationError):
            PosteriorDraws(
                draws=np.zeros((4, 2)),
                names=("a", "b"),
                divergent=np.zeros(4, dtype=bool),
                stats={},
                config=SamplerConfig(),
            )


class TestStandardNormal:
    def test_moments_recovered(self):
        cfg = SamplerConfig(chains=4, warmup_iters=500, sampling_iters=1000, seed=3)
        out = sample_posterior(StdNormal(3), cfg)
        assert out.draws.shape == (4, 1000, 3)
        diag = summarize(out)
        flat = out.flat()
        for j in range(3):
            assert abs(flat[:, j].mean()) < 4.0 / np.sqrt(diag.ess_bulk[j])
            assert flat[:, j].var(ddof=1) == pytest.approx(1.0, rel=0.10)
        assert diag.worst_rhat() < 1.01
        assert diag.min_ess_bulk() > 1000.0

    def test_stats_have_expected_keys_and_shapes(self):
        cfg = SamplerConfig(chains=2, warmup_iters=100, sampling_iters=50, seed=0)
        out = sample_posterior(StdNormal(2), cfg)
        for key in ("lp", "accept_stat", "tree_depth", "n_leapfrog", "energy"):
            assert out.stats[key].shape == (2, 50)
        assert out.stats["step_size"].shape == (2,)
        assert np.all(out.stats["step_size"] > 0)
        assert np.all(out.stats["n_leapfrog"] >= 1)


class TestCorrelatedGaussian:
    def test_correlation_recovered(self):
        rho = 0.9
        cov = np.array([[1.0, rho], [rho, 1.0]])
        cfg = SamplerConfig(chains=4, warmup_iters=500, sampling_iters=1000, seed=5)
        out = sample_posterior(MVNormal(cov), cfg)
        flat = out.flat()
        corr = float(np.corrcoef(flat.T)[0, 1])
        assert abs(corr - rho) < 0.05


class TestConjugateCalibration:
    def test_poisson_gamma_posterior_recovered(self):
        target = LogRateTarget(a=3.0, b=1.0, n=40, sum_x=120.0)
        cfg = SamplerConfig(chains=4, warmup_iters=500, sampling_iters=1000, seed=7)
        out = sample_posterior(target, cfg)
        rates = np.exp(out.draws)
        diag = summarize(rates)
        exact_mean = target.shape / target.rate
        exact_sd = np.sqrt(target.shape) / target.rate
        assert abs(diag.mean[0] - exact_mean) < 3.0 * diag.mcse_mean[0]
        assert diag.sd[0] == pytest.approx(exact_sd, rel=0.10)
        assert split_rhat(rates[:, :, 0]) < 1.01
        assert int(out.divergent.sum()) == 0

    def test_poisson_gamma_distribution_shape(self):
        # Smoke-scale distributional check; the tight threshold runs on the
        # pooled 50,000-draw version in the acceptance suite.
        target = LogRateTarget(a=3.0, b=1.0, n=40, sum_x=120.0)
        cfg = SamplerConfig(chains=4, warmup_iters=500, sampling_iters=1000, seed=7)
        out = sample_posterior(target, cfg)
        pooled = np.exp(out.flat()[:, 0])
        u = sps.gamma.cdf(pooled, a=target.shape, scale=1.0 / target.rate)
        ks = sps.kstest(u, "uniform").statistic
        assert ks < 0.05


class TestDeterminism:
    def test_identical_seed_reproduces_everything(self):
        cfg = SamplerConfig(chains=2, warmup_iters=150, sampling_iters=100, seed=21)
        a = sample_posterior(StdNormal(2), cfg)
        b = sample_posterior(StdNormal(2), cfg)
        np.testing.assert_array_equal(a.draws, b.draws)
        np.testing.assert_array_equal(a.divergent, b.divergent)
        for key in a.stats:
            np.testing.assert_array_equal(a.stats[key], b.stats[key])

    def test_different_seed_differs(self):
        base = SamplerConfig(chains=1, warmup_iters=150, sampling_iters=100, seed=21)
        other = SamplerConfig(chains=1, warmup_iters=150, sampling_iters=100, seed=22)
        a = sample_posterior(StdNormal(2), base)
        b = sample_posterior(StdNormal(2), other)
        assert not np.array_equal(a.draws, b.draws)

    def test_chain_results_independent_of_chain_count(self):
        one = SamplerConfig(chains=1, warmup_iters=100, sampling_iters=50, seed=9)
        three = SamplerConfig(chains=3, warmup_iters=100, sampling_iters=50, seed=9)
        a = sample_posterior(StdNormal(2), one)
        b = sample_posterior(StdNormal(2), three)
        np.testing.assert_array_equal(a.draws[0], b.draws[0])


class TestFailureModes:
    def test_never_finite_target_raises_initialization_error(self):
        with pytest.raises(InitializationError):
            sample_posterior(NeverFinite(), SamplerConfig(chains=1, seed=0))

    def test_all_divergent_chain_raises_sampling_failure(self):
        target = SuddenCliff(budget=200)
        cfg = SamplerConfig(chains=1, warmup_iters=50, sampling_iters=20, seed=0)
        with pytest.raises(SamplingFailure):
            sample_posterior(target, cfg)

    def test_divergences_flagged_but_tolerated_when_sparse(self):
        # A heavy cliff after most of the run: the run completes and the
        # divergent iterations are flagged rather than silently dropped.
        target = SuddenCliff(budget=10**9)
        cfg = SamplerConfig(chains=1, warmup_iters=50, sampling_iters=20, seed=0)
        out = sample_posterior(target, cfg)
        assert out.divergent.shape == (1, 20)
        assert not out.divergent.any()


class TestTreeDepth:
    def test_depth_cap_respected(self):
        cov = np.array([[1.0, 0.99], [0.99, 1.0]])
        cfg = SamplerConfig(
            chains=2, warmup_iters=200, sampling_iters=200, max_tree_depth=3, seed=2
        )
        out = sample_posterior(MVNormal(cov), cfg)
        assert int(out.stats["tree_depth"].max()) <= 3
        assert int(out.stats["n_leapfrog"].max()) <= 2**3 - 1
        diag = summarize(out)
        assert diag.n_max_depth > 0


class TestWarmupSchedule:
    def test_standard_layout(self):
        init, ends = _warmup_schedule(500)
        assert init == 75
        assert ends == [100, 150, 250, 450]

    def test_final_window_absorbs_remainder(self):
        init, ends = _warmup_schedule(1000)
        assert init == 75
        assert ends == [100, 150, 250, 450, 950]

    def test_short_warmup_shrinks_proportionally(self):
        init, ends = _warmup_schedule(60)
        assert init == 9
        assert ends == [54]
        init, ends = _warmup_schedule(10)
        assert init == 1
        assert ends == [9]

    def test_windows_fit_inside_warmup(self):
        for warmup in (25, 80, 150, 333, 2000):
            init, ends = _warmup_schedule(warmup)
            assert 0 < init < warmup
            assert all(e <= warmup for e in ends)
            assert ends == sorted(ends)


class TestDiagnosticsHonesty:
    def test_bimodal_target_reports_high_rhat(self):
        cfg = SamplerConfig(chains=4, warmup_iters=200, sampling_iters=200, seed=0)
        out = sample_posterior(Bimodal(4.0), cfg)
        assert split_rhat(out.draws[:, :, 0]) > 1.1
