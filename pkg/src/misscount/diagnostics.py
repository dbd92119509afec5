"""Convergence diagnostics for MCMC draws.

Split R-hat and the effective sample sizes follow the rank-normalization
scheme: draws are replaced by normal scores of their fractional ranks, each
chain is split in half, and the classic between/within variance ratio (for
R-hat) or the Geyer initial-monotone autocorrelation sum (for ESS) is applied
to the transformed splits. Bulk ESS transforms the draws themselves; tail ESS
is the smaller of the ESS values of the 5% and 95% quantile exceedance
indicators. Constant inputs yield NaN, never an exception.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

DEFAULT_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _as_chains(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must have shape (chains, iterations)")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    """Halve each chain; for odd lengths the middle draw is dropped."""
    n = x.shape[1]
    half = n // 2
    return np.vstack([x[:, :half], x[:, n - half:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    """Normal scores of fractional ranks, pooled across chains."""
    shape = x.shape
    ranks = rankdata(x.reshape(-1), method="average")
    size = ranks.size
    return ndtri((ranks - 0.375) / (size + 0.25)).reshape(shape)


def _rhat_base(chains: np.ndarray) -> float:
    m, n = chains.shape
    if n < 2:
        return float("nan")
    within = float(np.mean(np.var(chains, axis=1, ddof=1)))
    if within == 0.0:
        return float("nan")
    between_over_n = float(np.var(np.mean(chains, axis=1), ddof=1)) if m > 1 else 0.0
    var_hat = (n - 1) / n * within + between_over_n
    return float(np.sqrt(var_hat / within))


def split_rhat(x: np.ndarray) -> float:
    """Rank-normalized split R-hat; NaN for constant or too-short input."""
    x = _as_chains(x)
    if x.shape[1] < 4 or np.all(x == x.flat[0]):
        return float("nan")
    return _rhat_base(_rank_normalize(_split(x)))


def _autocovariance(chains: np.ndarray) -> np.ndarray:
    """Biased (divide-by-n) autocovariance of each row, via FFT."""
    m, n = chains.shape
    size = 1
    while size < 2 * n:
        size *= 2
    centered = chains - chains.mean(axis=1, keepdims=True)
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n].real
    return acov / n


def _ess_base(chains: np.ndarray) -> float:
    """Geyer initial-monotone-sequence ESS of already-transformed chains."""
    m, n = chains.shape
    if n < 4 or np.all(chains == chains.flat[0]):
        return float("nan")
    acov = _autocovariance(chains)
    chain_means = chains.mean(axis=1)
    mean_var = float(np.mean(acov[:, 0])) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += float(np.var(chain_means, ddof=1))
    if var_plus == 0.0:
        return float("nan")

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, 1]))) / var_plus
    rho[1] = rho_odd
    # Keep pairwise sums while they stay positive (initial positive sequence).
    t = 1
    while t < n - 3 and (rho_even + rho_odd) > 0.0:
        rho_even = 1.0 - (mean_var - float(np.mean(acov[:, t + 1]))) / var_plus
        rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, t + 2]))) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0.0:
        rho[max_t + 1] = rho_even
    # Enforce monotone non-increasing pairwise sums.
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * float(np.sum(rho[: max_t + 1])) + float(rho[max_t + 1])
    # Antithetic chains can push tau toward zero; cap the resulting ESS at
    # S * log10(S) as recommended for the rank-normalized estimators.
    size = m * n
    tau = max(tau, 1.0 / np.log10(size)) if size >= 10 else max(tau, 1e-8)
    return float(size / tau)


def ess_bulk(x: np.ndarray) -> float:
    """Rank-normalized split-chain effective sample size."""
    x = _as_chains(x)
    if x.shape[1] < 4 or np.all(x == x.flat[0]):
        return float("nan")
    return _ess_base(_rank_normalize(_split(x)))


def ess_tail(x: np.ndarray) -> float:
    """Minimum ESS of the 5% and 95% quantile exceedance indicators."""
    x = _as_chains(x)
    if x.shape[1] < 4 or np.all(x == x.flat[0]):
        return float("nan")
    out = np.inf
    for q in (0.05, 0.95):
        cut = np.quantile(x, q)
        indicator = (x <= cut).astype(float)
        if np.all(indicator == indicator.flat[0]):
            return float("nan")
        out = min(out, _ess_base(_rank_normalize(_split(indicator))))
    return float(out)


@dataclass(frozen=True)
class Diagnostics:
    """Per-parameter posterior summary plus sampler health counters."""

    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    quantile_probs: tuple[float, ...]
    quantiles: np.ndarray
    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    mcse_mean: np.ndarray
    n_divergent: int
    n_max_depth: int
    notes: tuple[str, ...]

    def row(self, name: str) -> dict[str, float]:
        idx = self.names.index(name)
        out: dict[str, float] = {
            "mean": float(self.mean[idx]),
            "sd": float(self.sd[idx]),
            "rhat": float(self.rhat[idx]),
            "ess_bulk": float(self.ess_bulk[idx]),
            "ess_tail": float(self.ess_tail[idx]),
            "mcse_mean": float(self.mcse_mean[idx]),
        }
        for p, q in zip(self.quantile_probs, self.quantiles[idx]):
            out[f"q{int(round(p * 100)):02d}"] = float(q)
        return out

    def worst_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(np.max(finite)) if finite.size else float("nan")

    def min_ess_bulk(self) -> float:
        finite = self.ess_bulk[np.isfinite(self.ess_bulk)]
        return float(np.min(finite)) if finite.size else float("nan")


def summarize(
    draws,
    quantile_probs: tuple[float, ...] = DEFAULT_QUANTILES,
) -> Diagnostics:
    """Summarize a PosteriorDraws object (or a bare (C, N, P) array + names).

    Quantiles use the linear interpolation rule on the pooled draws. The
    MCSE of the mean is sd / sqrt(bulk ESS).
    """
    if hasattr(draws, "draws"):
        array = draws.draws
        names = tuple(draws.names)
        n_divergent = int(np.sum(draws.divergent))
        depth = draws.stats.get("tree_depth")
        max_depth = getattr(draws.config, "max_tree_depth", None)
        n_max_depth = (
            int(np.sum(depth >= max_depth))
            if depth is not None and max_depth is not None
            else 0
        )
    else:
        array = np.asarray(draws, dtype=float)
        names = tuple(f"p{i}" for i in range(array.shape[-1]))
        n_divergent = 0
        n_max_depth = 0
    if array.ndim != 3:
        raise ValueError("draws must have shape (chains, iterations, parameters)")
    n_params = array.shape[2]
    flat = array.reshape(-1, n_params)

    mean = flat.mean(axis=0)
    sd = flat.std(axis=0, ddof=1)
    quantiles = np.quantile(flat, quantile_probs, axis=0).T
    rhat = np.empty(n_params)
    bulk = np.empty(n_params)
    tail = np.empty(n_params)
    notes: list[str] = []
    for j in range(n_params):
        col = array[:, :, j]
        rhat[j] = split_rhat(col)
        bulk[j] = ess_bulk(col)
        tail[j] = ess_tail(col)
        if np.isnan(rhat[j]) and np.all(col == col.flat[0]):
            notes.append(f"{names[j]}: draws are constant; R-hat and ESS are undefined")
    with np.errstate(invalid="ignore", divide="ignore"):
        mcse = sd / np.sqrt(bulk)
    if n_divergent:
        notes.append(f"{n_divergent} divergent transitions after warmup")
    if n_max_depth:
        notes.append(f"{n_max_depth} transitions hit the maximum tree depth")
    return Diagnostics(
        names=names,
        mean=mean,
        sd=sd,
        quantile_probs=tuple(quantile_probs),
        quantiles=quantiles,
        rhat=rhat,
        ess_bulk=bulk,
        ess_tail=tail,
        mcse_mean=mcse,
        n_divergent=n_divergent,
        n_max_depth=n_max_depth,
        notes=tuple(notes),
    )
