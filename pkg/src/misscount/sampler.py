"""Gradient-based MCMC: dynamic-trajectory HMC with multinomial state selection.

One sampler serves every model in the package. Trajectories double in length
until the no-u-turn condition triggers (checked with mass-scaled velocities at
every subtree join), states are selected multinomially by their joint density
within subtrees and with a forward bias across doublings, step size follows
dual averaging toward a target acceptance statistic, and a diagonal mass
matrix is estimated over expanding warmup windows. Divergences are energy
errors beyond a fixed threshold relative to the trajectory start.

Everything is deterministic given SamplerConfig.seed: chain c draws from the
derived stream (seed, chain-tag, c) and chains are mutually independent, so
results do not depend on execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ConfigurationError, InitializationError, SamplingFailure
from .rng import STREAM_FIT, derive_rng

# Energy error (in nats, relative to the trajectory start) beyond which a
# leapfrog state is declared divergent and the trajectory stops growing.
DIVERGENCE_ENERGY_ERROR = 1000.0

# Dual-averaging constants.
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75

# Warmup window layout: step-size-only buffers around expanding
# variance-estimation windows.
_INIT_BUFFER = 75
_TERM_BUFFER = 50
_BASE_WINDOW = 25

_MAX_INIT_RETRIES = 100


class Target(Protocol):
    """What the sampler needs from a model: dimension, names, log density."""

    @property
    def dim(self) -> int: ...

    def names(self) -> list[str]: ...

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings.

    target_accept must lie in (0.5, 1); the dual-averaging adaptation aims
    the acceptance statistic there. init_scale bounds the uniform random
    initialization box on the unconstrained scale.
    """

    chains: int = 4
    warmup_iters: int = 500
    sampling_iters: int = 500
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    init_scale: float = 2.0

    def __post_init__(self) -> None:
        if self.chains < 1:
            raise ConfigurationError("chains must be >= 1")
        if self.warmup_iters < 1 or self.sampling_iters < 1:
            raise ConfigurationError("warmup_iters and sampling_iters must be >= 1")
        if not (0.5 < self.target_accept < 1.0):
            raise ConfigurationError("target_accept must lie strictly between 0.5 and 1")
        if self.max_tree_depth < 1 or self.max_tree_depth > 14:
            raise ConfigurationError("max_tree_depth must lie in 1..14")
        if self.init_scale <= 0:
            raise ConfigurationError("init_scale must be positive")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")


@dataclass(frozen=True)
class PosteriorDraws:
    """Post-warmup draws plus per-iteration sampler statistics.

    draws has shape (chains, iterations, parameters); names aligns with the
    last axis. stats holds per-iteration arrays keyed by name ("lp",
    "accept_stat", "tree_depth", "n_leapfrog", "energy") and per-chain arrays
    ("step_size",). divergent flags iterations whose trajectory diverged.
    """

    draws: np.ndarray
    names: tuple[str, ...]
    divergent: np.ndarray
    stats: dict[str, np.ndarray]
    config: SamplerConfig = field(repr=False)

    def __post_init__(self) -> None:
        if self.draws.ndim != 3:
            raise ConfigurationError("draws must be (chains, iterations, parameters)")
        if len(self.names) != self.draws.shape[2]:
            raise ConfigurationError("names do not match the parameter axis")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iterations(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """Pooled draws, shape (chains * iterations, parameters)."""
        return self.draws.reshape(-1, self.draws.shape[2])

    def column(self, name: str) -> np.ndarray:
        """Draws of one parameter, shape (chains, iterations)."""
        try:
            idx = self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter name: {name!r}") from None
        return self.draws[:, :, idx]


def _leapfrog(target: Target, theta, r, grad, eps, inv_mass):
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * (inv_mass * r_half)
    value_new, grad_new = target.value_and_grad(theta_new)
    r_new = r_half + 0.5 * eps * grad_new
    return theta_new, r_new, value_new, grad_new


def _log_joint(value: float, r: np.ndarray, inv_mass: np.ndarray) -> float:
    return value - 0.5 * float(np.dot(r, inv_mass * r))


def _find_reasonable_step_size(target, theta, value, grad, inv_mass, rng) -> float:
    """Double/halve the step size until the one-step density ratio crosses 1/2."""
    eps = 1.0
    r = rng.standard_normal(theta.shape[0]) / np.sqrt(inv_mass)
    here = _log_joint(value, r, inv_mass)
    _, r1, v1, _ = _leapfrog(target, theta, r, grad, eps, inv_mass)
    ratio = _log_joint(v1, r1, inv_mass) - here
    while not np.isfinite(ratio):
        eps *= 0.5
        if eps < 1e-10:
            raise InitializationError("could not find a workable initial step size")
        _, r1, v1, _ = _leapfrog(target, theta, r, grad, eps, inv_mass)
        ratio = _log_joint(v1, r1, inv_mass) - here
    direction = 1.0 if ratio > np.log(0.5) else -1.0
    for _ in range(100):
        eps *= 2.0**direction
        _, r1, v1, _ = _leapfrog(target, theta, r, grad, eps, inv_mass)
        ratio = _log_joint(v1, r1, inv_mass) - here
        if not np.isfinite(ratio):
            ratio = -np.inf
        if direction * ratio <= direction * np.log(0.5):
            return eps
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


class _Tree:
    """Subtree summary used by the recursive doubling."""

    __slots__ = (
        "theta_minus", "r_minus", "grad_minus", "theta_plus", "r_plus", "grad_plus",
        "proposal", "proposal_value", "proposal_grad", "log_sum_w", "sum_accept",
        "n_leaves", "ok", "diverged",
    )

    def __init__(self):
        self.ok = True
        self.diverged = False


def _no_uturn(theta_plus, r_plus, theta_minus, r_minus, inv_mass) -> bool:
    dx = theta_plus - theta_minus
    return (
        float(np.dot(dx, inv_mass * r_minus)) >= 0.0
        and float(np.dot(dx, inv_mass * r_plus)) >= 0.0
    )


def _build_tree(target, theta, r, grad, depth, direction, eps, inv_mass, log_joint0, rng):
    """Standard recursive doubling; returns a _Tree with multinomial weights."""
    if depth == 0:
        theta1, r1, v1, g1 = _leapfrog(target, theta, r, grad, direction * eps, inv_mass)
        lj = _log_joint(v1, r1, inv_mass)
        delta = lj - log_joint0
        tree = _Tree()
        tree.theta_minus = tree.theta_plus = theta1
        tree.r_minus = tree.r_plus = r1
        tree.grad_minus = tree.grad_plus = g1
        tree.proposal = theta1
        tree.proposal_value = v1
        tree.proposal_grad = g1
        if not np.isfinite(delta):
            delta = -np.inf
        tree.diverged = delta < -DIVERGENCE_ENERGY_ERROR
        tree.ok = not tree.diverged
        tree.log_sum_w = delta
        tree.sum_accept = float(min(1.0, np.exp(min(delta, 0.0))))
        tree.n_leaves = 1
        return tree
    first = _build_tree(
        target, theta, r, grad, depth - 1, direction, eps, inv_mass, log_joint0, rng
    )
    if not first.ok:
        return first
    if direction == 1:
        second = _build_tree(
            target, first.theta_plus, first.r_plus, first.grad_plus,
            depth - 1, direction, eps, inv_mass, log_joint0, rng,
        )
        first.theta_plus = second.theta_plus
        first.r_plus = second.r_plus
        first.grad_plus = second.grad_plus
    else:
        second = _build_tree(
            target, first.theta_minus, first.r_minus, first.grad_minus,
            depth - 1, direction, eps, inv_mass, log_joint0, rng,
        )
        first.theta_minus = second.theta_minus
        first.r_minus = second.r_minus
        first.grad_minus = second.grad_minus
    first.sum_accept += second.sum_accept
    first.n_leaves += second.n_leaves
    first.diverged = second.diverged
    if not second.ok:
        first.ok = False
        return first
    total = np.logaddexp(first.log_sum_w, second.log_sum_w)
    if np.log(rng.uniform()) < second.log_sum_w - total:
        first.proposal = second.proposal
        first.proposal_value = second.proposal_value
        first.proposal_grad = second.proposal_grad
    first.log_sum_w = total
    if not _no_uturn(first.theta_plus, first.r_plus, first.theta_minus, first.r_minus, inv_mass):
        first.ok = False
    return first


class _Welford:
    """Streaming mean/variance for the mass-matrix windows."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray | None:
        if self.n < 2:
            return None
        var = self.m2 / (self.n - 1)
        # Shrink toward unit scale, more strongly for short windows.
        w = self.n / (self.n + 5.0)
        return w * var + (1.0 - w) * 1e-3


def _warmup_schedule(warmup: int) -> tuple[int, list[int]]:
    """First slow-window start and the exclusive end of each expanding window."""
    if warmup < _INIT_BUFFER + _TERM_BUFFER + _BASE_WINDOW:
        init = max(1, int(0.15 * warmup))
        term = max(1, int(0.10 * warmup))
    else:
        init, term = _INIT_BUFFER, _TERM_BUFFER
    ends: list[int] = []
    at = init
    size = max(1, _BASE_WINDOW if warmup >= _INIT_BUFFER + _TERM_BUFFER + _BASE_WINDOW
               else warmup - init - term)
    last = warmup - term
    while at < last:
        end = at + size
        if end + 2 * size > last:
            end = last
        ends.append(min(end, last))
        at = end
        size *= 2
    return init, ends


class _DualAveraging:
    def __init__(self, eps0: float, target: float):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.m = 0

    def update(self, accept_stat: float) -> float:
        self.m += 1
        frac = 1.0 / (self.m + _DA_T0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.m) / _DA_GAMMA * self.h_bar
        w = self.m ** (-_DA_KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return float(np.exp(self.log_eps))


def _init_point(target: Target, config: SamplerConfig, rng) -> tuple[np.ndarray, float, np.ndarray]:
    for _ in range(_MAX_INIT_RETRIES):
        theta = rng.uniform(-config.init_scale, config.init_scale, size=target.dim)
        value, grad = target.value_and_grad(theta)
        if np.isfinite(value) and np.all(np.isfinite(grad)):
            return theta, value, grad
    raise InitializationError(
        f"no finite initialization found in {_MAX_INIT_RETRIES} attempts; "
        "the target may be improper or the initialization box too wide"
    )


def _run_chain(target: Target, config: SamplerConfig, chain: int):
    rng = derive_rng(config.seed, STREAM_FIT, chain)
    dim = target.dim
    theta, value, grad = _init_point(target, config, rng)
    inv_mass = np.ones(dim)
    eps = _find_reasonable_step_size(target, theta, value, grad, inv_mass, rng)
    da = _DualAveraging(eps, config.target_accept)
    window_start, window_ends = _warmup_schedule(config.warmup_iters)
    welford = _Welford(dim)
    next_window = 0

    n_keep = config.sampling_iters
    draws = np.empty((n_keep, dim))
    lp = np.empty(n_keep)
    accept = np.empty(n_keep)
    depth_stat = np.empty(n_keep, dtype=np.int64)
    leaves_stat = np.empty(n_keep, dtype=np.int64)
    energy = np.empty(n_keep)
    divergent = np.zeros(n_keep, dtype=bool)

    total = config.warmup_iters + n_keep
    for it in range(total):
        warming = it < config.warmup_iters
        r = rng.standard_normal(dim) / np.sqrt(inv_mass)
        log_joint0 = _log_joint(value, r, inv_mass)
        tree = _Tree()
        tree.theta_minus = tree.theta_plus = theta
        tree.r_minus = tree.r_plus = r
        tree.grad_minus = tree.grad_plus = grad
        tree.proposal = theta
        tree.proposal_value = value
        tree.proposal_grad = grad
        tree.log_sum_w = 0.0
        tree.sum_accept = 0.0
        tree.n_leaves = 0
        tree.diverged = False
        depth = 0
        while depth < config.max_tree_depth:
            direction = 1 if rng.uniform() < 0.5 else -1
            if direction == 1:
                sub = _build_tree(
                    target, tree.theta_plus, tree.r_plus, tree.grad_plus,
                    depth, 1, eps, inv_mass, log_joint0, rng,
                )
                if sub.ok or sub.n_leaves:
                    tree.theta_plus, tree.r_plus, tree.grad_plus = (
                        sub.theta_plus, sub.r_plus, sub.grad_plus,
                    )
            else:
                sub = _build_tree(
                    target, tree.theta_minus, tree.r_minus, tree.grad_minus,
                    depth, -1, eps, inv_mass, log_joint0, rng,
                )
                if sub.ok or sub.n_leaves:
                    tree.theta_minus, tree.r_minus, tree.grad_minus = (
                        sub.theta_minus, sub.r_minus, sub.grad_minus,
                    )
            tree.sum_accept += sub.sum_accept
            tree.n_leaves += sub.n_leaves
            tree.diverged = tree.diverged or sub.diverged
            if not sub.ok:
                break
            # Forward-biased selection between the old tree and the new half.
            if np.log(rng.uniform()) < sub.log_sum_w - tree.log_sum_w:
                tree.proposal = sub.proposal
                tree.proposal_value = sub.proposal_value
                tree.proposal_grad = sub.proposal_grad
            tree.log_sum_w = np.logaddexp(tree.log_sum_w, sub.log_sum_w)
            if not _no_uturn(
                tree.theta_plus, tree.r_plus, tree.theta_minus, tree.r_minus, inv_mass
            ):
                break
            depth += 1
        if tree.proposal is not theta:
            theta = tree.proposal
            value = tree.proposal_value
            grad = tree.proposal_grad
        accept_stat = tree.sum_accept / max(tree.n_leaves, 1)
        if warming:
            eps = da.update(accept_stat)
            if next_window < len(window_ends) and it >= window_start:
                welford.add(theta)
                if it + 1 == window_ends[next_window]:
                    var = welford.variance()
                    if var is not None:
                        inv_mass = var
                    welford = _Welford(dim)
                    window_start = window_ends[next_window]
                    next_window += 1
                    eps = _find_reasonable_step_size(target, theta, value, grad, inv_mass, rng)
                    da = _DualAveraging(eps, config.target_accept)
            if it + 1 == config.warmup_iters:
                eps = float(np.exp(da.log_eps_bar))
        else:
            k = it - config.warmup_iters
            draws[k] = theta
            lp[k] = value
            accept[k] = accept_stat
            depth_stat[k] = depth
            leaves_stat[k] = tree.n_leaves
            divergent[k] = tree.diverged
            energy[k] = -log_joint0
    return draws, divergent, {
        "lp": lp,
        "accept_stat": accept,
        "tree_depth": depth_stat,
        "n_leapfrog": leaves_stat,
        "energy": energy,
        "step_size": eps,
        "inv_mass": inv_mass,
    }


def sample_posterior(target: Target, config: SamplerConfig) -> PosteriorDraws:
    """Run the configured chains and return post-warmup draws.

    Chains are independent and deterministic given config.seed; running them
    in any order (or re-running one alone) reproduces the same numbers.
    """
    per_chain = [_run_chain(target, config, c) for c in range(config.chains)]
    draws = np.stack([d for d, _, _ in per_chain])
    divergent = np.stack([d for _, d, _ in per_chain])
    dead = np.flatnonzero(divergent.all(axis=1))
    if dead.size:
        raise SamplingFailure(
            f"chain {int(dead[0])} diverged at every post-warmup iteration; "
            "the adapted step size never produced a usable trajectory"
        )
    stats: dict[str, np.ndarray] = {}
    for key in ("lp", "accept_stat", "tree_depth", "n_leapfrog", "energy"):
        stats[key] = np.stack([s[key] for _, _, s in per_chain])
    stats["step_size"] = np.asarray([s["step_size"] for _, _, s in per_chain])
    stats["inv_mass"] = np.stack([s["inv_mass"] for _, _, s in per_chain])
    return PosteriorDraws(
        draws=draws,
        names=tuple(target.names()),
        divergent=divergent,
        stats=stats,
        config=config,
    )
