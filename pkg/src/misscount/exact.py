"""Exact small-instance marginalization of the latent per-category case splits.

Two families of routines live here, and they are deliberately redundant:

* `marginal_oracle_lpmf`: brute-force enumeration of the joint probability of
  one cell's observed counts under the Poisson-count model, summing over every
  composition of the missing total across categories. Exponentially sized, so
  it refuses instances beyond small caps. It exists as the independent route
  against which the factorized closed form is checked.

* `binomial_miss_lpmf` / `binomial_oracle_lpmf`: the dynamic-programming
  recursion for the finite-population (binomial) cell model and the matching
  brute-force enumeration. The DP is quadratic in the missing total and
  linear in the number of categories; the oracle is exponential.

All inputs are one cell: per-category exposures/populations, per-category
rates and observation probabilities, observed counts, and one missing total.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import inf, lgamma, log
from typing import Iterator

import numpy as np

from .errors import DomainError, ValidationError

# Enumeration caps. C(m+J-1, J-1) compositions are evaluated per call, so
# these keep the oracle under ~2k terms.
MAX_ORACLE_MISSING = 12
MAX_ORACLE_CATEGORIES = 5


@dataclass(frozen=True)
class CellInstance:
    """One cell of the simple model: exposures, rates, observation probs, data.

    exposures[j] > 0 scales the Poisson rate of category j; lam[j] > 0 is the
    per-exposure rate; p[j] in [0, 1] is the probability a case's category is
    recorded; x[j] are recorded counts and m is the unrecorded total.
    """

    exposures: np.ndarray
    lam: np.ndarray
    p: np.ndarray
    x: np.ndarray
    m: int

    def __post_init__(self) -> None:
        e = np.asarray(self.exposures, dtype=np.float64)
        lam = np.asarray(self.lam, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.int64)
        if not (e.shape == lam.shape == p.shape == x.shape) or e.ndim != 1:
            raise ValidationError("exposures, lam, p, x must be 1-d arrays of equal length")
        if np.any(e < 0) or np.any(lam < 0):
            raise ValidationError("exposures and rates must be non-negative")
        if np.any(p < 0) or np.any(p > 1):
            raise ValidationError("observation probabilities must lie in [0, 1]")
        if np.any(x < 0) or self.m < 0:
            raise ValidationError("counts must be non-negative")
        object.__setattr__(self, "exposures", e)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "m", int(self.m))

    @property
    def n_categories(self) -> int:
        return self.exposures.shape[0]


def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """Yield all weak compositions of `total` into `parts` parts, lexicographically."""
    if parts < 1:
        raise ValidationError("parts must be >= 1")
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in compositions(total - first, parts - 1):
            yield (first, *rest)


def poisson_lpmf(k: int, rate: float) -> float:
    """Scalar Poisson log-pmf with the rate-zero conventions used package-wide."""
    if k < 0:
        return -inf
    if rate < 0:
        raise DomainError("Poisson rate must be non-negative")
    if rate == 0.0:
        return 0.0 if k == 0 else -inf
    return k * log(rate) - rate - lgamma(k + 1)


def binomial_lpmf(k: int, n: int, q: float) -> float:
    """Scalar binomial log-pmf; out-of-support points return -inf."""
    if q < 0.0 or q > 1.0:
        raise DomainError("binomial probability must lie in [0, 1]")
    if k < 0 or n < 0 or k > n:
        return -inf
    if q == 0.0:
        return 0.0 if k == 0 else -inf
    if q == 1.0:
        return 0.0 if k == n else -inf
    return (
        lgamma(n + 1)
        - lgamma(k + 1)
        - lgamma(n - k + 1)
        + k * log(q)
        + (n - k) * log(1.0 - q)
    )


def _logsumexp(values: list[float]) -> float:
    best = max(values, default=-inf)
    if best == -inf:
        return -inf
    return best + log(sum(np.exp(np.asarray(values) - best)))


def _check_caps(m: int, j: int) -> None:
    if m > MAX_ORACLE_MISSING:
        raise DomainError(
            f"oracle enumeration refuses missing totals above {MAX_ORACLE_MISSING} (got {m})"
        )
    if j > MAX_ORACLE_CATEGORIES:
        raise DomainError(
            f"oracle enumeration refuses more than {MAX_ORACLE_CATEGORIES} categories (got {j})"
        )


def marginal_oracle_lpmf(inst: CellInstance) -> float:
    """log P(x, m) for one cell by summing over latent category splits.

    The latent per-category totals are y_j = x_j + c_j with y_j ~ Poisson of
    rate lam_j * exposures_j; each case is recorded independently with
    probability p_j. The missing split c is summed over every composition of
    m, in lexicographic order.
    """
    _check_caps(inst.m, inst.n_categories)
    rates = inst.lam * inst.exposures
    terms: list[float] = []
    for c in compositions(inst.m, inst.n_categories):
        term = 0.0
        for j in range(inst.n_categories):
            y = int(inst.x[j]) + c[j]
            term += poisson_lpmf(y, float(rates[j]))
            term += binomial_lpmf(int(inst.x[j]), y, float(inst.p[j]))
            if term == -inf:
                break
        terms.append(term)
    return _logsumexp(terms)


def binomial_2_lpmf(y_obs: int, y_tot: int, p: float, theta: float, population: int) -> float:
    """log P(recorded = y_obs, total = y_tot) for one category of one cell.

    Finite-population form: the category's case total is Binomial(population,
    theta) and each case is recorded with probability p.
    """
    return binomial_lpmf(y_obs, y_tot, p) + binomial_lpmf(y_tot, population, theta)


def binomial_miss_lpmf(
    y_obs: np.ndarray,
    n_miss: int,
    p: np.ndarray,
    theta: np.ndarray,
    population: np.ndarray,
    *,
    count_ops: bool = False,
) -> float | tuple[float, int]:
    """log P(y_obs, n_miss) for one cell under the finite-population model.

    Dynamic program over categories: row n holds the log-probability of the
    first n categories' recorded counts jointly with each possible partial
    missing total. Work grows linearly in the number of categories and
    quadratically in n_miss. With count_ops=True, also returns the number of
    recurrence term evaluations.
    """
    y = np.asarray(y_obs, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    pop = np.asarray(population, dtype=np.int64)
    if not (y.shape == p.shape == theta.shape == pop.shape) or y.ndim != 1:
        raise ValidationError("y_obs, p, theta, population must be 1-d arrays of equal length")
    if n_miss < 0 or np.any(y < 0):
        raise ValidationError("counts must be non-negative")
    n_cat = y.shape[0]
    ops = 0

    # b[j][t] = log P(category j records y[j] and misses t). Computed per row;
    # the recurrence below consumes it exactly as many times as the count.
    def row_terms(j: int) -> np.ndarray:
        out = np.empty(n_miss + 1)
        for t in range(n_miss + 1):
            out[t] = binomial_2_lpmf(
                int(y[j]), int(y[j]) + t, float(p[j]), float(theta[j]), int(pop[j])
            )
        return out

    b = row_terms(0)
    alpha = b.copy()
    ops += n_miss + 1
    for j in range(1, n_cat):
        b = row_terms(j)
        new = np.full(n_miss + 1, -inf)
        for tot in range(n_miss + 1):
            terms = alpha[: tot + 1] + b[tot::-1]
            ops += tot + 1
            best = terms.max()
            if best > -inf:
                new[tot] = best + np.log(np.exp(terms - best).sum())
        alpha = new
    result = float(alpha[n_miss])
    if count_ops:
        return result, ops
    return result


def binomial_oracle_lpmf(
    y_obs: np.ndarray,
    n_miss: int,
    p: np.ndarray,
    theta: np.ndarray,
    population: np.ndarray,
) -> float:
    """Brute-force counterpart of `binomial_miss_lpmf` for small instances."""
    y = np.asarray(y_obs, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    pop = np.asarray(population, dtype=np.int64)
    if not (y.shape == p.shape == theta.shape == pop.shape) or y.ndim != 1:
        raise ValidationError("y_obs, p, theta, population must be 1-d arrays of equal length")
    n_cat = y.shape[0]
    _check_caps(n_miss, n_cat)
    terms: list[float] = []
    for c in compositions(n_miss, n_cat):
        term = 0.0
        for j in range(n_cat):
            term += binomial_2_lpmf(
                int(y[j]), int(y[j]) + c[j], float(p[j]), float(theta[j]), int(pop[j])
            )
            if term == -inf:
                break
        terms.append(term)
    return _logsumexp(terms)


def dp_op_count(n_categories: int, n_miss: int) -> int:
    """Exact number of recurrence term evaluations `binomial_miss_lpmf` performs."""
    first = n_miss + 1
    later = (n_categories - 1) * (n_miss + 1) * (n_miss + 2) // 2
    return first + later
