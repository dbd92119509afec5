"""Shared builders for small synthetic tables used across the test modules."""

from __future__ import annotations

import numpy as np
import pytest

from misscount.tables import CaseTable, DesignMatrices, PopulationTable


def labels(prefix: str, n: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i}" for i in range(n))


def make_pop(counts) -> PopulationTable:
    c = np.asarray(counts)
    return PopulationTable(
        counts=c,
        strata=labels("s", c.shape[0]),
        geos=labels("g", c.shape[1]),
        categories=labels("c", c.shape[2]),
    )


def make_cases(observed, missing) -> CaseTable:
    x = np.asarray(observed)
    return CaseTable(
        observed=x,
        missing=np.asarray(missing),
        strata=labels("s", x.shape[0]),
        geos=labels("g", x.shape[1]),
        categories=labels("c", x.shape[2]),
    )


def random_tables(rng, n_strata, n_geos, n_categories, max_pop=20, max_missing=6):
    """Small random population/case pair with conforming labels."""
    e = rng.integers(1, max_pop + 1, size=(n_strata, n_geos, n_categories))
    x = rng.integers(0, 4, size=e.shape)
    m = rng.integers(0, max_missing + 1, size=e.shape[:2])
    return make_pop(e), make_cases(x, m)


@pytest.fixture(scope="session")
def packaged_pop():
    from misscount.io import packaged_population

    return packaged_population()


@pytest.fixture()
def rng():
    return np.random.default_rng(20260819)


def simple_design(pop, n_covariates=2, rng=None) -> DesignMatrices:
    if rng is None:
        rng = np.random.default_rng(7)
    z = rng.normal(size=(pop.n_strata, n_covariates))
    return DesignMatrices(Z=z)
