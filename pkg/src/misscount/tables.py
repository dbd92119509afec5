"""Data containers for population and case tables.

The three containers here are deliberately dumb: validated, immutable,
label-carrying arrays. Axis order is always (stratum, geography, category),
abbreviated (I, G, J) in shapes, and K is the number of stratum-level
covariate columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConformanceError, ValidationError


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_labels(name: str, labels: tuple[str, ...], n: int) -> None:
    if len(labels) != n:
        raise ValidationError(f"{name}: {len(labels)} labels for axis of length {n}")
    if len(set(labels)) != len(labels):
        raise ValidationError(f"{name}: duplicate labels")


@dataclass(frozen=True)
class PopulationTable:
    """Known population counts per (stratum, geography, category) cell.

    counts[i, g, j] is the number of people at risk in stratum i, geography g,
    category j. Counts are non-negative integers and immutable after
    construction.
    """

    counts: np.ndarray
    strata: tuple[str, ...]
    geos: tuple[str, ...]
    categories: tuple[str, ...]

    def __post_init__(self) -> None:
        c = np.asarray(self.counts)
        if c.ndim != 3:
            raise ValidationError(f"population counts must be 3-d (I,G,J), got shape {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(np.equal(np.mod(c, 1), 0)):
                raise ValidationError("population counts must be integers")
            c = c.astype(np.int64)
        else:
            c = c.astype(np.int64)
        if np.any(c < 0):
            raise ValidationError("population counts must be non-negative")
        _check_labels("strata", self.strata, c.shape[0])
        _check_labels("geos", self.geos, c.shape[1])
        _check_labels("categories", self.categories, c.shape[2])
        object.__setattr__(self, "counts", _freeze(c))
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "geos", tuple(self.geos))
        object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def n_strata(self) -> int:
        return self.counts.shape[0]

    @property
    def n_geos(self) -> int:
        return self.counts.shape[1]

    @property
    def n_categories(self) -> int:
        return self.counts.shape[2]

    def select(
        self,
        geos: tuple[str, ...] | None = None,
        categories: tuple[str, ...] | None = None,
    ) -> "PopulationTable":
        """Restrict to the named geographies/categories, in the given order."""
        gi = self._axis_index(self.geos, geos, "geography")
        ji = self._axis_index(self.categories, categories, "category")
        return PopulationTable(
            counts=self.counts[:, gi][:, :, ji],
            strata=self.strata,
            geos=tuple(self.geos[k] for k in gi),
            categories=tuple(self.categories[k] for k in ji),
        )

    def pool_geos(self, label: str = "all") -> "PopulationTable":
        """Sum over geographies, producing a single-geography table."""
        return PopulationTable(
            counts=self.counts.sum(axis=1, keepdims=True),
            strata=self.strata,
            geos=(label,),
            categories=self.categories,
        )

    @staticmethod
    def _axis_index(have: tuple[str, ...], want: tuple[str, ...] | None, kind: str) -> list[int]:
        if want is None:
            return list(range(len(have)))
        pos = {name: k for k, name in enumerate(have)}
        missing = [w for w in want if w not in pos]
        if missing:
            raise ValidationError(f"unknown {kind} labels: {missing}")
        return [pos[w] for w in want]


@dataclass(frozen=True)
class CaseTable:
    """Disease counts: observed per cell, missing-category per (stratum, geography).

    observed[i, g, j] are cases whose category was recorded; missing[i, g] are
    cases whose category label is absent. Both non-negative integers.
    """

    observed: np.ndarray
    missing: np.ndarray
    strata: tuple[str, ...]
    geos: tuple[str, ...]
    categories: tuple[str, ...]

    def __post_init__(self) -> None:
        x = np.asarray(self.observed)
        m = np.asarray(self.missing)
        if x.ndim != 3:
            raise ValidationError(f"observed counts must be 3-d (I,G,J), got shape {x.shape}")
        if m.shape != x.shape[:2]:
            raise ValidationError(
                f"missing counts shape {m.shape} does not match observed shape {x.shape[:2]}"
            )
        for name, arr in (("observed", x), ("missing", m)):
            if not np.issubdtype(arr.dtype, np.integer) and not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValidationError(f"{name} counts must be integers")
            if np.any(arr < 0):
                raise ValidationError(f"{name} counts must be non-negative")
        _check_labels("strata", self.strata, x.shape[0])
        _check_labels("geos", self.geos, x.shape[1])
        _check_labels("categories", self.categories, x.shape[2])
        object.__setattr__(self, "observed", _freeze(x.astype(np.int64)))
        object.__setattr__(self, "missing", _freeze(m.astype(np.int64)))
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "geos", tuple(self.geos))
        object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def n_strata(self) -> int:
        return self.observed.shape[0]

    @property
    def n_geos(self) -> int:
        return self.observed.shape[1]

    @property
    def n_categories(self) -> int:
        return self.observed.shape[2]

    def conforms(self, pop: PopulationTable) -> None:
        """Raise ConformanceError unless labels and axis order match `pop` exactly."""
        if self.strata != pop.strata:
            raise ConformanceError("case table strata do not match population table")
        if self.geos != pop.geos:
            raise ConformanceError("case table geographies do not match population table")
        if self.categories != pop.categories:
            raise ConformanceError("case table categories do not match population table")

    def pool_geos(self, label: str = "all") -> "CaseTable":
        return CaseTable(
            observed=self.observed.sum(axis=1, keepdims=True),
            missing=self.missing.sum(axis=1, keepdims=True),
            strata=self.strata,
            geos=(label,),
            categories=self.categories,
        )

    def total_cases(self) -> int:
        return int(self.observed.sum() + self.missing.sum())


@dataclass(frozen=True)
class DesignMatrices:
    """Covariate designs: stratum-level Z (I x K) and area-level W (G x D).

    Rows of Z align with PopulationTable.strata, rows of W with geos. Any
    sum-to-zero or reference coding is the caller's responsibility; builders
    for the standard age/sex coding live in `study`.
    """

    Z: np.ndarray
    W: np.ndarray | None = None
    covariate_names: tuple[str, ...] = field(default=())
    area_covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        z = np.asarray(self.Z, dtype=np.float64)
        if z.ndim != 2:
            raise ValidationError(f"Z must be 2-d (I,K), got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValidationError("Z must be finite")
        names = self.covariate_names or tuple(f"z{k}" for k in range(z.shape[1]))
        _check_labels("covariate_names", names, z.shape[1])
        object.__setattr__(self, "Z", _freeze(z))
        object.__setattr__(self, "covariate_names", tuple(names))
        if self.W is not None:
            w = np.asarray(self.W, dtype=np.float64)
            if w.ndim != 2:
                raise ValidationError(f"W must be 2-d (G,D), got shape {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValidationError("W must be finite")
            wnames = self.area_covariate_names or tuple(f"w{d}" for d in range(w.shape[1]))
            _check_labels("area_covariate_names", wnames, w.shape[1])
            object.__setattr__(self, "W", _freeze(w))
            object.__setattr__(self, "area_covariate_names", tuple(wnames))

    @property
    def n_covariates(self) -> int:
        return self.Z.shape[1]
