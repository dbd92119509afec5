"""File formats: table CSVs, draw archives, manifests, structured reports.

Tables travel as long-format CSV with header `stratum,geo,category,count`;
case files may use the literal category token `__MISSING__` for cases whose
category was not recorded. Label order is first appearance in the file.
Posterior draws serialize to a columnar CSV (chain, iter, one column per
parameter) and to a compressed npz archive that round-trips exactly.

Structured outputs are JSON with a top-level "schema" tag of the form
misscount/<kind>/v1, so consumers can dispatch without guessing. The run
manifest records the command, a digest of the configuration (computed over
canonical sorted-key JSON, hence stable under key reordering), the seed,
package versions, timing, and output paths.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import Diagnostics
from .errors import ConfigurationError, ConformanceError, ParseError
from .sampler import PosteriorDraws, SamplerConfig
from .study import MetricsTable
from .tables import CaseTable, DesignMatrices, PopulationTable

MISSING_TOKEN = "__MISSING__"

_TABLE_COLUMNS = ("stratum", "geo", "category", "count")


def _read_rows(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise ParseError("empty file", path=str(path), line=1)
        if tuple(header) != _TABLE_COLUMNS:
            raise ParseError(
                f"header must be exactly {','.join(_TABLE_COLUMNS)}, got {','.join(header)}",
                path=str(path), line=1,
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise ParseError("wrong number of fields", path=str(path), line=lineno)
            row["_line"] = lineno
            rows.append(row)
    if not rows:
        raise ParseError("no data rows", path=str(path), line=1)
    return rows


def _parse_count(row: dict, path: Path) -> int:
    text = row["count"].strip()
    try:
        value = int(text)
    except ValueError:
        raise ParseError(
            f"count {text!r} is not an integer", path=str(path), line=row["_line"]
        ) from None
    if value < 0:
        raise ParseError(
            f"count {value} is negative", path=str(path), line=row["_line"]
        )
    return value


def packaged_population(categories: int = 4) -> PopulationTable:
    """Load the bundled Wayne County population table (4- or 5-category)."""
    if categories not in (4, 5):
        raise ConfigurationError("packaged tables have 4 or 5 categories")
    path = Path(__file__).parent / "data" / f"wayne_population_{categories}cat.csv"
    return load_population_csv(path)


def load_population_csv(path: str | Path) -> PopulationTable:
    """Read a population table; labels keep first-appearance order."""
    path = Path(path)
    rows = _read_rows(path)
    strata: list[str] = []
    geos: list[str] = []
    categories: list[str] = []
    seen: dict[tuple[str, str, str], int] = {}
    parsed = []
    for row in rows:
        s, g, c = row["stratum"], row["geo"], row["category"]
        if c == MISSING_TOKEN:
            raise ParseError(
                f"{MISSING_TOKEN} is reserved for case tables",
                path=str(path), line=row["_line"],
            )
        key = (s, g, c)
        if key in seen:
            raise ParseError(
                f"duplicate cell {key}, first seen on line {seen[key]}",
                path=str(path), line=row["_line"],
            )
        seen[key] = row["_line"]
        if s not in strata:
            strata.append(s)
        if g not in geos:
            geos.append(g)
        if c not in categories:
            categories.append(c)
        parsed.append((s, g, c, _parse_count(row, path)))
    counts = np.zeros((len(strata), len(geos), len(categories)), dtype=np.int64)
    s_idx = {s: i for i, s in enumerate(strata)}
    g_idx = {g: i for i, g in enumerate(geos)}
    c_idx = {c: i for i, c in enumerate(categories)}
    for s, g, c, n in parsed:
        counts[s_idx[s], g_idx[g], c_idx[c]] = n
    return PopulationTable(
        counts=counts, strata=tuple(strata), geos=tuple(geos), categories=tuple(categories)
    )


def load_cases_csv(path: str | Path, pop: PopulationTable) -> CaseTable:
    """Read a case table onto the population table's axes.

    Every label must exist in the population table; rows with the
    __MISSING__ category feed the per-(stratum, geo) missing totals. Cells
    not mentioned are zero.
    """
    path = Path(path)
    rows = _read_rows(path)
    s_idx = {s: i for i, s in enumerate(pop.strata)}
    g_idx = {g: i for i, g in enumerate(pop.geos)}
    c_idx = {c: i for i, c in enumerate(pop.categories)}
    observed = np.zeros(pop.counts.shape, dtype=np.int64)
    missing = np.zeros(pop.counts.shape[:2], dtype=np.int64)
    seen: dict[tuple[str, str, str], int] = {}
    for row in rows:
        s, g, c = row["stratum"], row["geo"], row["category"]
        key = (s, g, c)
        if key in seen:
            raise ParseError(
                f"duplicate cell {key}, first seen on line {seen[key]}",
                path=str(path), line=row["_line"],
            )
        seen[key] = row["_line"]
        if s not in s_idx:
            raise ConformanceError(
                f"{path}:{row['_line']}: stratum {s!r} not in the population table"
            )
        if g not in g_idx:
            raise ConformanceError(
                f"{path}:{row['_line']}: geo {g!r} not in the population table"
            )
        n = _parse_count(row, path)
        if c == MISSING_TOKEN:
            missing[s_idx[s], g_idx[g]] = n
        elif c in c_idx:
            observed[s_idx[s], g_idx[g], c_idx[c]] = n
        else:
            raise ConformanceError(
                f"{path}:{row['_line']}: category {c!r} not in the population table"
            )
    return CaseTable(
        observed=observed, missing=missing,
        strata=pop.strata, geos=pop.geos, categories=pop.categories,
    )


def save_population_csv(pop: PopulationTable, path: str | Path) -> None:
    """Write every cell (zeros included) in axis order; load round-trips exactly."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TABLE_COLUMNS)
        for i, s in enumerate(pop.strata):
            for g, geo in enumerate(pop.geos):
                for j, c in enumerate(pop.categories):
                    writer.writerow([s, geo, c, int(pop.counts[i, g, j])])


def save_cases_csv(cases: CaseTable, path: str | Path) -> None:
    """Write observed cells plus one __MISSING__ row per (stratum, geo)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TABLE_COLUMNS)
        for i, s in enumerate(cases.strata):
            for g, geo in enumerate(cases.geos):
                for j, c in enumerate(cases.categories):
                    writer.writerow([s, geo, c, int(cases.observed[i, g, j])])
                writer.writerow([s, geo, MISSING_TOKEN, int(cases.missing[i, g])])


def load_design_csv(path: str | Path, pop: PopulationTable) -> np.ndarray:
    """Read stratum covariates: header `stratum,<name>...`, one row per stratum.

    Returns the matrix reordered to the population table's stratum order,
    with column names attached via the second return slot of
    load_design_matrices; this low-level loader returns (names, Z).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=str(path), line=1) from None
        if not header or header[0] != "stratum" or len(header) < 2:
            raise ParseError(
                "header must be stratum,<covariate>...", path=str(path), line=1
            )
        names = tuple(header[1:])
        by_stratum: dict[str, list[float]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError("wrong number of fields", path=str(path), line=lineno)
            label = row[0]
            if label in by_stratum:
                raise ParseError(
                    f"duplicate stratum {label!r}", path=str(path), line=lineno
                )
            try:
                by_stratum[label] = [float(v) for v in row[1:]]
            except ValueError:
                raise ParseError(
                    "covariate values must be numbers", path=str(path), line=lineno
                ) from None
    absent = [s for s in pop.strata if s not in by_stratum]
    if absent:
        raise ConformanceError(f"design file lacks strata: {absent}")
    extra = [s for s in by_stratum if s not in pop.strata]
    if extra:
        raise ConformanceError(f"design file has unknown strata: {extra}")
    z = np.asarray([by_stratum[s] for s in pop.strata], dtype=float)
    return names, z


def load_design_matrices(path: str | Path, pop: PopulationTable) -> DesignMatrices:
    names, z = load_design_csv(path, pop)
    return DesignMatrices(Z=z, covariate_names=names)


def save_draws_csv(draws: PosteriorDraws, path: str | Path) -> None:
    """Columnar draw dump: chain, iter, then one column per parameter."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iter", *draws.names])
        c_n, n_n, _ = draws.draws.shape
        for c in range(c_n):
            for t in range(n_n):
                writer.writerow(
                    [c, t, *(format(v, ".17g") for v in draws.draws[c, t])]
                )


def save_draws_npz(draws: PosteriorDraws, path: str | Path) -> None:
    """Lossless archive of draws, flags, sampler statistics, and config."""
    payload: dict[str, np.ndarray] = {
        "draws": draws.draws,
        "names": np.asarray(draws.names),
        "divergent": draws.divergent,
        "config_json": np.asarray(json.dumps(asdict(draws.config), sort_keys=True)),
    }
    for key, value in draws.stats.items():
        payload[f"stat_{key}"] = value
    np.savez_compressed(Path(path), **payload)


def load_draws_npz(path: str | Path) -> PosteriorDraws:
    with np.load(Path(path)) as archive:
        stats = {
            key[len("stat_"):]: archive[key]
            for key in archive.files
            if key.startswith("stat_")
        }
        config = SamplerConfig(**json.loads(str(archive["config_json"])))
        return PosteriorDraws(
            draws=archive["draws"],
            names=tuple(str(n) for n in archive["names"]),
            divergent=archive["divergent"],
            stats=stats,
            config=config,
        )


def canonical_json(payload) -> str:
    """Deterministic JSON: sorted keys, no whitespace."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    """sha256 over canonical JSON; invariant to key order, sensitive to values."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """Provenance record written next to every CLI output set."""

    command: str
    config: dict
    seed: int
    started_at: str
    duration_seconds: float
    outputs: tuple[str, ...]
    versions: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def package_versions() -> dict[str, str]:
    from . import __version__

    return {
        "misscount": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    payload = {
        "schema": "misscount/manifest/v1",
        "command": manifest.command,
        "config": manifest.config,
        "config_digest": manifest.digest,
        "seed": manifest.seed,
        "started_at": manifest.started_at,
        "duration_seconds": manifest.duration_seconds,
        "outputs": list(manifest.outputs),
        "versions": manifest.versions,
    }
    with Path(path).open("w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report(payload: dict, kind: str, path: str | Path) -> None:
    """Write a structured JSON report tagged misscount/<kind>/v1."""
    body = {"schema": f"misscount/{kind}/v1", **payload}
    with Path(path).open("w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    raise TypeError(f"not JSON serializable: {type(value)!r}")


def diagnostics_payload(diag: Diagnostics) -> dict:
    rows = [dict(name=n, **diag.row(n)) for n in diag.names]
    return {
        "parameters": rows,
        "n_divergent": diag.n_divergent,
        "n_max_depth": diag.n_max_depth,
        "notes": list(diag.notes),
    }


def save_metrics_csv(table: MetricsTable, path: str | Path) -> None:
    rows = table.to_rows()
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def metrics_payload(table: MetricsTable) -> dict:
    return {
        "methods": list(table.methods),
        "estimands": list(table.estimands),
        "rows": table.to_rows(),
        "n_failed": table.n_failed,
    }
