#!/usr/bin/env python3
"""Regenerate the packaged population tables.

Builds the Wayne County (Michigan) population CSVs under src/misscount/data/
from published 2010 county-level category totals. Cell-level detail (13 PUMAs
x 18 age-sex strata) is a synthetic disaggregation: each category gets its own
age pyramid and its own geographic weight profile, and cells are rounded by
largest remainder so every category total is met exactly. The five-category
variant splits "Other" into "Asian/Pacific Islander" and "Other" cell by cell,
so merging those two columns reproduces the four-category table byte for byte.

The construction is fully deterministic: no RNG, no network, same output on
every run.
"""

from __future__ import annotations

import csv
from pathlib import Path

# Published county totals by category.
TOTALS = {
    "Black": 732_801,
    "Hispanic/Latino": 95_260,
    "Other": 90_343,
    "White": 902_180,
}

AGE_BANDS = (
    "00_09", "10_19", "20_29", "30_39", "40_49",
    "50_59", "60_69", "70_79", "80_up",
)
SEXES = ("F", "M")

# Distinct age pyramids per category (fractions over the 9 bands, sum 1).
AGE_PYRAMIDS = {
    "White": (0.10, 0.11, 0.11, 0.12, 0.13, 0.15, 0.13, 0.09, 0.06),
    "Black": (0.14, 0.15, 0.13, 0.12, 0.13, 0.13, 0.10, 0.06, 0.04),
    "Hispanic/Latino": (0.20, 0.18, 0.16, 0.14, 0.12, 0.09, 0.06, 0.03, 0.02),
    "Other": (0.16, 0.15, 0.17, 0.15, 0.13, 0.11, 0.07, 0.04, 0.02),
}

# Female share by age band (rises with age).
FEMALE_SHARE = (0.49, 0.49, 0.50, 0.50, 0.51, 0.52, 0.53, 0.56, 0.63)

# 2010-vintage PUMA codes covering Wayne County.
PUMAS = tuple(f"{code:05d}" for code in range(3201, 3214))

# PUMA size profile (sums to 1) and an urban-to-suburban gradient; category
# weights are base * (1 + tilt * gradient), renormalized. Distinct geographic
# profiles per category keep the table full rank in every geography.
PUMA_BASE = (
    0.085, 0.080, 0.075, 0.080, 0.075, 0.070, 0.080,
    0.075, 0.080, 0.075, 0.075, 0.075, 0.075,
)
PUMA_GRADIENT = (0.9, 0.8, 0.7, 0.5, 0.3, 0.1, -0.1, -0.3, -0.5, -0.6, -0.7, -0.8, -0.9)
CATEGORY_TILT = {
    "Black": 0.85,
    "Hispanic/Latino": 0.35,
    "Other": -0.10,
    "White": -0.55,
}

# Share of the four-category "Other" assigned to Asian/Pacific Islander in the
# five-category variant.
API_SHARE = 0.62

CATEGORIES_4 = ("Black", "Hispanic/Latino", "Other", "White")
CATEGORIES_5 = ("Black", "Hispanic/Latino", "Asian/Pacific Islander", "Other", "White")


def strata() -> list[str]:
    return [f"{sex}_{band}" for sex in SEXES for band in AGE_BANDS]


def _largest_remainder(fractions: list[float], total: int) -> list[int]:
    """Integer apportionment of `total` proportional to `fractions`."""
    raw = [f * total for f in fractions]
    floors = [int(r) for r in raw]
    short = total - sum(floors)
    order = sorted(range(len(raw)), key=lambda k: (raw[k] - floors[k], k), reverse=True)
    for k in order[:short]:
        floors[k] += 1
    return floors


def category_cells(category: str) -> dict[tuple[str, str], int]:
    """Exact integer counts per (stratum, puma) for one category."""
    pyramid = AGE_PYRAMIDS[category]
    tilt = CATEGORY_TILT[category]
    weights = [b * (1.0 + tilt * s) for b, s in zip(PUMA_BASE, PUMA_GRADIENT)]
    norm = sum(weights)
    weights = [w / norm for w in weights]

    keys: list[tuple[str, str]] = []
    fractions: list[float] = []
    for sex in SEXES:
        for band, age_frac, female in zip(AGE_BANDS, pyramid, FEMALE_SHARE):
            sex_frac = female if sex == "F" else 1.0 - female
            for puma, w in zip(PUMAS, weights):
                keys.append((f"{sex}_{band}", puma))
                fractions.append(age_frac * sex_frac * w)
    counts = _largest_remainder(fractions, TOTALS[category])
    return dict(zip(keys, counts))


def build_tables() -> tuple[list[dict], list[dict]]:
    cells4 = {cat: category_cells(cat) for cat in CATEGORIES_4}

    rows4: list[dict] = []
    rows5: list[dict] = []
    for stratum in strata():
        for puma in PUMAS:
            for cat in CATEGORIES_4:
                n = cells4[cat][(stratum, puma)]
                rows4.append(
                    {"stratum": stratum, "geo": puma, "category": cat, "count": n}
                )
            other = cells4["Other"][(stratum, puma)]
            api = int(other * API_SHARE + 0.5)
            for cat in CATEGORIES_5:
                if cat == "Asian/Pacific Islander":
                    n = api
                elif cat == "Other":
                    n = other - api
                else:
                    n = cells4[cat][(stratum, puma)]
                rows5.append(
                    {"stratum": stratum, "geo": puma, "category": cat, "count": n}
                )
    return rows4, rows5


def write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["stratum", "geo", "category", "count"])
        writer.writeheader()
        writer.writerows(rows)


def main() -> None:
    out_dir = Path(__file__).resolve().parent.parent / "src" / "misscount" / "data"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows4, rows5 = build_tables()

    for cat in CATEGORIES_4:
        got = sum(r["count"] for r in rows4 if r["category"] == cat)
        assert got == TOTALS[cat], (cat, got)
    merged: dict[tuple[str, str], int] = {}
    for r in rows5:
        if r["category"] in ("Asian/Pacific Islander", "Other"):
            key = (r["stratum"], r["geo"])
            merged[key] = merged.get(key, 0) + r["count"]
    for r in rows4:
        if r["category"] == "Other":
            assert merged[(r["stratum"], r["geo"])] == r["count"]

    write_csv(out_dir / "wayne_population_4cat.csv", rows4)
    write_csv(out_dir / "wayne_population_5cat.csv", rows5)
    print(f"wrote {len(rows4)} + {len(rows5)} rows to {out_dir}")


if __name__ == "__main__":
    main()
