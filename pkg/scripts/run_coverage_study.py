"""Replicate-level driver for the desk-scale coverage study.

Runs the 90%-observed scenario on a four-geography subset of the packaged
Wayne County table, one replicate at a time, writing one JSON per replicate
so an interrupted run resumes where it stopped. Replicate r of this driver
is identical to replicate r of a single evaluate_replicates call with the
same scenario seed; the per-file layout only adds checkpointing.

    python3 scripts/run_coverage_study.py --out results/coverage --reps 50

Aggregate afterwards with --aggregate (or let the acceptance tests read the
replicate files directly).
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from misscount.io import packaged_population, write_report
from misscount.sampler import SamplerConfig
from misscount.study import ScenarioSpec, _run_replicate, build_default_design

STUDY_GEOS = ("03201", "03205", "03209", "03213")
STUDY_CATEGORIES = ("Black", "Other", "White")

METHODS = ("joint", "complete_case", "gibbs_mi")

FIT_CONFIG = SamplerConfig(
    chains=4, warmup_iters=500, sampling_iters=500, target_accept=0.9
)
# MI fits run on completed tables, where every block is strongly informed;
# pooled means only need enough draws per imputation to average over.
MI_FIT_CONFIG = SamplerConfig(
    chains=1, warmup_iters=300, sampling_iters=250, target_accept=0.9
)
N_IMPUTATIONS = 10


def study_inputs():
    pop = packaged_population().select(geos=STUDY_GEOS, categories=STUDY_CATEGORIES)
    return pop, build_default_design(pop)


def run_one(rep: int, scenario: ScenarioSpec, out: Path) -> Path:
    pop, design = study_inputs()
    started = time.time()
    records, failed = _run_replicate(
        rep,
        scenario,
        METHODS,
        pop,
        design,
        fit_config=FIT_CONFIG,
        mi_fit_config=MI_FIT_CONFIG,
        n_imputations=N_IMPUTATIONS,
        gibbs_burn=500,
        gibbs_thin=25,
        priors=None,
    )
    nested: dict = {}
    for (method, estimand), rec in records.items():
        nested.setdefault(method, {})[estimand] = {
            key: values[0] for key, values in rec.items()
        }
    payload = {
        "replicate": rep,
        "seed": scenario.seed,
        "methods": list(METHODS),
        "records": nested,
        "failed": failed,
        "duration_seconds": time.time() - started,
    }
    path = out / f"rep_{rep:03d}.json"
    write_report(payload, "study-replicate", path)
    return path


def aggregate(out: Path) -> dict:
    files = sorted(out.glob("rep_*.json"))
    merged: dict = {}
    failed: dict = {}
    for path in files:
        body = json.loads(path.read_text())
        for method, estimands in body["records"].items():
            for estimand, rec in estimands.items():
                tgt = merged.setdefault(method, {}).setdefault(
                    estimand, {k: [] for k in rec}
                )
                for key, value in rec.items():
                    tgt[key].append(value)
        for method, count in body["failed"].items():
            failed[method] = failed.get(method, 0) + count
    summary: dict = {"n_replicates": len(files), "failed": failed, "cells": []}
    for method, estimands in sorted(merged.items()):
        for estimand, rec in sorted(estimands.items()):
            bias = np.asarray(rec["bias"])
            summary["cells"].append(
                {
                    "method": method,
                    "estimand": estimand,
                    "mean_bias": float(bias.mean()),
                    "t_bias": float(
                        bias.mean() / (bias.std(ddof=1) / np.sqrt(len(bias)))
                    ),
                    "coverage_50": float(np.mean(rec["cov50"])),
                    "coverage_80": float(np.mean(rec["cov80"])),
                    "mean_length_50": float(np.mean(rec["len50"])),
                }
            )
    return summary


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--reps", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--aggregate", action="store_true",
                        help="only merge existing replicate files")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.aggregate:
        scenario = ScenarioSpec(
            target_observed_proportion=0.9, n_replicates=args.reps, seed=args.seed
        )
        for rep in range(args.reps):
            path = out / f"rep_{rep:03d}.json"
            if path.exists():
                continue
            started = time.time()
            run_one(rep, scenario, out)
            print(f"rep {rep:03d} done in {time.time() - started:.0f}s", flush=True)
    summary = aggregate(out)
    write_report(summary, "study-summary", out / "summary.json")
    for cell in summary["cells"]:
        print(
            f"{cell['method']:14s} {cell['estimand']:28s} "
            f"cov50={cell['coverage_50']:.2f} bias={cell['mean_bias']:+.4g} "
            f"t={cell['t_bias']:+.1f}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
