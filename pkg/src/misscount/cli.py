"""Command-line front end.

Subcommands: simulate (write replicate datasets and truths), fit (sample one
model on one dataset), check-id (identifiability report), estimate
(closed-form estimators and approximate-posterior sweeps), report (aggregate
replicate fits into metrics), check (run the exact-oracle equivalence
suites). Exit codes: 0 success, 1 validation failure, 2 runtime failure,
64 usage error. Every run writes a manifest.json next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import io as mio
from .diagnostics import summarize
from .errors import (
    ConfigurationError,
    IdentifiabilityError,
    MisscountError,
    ParseError,
    RuntimeFailure,
    ValidationError,
)
from .estimators import (
    approx_posterior_lambda1,
    beta_shift_statistic,
    check_global_id,
    check_local_id,
    estimate_lambda,
)
from .model import PriorConfig
from .rng import STREAM_SIMULATE, derive_rng
from .sampler import SamplerConfig
from .study import (
    ScenarioSpec,
    build_default_design,
    compute_estimands,
    estimand_draws,
    fit_complete_case,
    fit_joint,
    generate_dataset,
    impute_adhoc,
    impute_gibbs,
    pool_mi,
    scenario_hyper,
)

_PACKAGED_POP = Path(__file__).parent / "data" / "wayne_population_4cat.csv"

_METHOD_CHOICES = ("joint", "complete-case", "mi-adhoc", "mi-gibbs")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 64 instead of 2."""

    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="misscount", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: _Parser) -> None:
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    sim = sub.add_parser("simulate", help="write replicate datasets and truths")
    sim.add_argument("--pop", default=str(_PACKAGED_POP), help="population CSV")
    sim.add_argument("--scenario", default="0.9",
                     help="target observed proportion, or a scenario JSON path")
    sim.add_argument("--replicates", type=int, default=None)
    add_common(sim)

    fit = sub.add_parser("fit", help="sample one model on one dataset")
    fit.add_argument("--pop", default=str(_PACKAGED_POP))
    fit.add_argument("--cases", required=True)
    fit.add_argument("--design", default=None, help="stratum covariate CSV")
    fit.add_argument("--method", choices=_METHOD_CHOICES, default="joint")
    fit.add_argument("--chains", type=int, default=4)
    fit.add_argument("--warmup", type=int, default=500)
    fit.add_argument("--draws", type=int, default=500)
    fit.add_argument("--target-accept", type=float, default=0.9)
    fit.add_argument("--imputations", type=int, default=20)
    fit.add_argument("--priors", choices=("simulation", "applied"), default="simulation")
    add_common(fit)

    cid = sub.add_parser("check-id", help="identifiability report for a table")
    cid.add_argument("--pop", required=True)
    cid.add_argument("--design", default=None)
    cid.add_argument("--lam", default=None,
                     help="comma-separated rates (default: all 1)")
    cid.add_argument("--p", default=None,
                     help="comma-separated observation probabilities (default: all 0.5)")
    add_common(cid)

    est = sub.add_parser("estimate", help="closed-form estimators and sweeps")
    est.add_argument("--pop", required=True)
    est.add_argument("--cases", required=True)
    add_common(est)

    rep = sub.add_parser("report", help="aggregate replicate fit outputs")
    rep.add_argument("--runs", required=True,
                     help="directory holding rep_*/ fit outputs from simulate+fit")
    add_common(rep)

    chk = sub.add_parser("check", help="run oracle equivalence suites")
    chk.add_argument("--instances", type=int, default=200)
    add_common(chk)
    return parser


def _ensure_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(args, config: dict, outputs: list[Path], started: float) -> None:
    manifest = mio.RunManifest(
        command=args.command,
        config=config,
        seed=getattr(args, "seed", 0),
        started_at=datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        duration_seconds=time.time() - started,
        outputs=tuple(str(p) for p in outputs),
        versions=mio.package_versions(),
    )
    mio.write_manifest(manifest, Path(args.out) / "manifest.json")


def _load_scenario(text: str, seed: int, replicates: int | None) -> ScenarioSpec:
    try:
        value = float(text)
    except ValueError:
        path = Path(text)
        if not path.exists():
            raise ParseError(f"scenario {text!r} is neither a number nor a file")
        with path.open() as fh:
            payload = json.load(fh)
        payload.pop("schema", None)
        known = {f.name for f in dataclasses.fields(ScenarioSpec)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        for key in ("age_effects_risk", "age_effects_observation", "observation_ratios"):
            if key in payload and payload[key] is not None:
                payload[key] = tuple(payload[key])
        spec = ScenarioSpec(**payload)
    else:
        spec = ScenarioSpec(target_observed_proportion=value)
    updates: dict = {"seed": seed}
    if replicates is not None:
        updates["n_replicates"] = replicates
    return dataclasses.replace(spec, **updates)


def _cmd_simulate(args) -> int:
    started = time.time()
    out = _ensure_out(args)
    pop = mio.load_population_csv(args.pop)
    scenario = _load_scenario(args.scenario, args.seed, args.replicates)
    design = build_default_design(pop)
    truth_hyper = scenario_hyper(scenario, pop, design)
    outputs: list[Path] = []
    for rep in range(scenario.n_replicates):
        rng = derive_rng(scenario.seed, STREAM_SIMULATE, rep)
        cases, params, _ = generate_dataset(pop, scenario, rng, design)
        rep_dir = out / f"rep_{rep:03d}"
        rep_dir.mkdir(exist_ok=True)
        cases_path = rep_dir / "cases.csv"
        mio.save_cases_csv(cases, cases_path)
        truth = compute_estimands(params, truth_hyper, pop, design)
        payload = {
            "replicate": rep,
            "estimands": truth.as_dict(),
            "realized": {
                "log_lambda": [p.log_lambda for p in params],
                "eta": [p.eta for p in params],
                "beta": [p.beta for p in params],
                "gamma": [p.gamma for p in params],
            },
            "alpha_eta": truth_hyper.alpha_eta,
        }
        truth_path = rep_dir / "truth.json"
        mio.write_report(payload, "truth", truth_path)
        outputs += [cases_path, truth_path]
    scen_path = out / "scenario.json"
    mio.write_report(dataclasses.asdict(scenario), "scenario", scen_path)
    outputs.append(scen_path)
    _finish(args, dataclasses.asdict(scenario), outputs, started)
    return 0


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(
        chains=args.chains,
        warmup_iters=args.warmup,
        sampling_iters=args.draws,
        target_accept=args.target_accept,
        seed=args.seed,
    )


def _cmd_fit(args) -> int:
    started = time.time()
    out = _ensure_out(args)
    pop = mio.load_population_csv(args.pop)
    cases = mio.load_cases_csv(args.cases, pop)
    design = (
        mio.load_design_matrices(args.design, pop)
        if args.design
        else build_default_design(pop)
    )
    priors = PriorConfig.simulation() if args.priors == "simulation" else PriorConfig.applied()
    config = _sampler_config(args)

    if args.method == "joint":
        draws = fit_joint(pop, cases, design, config, priors)
    elif args.method == "complete-case":
        draws = fit_complete_case(pop, cases, design, config, priors)
    else:
        imp_rng = derive_rng(args.seed, STREAM_SIMULATE, 0, 0)
        if args.method == "mi-adhoc":
            completed = [impute_adhoc(pop, cases, imp_rng) for _ in range(args.imputations)]
        else:
            thin = 25
            completed = impute_gibbs(cases, 500, args.imputations * thin, thin, imp_rng)
        seed_rng = derive_rng(args.seed, STREAM_SIMULATE, 0, 1)
        fits = []
        for table in completed:
            cfg = dataclasses.replace(config, seed=int(seed_rng.integers(2**63)))
            fits.append(fit_complete_case(pop, table, design, cfg, priors))
        draws = pool_mi(fits)

    outputs = []
    for name, saver in (
        ("draws.csv", mio.save_draws_csv),
        ("draws.npz", mio.save_draws_npz),
    ):
        path = out / name
        saver(draws, path)
        outputs.append(path)
    diag = summarize(draws)
    diag_path = out / "diagnostics.json"
    mio.write_report(mio.diagnostics_payload(diag), "diagnostics", diag_path)
    outputs.append(diag_path)

    est = estimand_draws(draws, pop, design)
    rows = []
    for name, arr in est.items():
        q05, q25, q50, q75, q95 = np.quantile(arr, (0.05, 0.25, 0.5, 0.75, 0.95))
        rows.append(
            {
                "estimand": name,
                "mean": float(arr.mean()),
                "sd": float(arr.std(ddof=1)),
                "q05": float(q05), "q25": float(q25), "q50": float(q50),
                "q75": float(q75), "q95": float(q95),
            }
        )
    est_path = out / "estimands.json"
    mio.write_report({"method": args.method, "rows": rows}, "estimands", est_path)
    outputs.append(est_path)
    _finish(args, {**vars(args), "out": str(out)}, outputs, started)
    return 0


def _parse_vector(text: str | None, size: int, default: float, name: str) -> np.ndarray:
    if text is None:
        return np.full(size, default)
    try:
        vec = np.asarray([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigurationError(f"--{name} must be comma-separated numbers") from None
    if vec.shape[0] != size:
        raise ConfigurationError(f"--{name} needs {size} entries, got {vec.shape[0]}")
    return vec


def _cmd_check_id(args) -> int:
    started = time.time()
    out = _ensure_out(args)
    pop = mio.load_population_csv(args.pop)
    j = pop.n_categories
    lam = _parse_vector(args.lam, j, 1.0, "lam")
    p = _parse_vector(args.p, j, 0.5, "p")
    pooled = pop.pool_geos() if pop.n_geos > 1 else pop
    report_global = check_global_id(pooled, lam, p)
    design = (
        mio.load_design_matrices(args.design, pooled)
        if args.design
        else build_default_design(pooled)
    )
    beta = np.zeros(design.Z.shape[1])
    report_local = check_local_id(pooled, design, lam, p, beta)
    payload = {
        "global": dataclasses.asdict(report_global),
        "local": dataclasses.asdict(report_local),
    }
    path = out / "identifiability.json"
    mio.write_report(payload, "identifiability", path)
    _finish(args, {**vars(args), "out": str(out)}, [path], started)
    return 0


def _cmd_estimate(args) -> int:
    started = time.time()
    out = _ensure_out(args)
    pop = mio.load_population_csv(args.pop)
    cases = mio.load_cases_csv(args.cases, pop)
    if pop.n_geos > 1:
        pop = pop.pool_geos()
        cases = cases.pool_geos()
    est = estimate_lambda(pop, cases)
    u = est.u
    payload: dict = {
        "categories": list(pop.categories),
        "v": est.v, "u": est.u, "lam": est.lam, "p": est.p,
    }
    if pop.n_categories == 2:
        e_plus1 = float(pop.counts[:, 0, 0].sum())
        u2 = float(u[1])
        sweep = []
        if u2 > 0:
            for factor in (0.01, 0.1, 0.5, 1.0):
                r1 = factor * e_plus1
                for beta1 in (1, 2):
                    try:
                        ap = approx_posterior_lambda1(
                            pop, cases, u2=u2, r1=r1, alpha1=1.0, beta1=beta1
                        )
                    except MisscountError as exc:
                        sweep.append({"r1": r1, "beta1": beta1, "error": str(exc)})
                        continue
                    sweep.append(
                        {
                            "r1": r1, "beta1": beta1,
                            "mean": ap.mean, "variance": ap.variance, "z": ap.z,
                            "beta_shift": beta_shift_statistic(ap.z),
                        }
                    )
        payload["approx_posterior_sweep"] = sweep
    path = out / "estimates.json"
    mio.write_report(payload, "estimates", path)
    _finish(args, {**vars(args), "out": str(out)}, [path], started)
    return 0


def _cmd_report(args) -> int:
    started = time.time()
    out = _ensure_out(args)
    runs = Path(args.runs)
    rep_dirs = sorted(d for d in runs.glob("rep_*") if d.is_dir())
    if not rep_dirs:
        raise ValidationError(f"no rep_*/ directories under {runs}")
    rows = []
    for rep_dir in rep_dirs:
        truth_path = rep_dir / "truth.json"
        if not truth_path.exists():
            raise ValidationError(f"{rep_dir} lacks truth.json")
        truth = json.loads(truth_path.read_text())["estimands"]
        for fit_dir in sorted(rep_dir.glob("fit_*")):
            est_path = fit_dir / "estimands.json"
            if not est_path.exists():
                continue
            body = json.loads(est_path.read_text())
            for row in body["rows"]:
                name = row["estimand"]
                if name not in truth:
                    continue
                t = truth[name]
                rows.append(
                    {
                        "replicate": rep_dir.name,
                        "method": body["method"],
                        "estimand": name,
                        "truth": t,
                        "bias": row["mean"] - t,
                        "post_sd": row["sd"],
                        "covered_50": float(row["q25"] <= t <= row["q75"]),
                        "length_50": row["q75"] - row["q25"],
                    }
                )
    if not rows:
        raise ValidationError("no fit_*/estimands.json outputs found to aggregate")
    by_key: dict = {}
    for row in rows:
        by_key.setdefault((row["method"], row["estimand"]), []).append(row)
    summary = []
    for (method, estimand), group in sorted(by_key.items()):
        bias = np.asarray([r["bias"] for r in group])
        var = np.asarray([r["post_sd"] for r in group]) ** 2
        summary.append(
            {
                "method": method,
                "estimand": estimand,
                "mean_bias": float(bias.mean()),
                "se_bias": float(bias.std(ddof=1) / np.sqrt(len(group)))
                if len(group) > 1 else float("nan"),
                "mean_mse": float((bias**2 + var).mean()),
                "coverage_50": float(np.mean([r["covered_50"] for r in group])),
                "mean_length_50": float(np.mean([r["length_50"] for r in group])),
                "n_replicates": len(group),
            }
        )
    report_path = out / "metrics.json"
    mio.write_report({"rows": summary}, "metrics", report_path)
    csv_path = out / "metrics.csv"
    import csv as _csv

    with csv_path.open("w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(summary[0].keys()))
        writer.writeheader()
        writer.writerows(summary)
    _finish(args, {**vars(args), "out": str(out)}, [report_path, csv_path], started)
    return 0


def _cmd_check(args) -> int:
    from .exact import (
        CellInstance,
        binomial_miss_lpmf,
        binomial_oracle_lpmf,
        marginal_oracle_lpmf,
    )
    from .model import log_lik_simple
    from .tables import CaseTable, PopulationTable

    started = time.time()
    out = _ensure_out(args)
    rng = derive_rng(args.seed, STREAM_SIMULATE, 0)
    worst_marginal = 0.0
    worst_dp = 0.0
    for _ in range(args.instances):
        j = int(rng.integers(1, 4))
        i = int(rng.integers(1, 4))
        e = rng.integers(1, 16, size=(i, j))
        lam = rng.uniform(0.05, 1.2, size=j)
        p = rng.uniform(0.1, 0.95, size=j)
        x = rng.poisson(0.6, size=(i, j))
        m = int(rng.integers(0, 6))
        total = 0.0
        for row in range(i):
            inst = CellInstance(
                exposures=e[row], lam=lam, p=p, x=x[row],
                m=m if row == 0 else 0,
            )
            total += marginal_oracle_lpmf(inst)
        pop = PopulationTable(
            counts=e[:, None, :],
            strata=tuple(f"F_{k}" for k in range(i)),
            geos=("g",),
            categories=tuple(f"c{k}" for k in range(j)),
        )
        mm = np.zeros((i, 1), dtype=np.int64)
        mm[0, 0] = m
        cases = CaseTable(
            observed=x[:, None, :], missing=mm,
            strata=pop.strata, geos=pop.geos, categories=pop.categories,
        )
        closed = log_lik_simple(pop, cases, lam, p)
        worst_marginal = max(worst_marginal, abs(total - closed))

        theta = rng.uniform(0.05, 0.9, size=j)
        y_dp = np.minimum(x[0], e[0])
        got = binomial_miss_lpmf(y_dp, m, p, theta, e[0])
        want = binomial_oracle_lpmf(y_dp, m, p, theta, e[0])
        worst_dp = max(worst_dp, abs(got - want))
    payload = {
        "instances": args.instances,
        "max_marginalization_gap": worst_marginal,
        "max_dp_gap": worst_dp,
        "pass": bool(worst_marginal < 1e-10 and worst_dp < 1e-9),
    }
    path = out / "check.json"
    mio.write_report(payload, "check", path)
    _finish(args, {**vars(args), "out": str(out)}, [path], started)
    return 0 if payload["pass"] else 2


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "check-id": _cmd_check_id,
    "estimate": _cmd_estimate,
    "report": _cmd_report,
    "check": _cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 64
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, IdentifiabilityError) as exc:
        # rank-deficient inputs are a data problem, not a computation failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
