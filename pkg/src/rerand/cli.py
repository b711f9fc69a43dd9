"""Command-line entry point: ``rerand {test,bounds,pregen,simulate,calibrate}``.

Exit status is 0 on success, 2 for usage or validation errors and 1 for
runtime failures.  Reports are JSON, tables CSV; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from . import __version__
from .cohort import CohortError, load_cohort, load_schema
from .engine import EngineError, RerandConfig, parse_policy, resolve_workers, run_test
from .minimization import MinimizationParams
from .policy import AdaptiveParams, rule_table, rule_table_csv
from .sim import (
    METHODS,
    STUDY_P_GRID,
    CalibrationError,
    SimScenario,
    calibrate_beta_group,
    metrics_csv,
    run_oracle_study,
    run_study,
)
from .stats import StatError, StatKind
from .store import StoreError, pregenerate

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_OUTCOME_FOR_STAT = {"wald_linear": "continuous", "wald_logistic": "binary", "stratified_logrank": "survival"}


class UsageError(ValueError):
    pass


def _names(text):
    if text is None:
        return None
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _max_reps(text):
    if text is None or text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or 'auto'") from None


def _workers(text):
    if text == "auto":
        return text
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or 'auto'") from None
    if n < 1:
        raise argparse.ArgumentTypeError("expected a positive integer or 'auto'")
    return n


def _seed(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _parse_rows(text):
    """``1000``, ``1000,5000`` or ``start:stop:step`` (inclusive stop)."""
    rows = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            bits = [int(b) for b in part.split(":")]
            if len(bits) != 3 or bits[2] <= 0:
                raise UsageError(f"bad row range {part!r}; expected start:stop:step")
            rows.extend(range(bits[0], bits[1] + 1, bits[2]))
        elif part:
            rows.append(int(part))
    if not rows or min(rows) < 1:
        raise UsageError("rows must be positive integers")
    return rows


def _adaptive_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("adaptive policy")
    g.add_argument("--delta-u", type=float, default=0.1)
    g.add_argument("--delta-l", type=float, default=0.1)
    g.add_argument("--rho-u", type=float, default=0.99)
    g.add_argument("--rho-l", type=float, default=0.99)
    g.add_argument("--batch", type=int, default=1000)
    g.add_argument("--max-reps", type=_max_reps, default="auto", help="l_max, or 'auto' (PR count rounded up to a batch)")


def _adaptive_kwargs(ns) -> dict:
    return dict(delta_u=ns.delta_u, delta_l=ns.delta_l, rho_u=ns.rho_u, rho_l=ns.rho_l,
                batch=ns.batch, l_max=ns.max_reps)


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(out).write_text(text, encoding="utf-8")


def _sidecar(out: str | None, meta: dict) -> None:
    if out is not None:
        Path(out + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load(ns, stat: StatKind | None):
    schema = load_schema(ns.schema)
    outcome = _OUTCOME_FOR_STAT[stat.name] if stat is not None else None
    return load_cohort(ns.data, schema, outcome=outcome)


def _observed_from(path, cohort):
    arms = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=1):
            label = (row.get("arm") or "").strip()
            if label not in cohort.arm_labels:
                raise CohortError(f"{path}: row {i}, column 'arm': unknown arm {label!r}")
            arms[(row.get("id") or "").strip()] = cohort.arm_labels.index(label)
    missing = [s.id for s in cohort.subjects if s.id not in arms]
    if missing:
        raise CohortError(f"{path}: no assignment for subject(s): {', '.join(missing)}")
    return [arms[s.id] for s in cohort.subjects]


# -- subcommands ----------------------------------------------------------------

def cmd_test(ns) -> int:
    stat = StatKind(ns.stat, covariates=_names(ns.covariates), strata=_names(ns.strata))
    policy = parse_policy(ns.policy, **_adaptive_kwargs(ns))
    cohort = _load(ns, stat)
    if ns.assignment:
        cohort = cohort.with_arms(_observed_from(ns.assignment, cohort))
    params = MinimizationParams.for_cohort(cohort, p_best=ns.p_best)
    config = RerandConfig(stat, policy, ns.alpha, ns.seed, resolve_workers(ns.workers), ns.store, params)
    progress = None if ns.quiet else (
        lambda e: _log(f"L={e['L']} m={e['m']} lower={e['lower']} upper={e['upper']} status={e['status']}"))
    report = run_test(cohort, config, progress=progress)
    _write(report.to_json() + "\n", ns.out)
    return EXIT_OK


def cmd_bounds(ns) -> int:
    params = AdaptiveParams(ns.alpha, **_adaptive_kwargs(ns))
    rows = _parse_rows(ns.rows) if ns.rows else None
    _write(rule_table_csv(rule_table(ns.alpha, params, rows)), ns.out)
    _sidecar(ns.out, {"command": "bounds", "adaptive": params.to_dict(), "rows": rows})
    return EXIT_OK


def cmd_pregen(ns) -> int:
    if ns.n <= 0:
        raise UsageError("--n must be positive")
    cohort = _load(ns, None)
    params = MinimizationParams.for_cohort(cohort, p_best=ns.p_best)
    t0 = time.perf_counter()
    meta = {"command": "pregen", "data": str(ns.data), "schema": str(ns.schema), "n": ns.n, "seed": ns.seed,
            "minimization": params.to_dict()}
    store = pregenerate(cohort, params, ns.n, ns.seed, ns.out, extra_metadata={"config": meta})
    _log(f"wrote {store.n_replicates} replicates x {store.n_subjects} subjects to {ns.out} "
         f"in {time.perf_counter() - t0:.2f}s")
    return EXIT_OK


def _scenario(ns) -> SimScenario:
    sc = SimScenario.load(ns.scenario) if ns.scenario else SimScenario()
    if getattr(ns, "full_scale", False):
        sc = sc.full_scale()
    overrides = {}
    for name in ("n_sim", "L_ref", "L_cal"):
        v = getattr(ns, name.lower(), None)
        if v is not None:
            overrides[name] = v
    if overrides:
        sc = SimScenario.from_dict(sc.to_dict() | overrides)
    return sc


def cmd_simulate(ns) -> int:
    methods = _names(ns.methods) or METHODS
    targets = [float(t) for t in _names(ns.targets)] if ns.targets else None
    sc = _scenario(ns)
    if ns.oracle:
        grid = targets or ([sc.target_p] if sc.target_p else list(STUDY_P_GRID))
        metrics = run_oracle_study(grid, methods, sc.alpha, sc.n_sim, ns.seed)
        meta = {"command": "simulate", "oracle": True, "p_grid": list(grid), "methods": list(methods),
                "alpha": sc.alpha, "n_sim": sc.n_sim, "seed": ns.seed}
        _write(metrics_csv(metrics), ns.out)
        _sidecar(ns.out, meta)
        return EXIT_OK
    progress = None if ns.quiet else (lambda d, n: _log(f"dataset {d}/{n}"))
    result = run_study(sc, methods, ns.seed, targets, ns.workers, progress)
    _write(result.to_csv(), ns.out)
    meta = {"command": "simulate", "oracle": False, "targets": targets, "workers": ns.workers} | result.metadata()
    _sidecar(ns.out, meta)
    return EXIT_OK


def cmd_calibrate(ns) -> int:
    sc = _scenario(ns)
    res = calibrate_beta_group(sc, ns.target_p, ns.seed, n_datasets=ns.datasets, L=ns.l, workers=ns.workers)
    out = {
        "beta_group": res.beta_group,
        "p_hat": res.p_hat,
        "steps": res.steps,
        "converged": res.converged,
        "config": {"scenario": sc.to_dict(), "target_p": ns.target_p, "seed": ns.seed, "datasets": ns.datasets,
                   "L": ns.l if ns.l is not None else sc.L_cal},
    }
    _write(json.dumps(out, indent=2, sort_keys=True) + "\n", ns.out)
    _sidecar(ns.out, out["config"] | {"command": "calibrate"})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rerand", description="Re-randomization tests for minimization-randomized trials.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="run a re-randomization test and write a JSON report")
    t.add_argument("--data", required=True, help="cohort CSV (id, factor columns, arm, y or time,event)")
    t.add_argument("--schema", required=True, help="factor/arm schema JSON")
    t.add_argument("--stat", required=True, choices=["wald-linear", "wald-logistic", "stratified-logrank"])
    t.add_argument("--alpha", required=True, type=float)
    t.add_argument("--policy", required=True, help="fixed:L | pr | parametric:L | adaptive")
    t.add_argument("--seed", required=True, type=_seed)
    t.add_argument("--store", help="pre-generated replicate store to read instead of generating")
    t.add_argument("--workers", type=_workers, default=None, help="positive integer or 'auto' (default $RERAND_WORKERS or 1)")
    t.add_argument("--out", help="report path (default stdout)")
    t.add_argument("--strata", help="comma-separated stratum factors for the log-rank")
    t.add_argument("--covariates", help="comma-separated covariate factors for the Wald models")
    t.add_argument("--assignment", help="CSV with id,arm giving the observed assignment")
    t.add_argument("--p-best", type=float, default=0.9, help="minimization biased-coin probability")
    t.add_argument("--quiet", action="store_true", help="no progress lines")
    _adaptive_args(t)
    t.set_defaults(func=cmd_test)

    b = sub.add_parser("bounds", help="print the adaptive stopping-rule table as CSV")
    b.add_argument("--alpha", required=True, type=float)
    b.add_argument("--rows", help="L values: 1000 | 1000,5000 | start:stop:step")
    b.add_argument("--out")
    _adaptive_args(b)
    b.set_defaults(func=cmd_bounds)

    g = sub.add_parser("pregen", help="pre-generate replicate assignments from covariates")
    g.add_argument("--data", required=True)
    g.add_argument("--schema", required=True)
    g.add_argument("--n", required=True, type=int)
    g.add_argument("--seed", required=True, type=_seed)
    g.add_argument("--out", required=True, help="store path; metadata goes to <out>.json")
    g.add_argument("--p-best", type=float, default=0.9)
    g.set_defaults(func=cmd_pregen)

    s = sub.add_parser("simulate", help="run the simulation study and write a metrics CSV")
    s.add_argument("--scenario", help="scenario JSON (default: continuous outcome, desk scale)")
    s.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    s.add_argument("--targets", help="comma-separated target p-values")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--workers", type=_workers, default=None)
    scale = s.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true", help="scenario sizes as given (default)")
    scale.add_argument("--full-scale", action="store_true", help="1,000 datasets, 10^6 reference replicates")
    s.add_argument("--n-sim", type=int)
    s.add_argument("--l-ref", type=int)
    s.add_argument("--l-cal", type=int)
    s.add_argument("--oracle", action="store_true", help="Bernoulli-oracle policy study instead of data")
    s.add_argument("--out")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="find beta_group giving a target p-value")
    c.add_argument("--scenario")
    c.add_argument("--target-p", required=True, type=float)
    c.add_argument("--seed", type=_seed, default=0)
    c.add_argument("--datasets", type=int, default=1, help="calibrate on the mean p-value of this many datasets")
    c.add_argument("--L", dest="l", type=int, help="replicates per dataset (default scenario L_cal)")
    c.add_argument("--workers", type=_workers, default=1)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return ns.func(ns)
    except (CohortError, StatError, UsageError, ValueError, KeyError) as exc:
        print(f"rerand {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StoreError, EngineError, CalibrationError, OSError, RuntimeError) as exc:
        print(f"rerand {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
