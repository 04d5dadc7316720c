"""Command-line front end.

Subcommands: simulate, fit, replicate, proptest, copula. Results go to
``--output-dir`` as JSON (machine-readable) and CSV (table-shaped).

Exit codes:
    0  all outputs written and every fit converged
    1  unexpected runtime error
    2  invalid usage, configuration or input data
    3  outputs written but some fit did not converge (or could not be solved)
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from functools import partial
from pathlib import Path

from . import __version__
from .copula import (KINDS, INDEPENDENCE, NestedCopula, copula_ps_weights,
                     fit_assessment, fit_mple)
from .frailty import DEFAULT_GAMMA_GRID, build_ps_weights
from .model import FitError, bootstrap_ci, fit_cause_specific, fit_ppsh, write_json
from .schoenfeld import prop_test
from .simgen import ConfigError, SimConfig, replicate, simulate_trial
from .survdata import DataError, load_dataset, save_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2, 3

SIM_FIELDS = ("n", "lambda0", "lambda1", "lambda_c", "tau", "phi", "r_ps")
REPEATABLE = ("gamma", "varsigma1")


class UsageError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _add_common(p, inputs=True):
    p.add_argument("--config", type=Path, help="JSON file of option values; flags win")
    p.add_argument("--output-dir", type=Path, default=Path("."))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    if inputs:
        p.add_argument("--input", type=Path, required=False, help="dataset CSV")


def _add_sim(p):
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--lambda0", type=float, default=0.25)
    p.add_argument("--lambda1", type=float, default=0.2)
    p.add_argument("--lambda-c", dest="lambda_c", type=float, default=0.03)
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--phi", type=float, default=2.0)
    p.add_argument("--r-ps", dest="r_ps", type=float, default=0.5)
    p.add_argument("--frailty-gamma", dest="frailty_gamma", type=float, default=0.5,
                   help="frailty shape of the generating model")
    p.add_argument("--frailty", choices=("gamma", "ig"), default="gamma")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppsh", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one simulated trial as CSV")
    _add_common(p, inputs=False)
    _add_sim(p)

    p = sub.add_parser("fit", help="cause-specific and PPSH fits over a gamma grid")
    _add_common(p)
    p.add_argument("--gamma", type=float, action="append", help="analysis frailty shape (repeatable)")
    p.add_argument("--bootstrap", type=_positive_int, default=0, help="bootstrap replicates B")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--g", choices=("t", "log", "rank"), default="t")

    p = sub.add_parser("replicate", help="Monte Carlo replication of the estimators")
    _add_common(p, inputs=False)
    _add_sim(p)
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--gamma", type=float, action="append")

    p = sub.add_parser("proptest", help="proportionality test with residuals")
    _add_common(p)
    p.add_argument("--gamma", type=float, action="append",
                   help="analysis frailty shape; omit for the cause-specific fit")
    p.add_argument("--g", choices=("t", "log", "rank"), default="t")

    p = sub.add_parser("copula", help="copula dependence fit and copula-weighted PPSH fits")
    _add_common(p)
    p.add_argument("--copula", choices=KINDS, default="clayton")
    p.add_argument("--varsigma1", type=float, action="append")
    p.add_argument("--bootstrap", type=_positive_int, default=0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--per-arm", action="store_true", help="per-arm instead of pooled marginals")
    return parser


def _parse(parser: argparse.ArgumentParser, argv):
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    allowed = set(vars(args)) - {"command", "config"}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    for key in ("input", "output_dir"):
        if key in cfg:
            cfg[key] = Path(cfg[key])
    repeated = {}
    for key in REPEATABLE:
        if key in cfg:
            value = cfg.pop(key)
            repeated[key] = value if isinstance(value, list) else [value]
    # file values become the subcommand's defaults, so explicit flags still win
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparsers.choices[args.command].set_defaults(**cfg)
    args = parser.parse_args(argv)
    for key, value in repeated.items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    return args


def _sim_config(args) -> SimConfig:
    values = {k: getattr(args, k) for k in SIM_FIELDS}
    return SimConfig(**values, gamma=args.frailty_gamma, frailty_family=args.frailty,
                     seed=args.seed)


def _load(args):
    if args.input is None:
        raise UsageError("--input is required")
    return load_dataset(args.input)


def _outdir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prop_p(ds, weights, fit, g):
    try:
        return prop_test(ds, weights, fit, g).p_value
    except ArithmeticError:
        return None


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    ds = simulate_trial(cfg)
    out = _outdir(args)
    save_dataset(ds, out / "dataset.csv")
    write_json(cfg.to_dict(), out / "simulate_config.json")
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = _load(args)
    ds.require_both_arms()
    grid = args.gamma or list(DEFAULT_GAMMA_GRID)
    rows = []
    ok = True

    cs = fit_cause_specific(ds)
    ok &= cs.converged
    lo, hi = cs.wald_ci(args.level)
    rows.append({"method": "cause-specific", "gamma_tilde": None, "log_hr": float(cs.beta[0]),
                 "hr": cs.hr, "ci_low": math.exp(lo), "ci_high": math.exp(hi), "ci": "wald",
                 "prop_p": _prop_p(ds, _uniform(ds), cs, args.g), "converged": cs.converged})

    for g in grid:
        weights = build_ps_weights(ds, g)
        fit = fit_ppsh(ds, weights)
        ok &= fit.converged
        row = {"method": "ppsh", "gamma_tilde": g, "log_hr": float(fit.beta[0]), "hr": fit.hr,
               "ci_low": None, "ci_high": None, "ci": None,
               "prop_p": _prop_p(ds, weights, fit, args.g), "converged": fit.converged}
        if args.bootstrap:
            boot = bootstrap_ci(ds, g, B=args.bootstrap, level=args.level, seed=args.seed,
                                workers=args.workers)
            row.update(ci_low=math.exp(boot.ci_low), ci_high=math.exp(boot.ci_high),
                       ci="bootstrap-percentile", bootstrap_dropped=boot.dropped)
        rows.append(row)

    report = {"input": str(args.input), "n": len(ds), "events": int(ds.has_event.sum()),
              "level": args.level, "bootstrap": args.bootstrap, "g": args.g, "seed": args.seed,
              "rows": rows}
    write_json(report, _outdir(args) / "fit.json")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def _uniform(ds):
    from .frailty import PsWeightTable
    return PsWeightTable.uniform(ds)


def cmd_replicate(args) -> int:
    cfg = _sim_config(args)
    grid = args.gamma or [0.5, 2.0, 5.0]
    rep = replicate(cfg, args.replicates, grid, seed=args.seed, workers=args.workers)
    out = _outdir(args)
    rep.write_json(out / "replication.json")
    rep.write_csv(out / "replication.csv")
    failed = any(m["failed"] for m in rep.methods)
    return EXIT_NONCONVERGED if failed else EXIT_OK


def cmd_proptest(args) -> int:
    ds = _load(args)
    if args.gamma and len(args.gamma) > 1:
        raise UsageError("proptest takes at most one --gamma")
    if args.gamma:
        weights = build_ps_weights(ds, args.gamma[0])
    else:
        weights = _uniform(ds)
    fit = fit_ppsh(ds, weights)
    res = prop_test(ds, weights, fit, args.g)
    out = _outdir(args)
    doc = {"gamma_tilde": args.gamma[0] if args.gamma else None, "fit": fit.to_dict(),
           **res.to_dict()}
    write_json(doc, out / "proptest.json")
    res.write_residuals(out / "schoenfeld.csv")
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def _copula_estimate(sample, nc, per_arm):
    return fit_ppsh(sample, copula_ps_weights(sample, nc, per_arm=per_arm))


def cmd_copula(args) -> int:
    ds = _load(args)
    ds.require_both_arms()
    out = _outdir(args)
    mple = fit_mple(ds, args.copula, per_arm=args.per_arm, bootstrap=args.bootstrap,
                    seed=args.seed, workers=args.workers)
    write_json(mple.to_dict(), out / "copula_mple.json")
    fit_assessment(ds, mple.family).to_csv(out / "copula_fit_assessment.csv")

    s0 = mple.varsigma
    grid = args.varsigma1 or [s0, 2.0, 3.0, 5.0, 8.0]
    indep = INDEPENDENCE[args.copula]
    pairs = [(indep, indep)] + [(s0, s1) for s1 in grid]
    ok = True

    cs = fit_cause_specific(ds)
    ok &= cs.converged
    lo, hi = cs.wald_ci(args.level)
    rows = [{"method": "cause-specific", "varsigma0": None, "varsigma1": None, "hr": cs.hr,
             "ci_low": math.exp(lo), "ci_high": math.exp(hi), "ci": "wald",
             "converged": cs.converged}]
    for v0, v1 in pairs:
        row = {"method": "ppsh-copula", "varsigma0": v0, "varsigma1": v1}
        try:
            nc = NestedCopula(v0, v1, args.copula)
        except ValueError as exc:
            rows.append({**row, "skipped": str(exc)})
            continue
        fit = _copula_estimate(ds, nc, args.per_arm)
        ok &= fit.converged
        row.update(hr=fit.hr, ci_low=None, ci_high=None, ci=None, converged=fit.converged)
        if args.bootstrap:
            est = partial(_copula_estimate, nc=nc, per_arm=args.per_arm)
            boot = bootstrap_ci(ds, B=args.bootstrap, level=args.level, seed=args.seed,
                                workers=args.workers, estimator=est)
            row.update(ci_low=math.exp(boot.ci_low), ci_high=math.exp(boot.ci_high),
                       ci="bootstrap-percentile", bootstrap_dropped=boot.dropped)
        rows.append(row)
    write_json({"input": str(args.input), "family": args.copula, "varsigma0_hat": s0,
                "per_arm": args.per_arm, "rows": rows}, out / "copula_ps.json")
    return EXIT_OK if ok else EXIT_NONCONVERGED


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "replicate": cmd_replicate,
            "proptest": cmd_proptest, "copula": cmd_copula}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        if args.workers < 0:
            raise UsageError("--workers must be >= 0")
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ppsh: error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError, DataError, ValueError) as exc:
        print(f"ppsh: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, ArithmeticError) as exc:
        print(f"ppsh: fit failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except Exception as exc:  # noqa: BLE001
        print(f"ppsh: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
