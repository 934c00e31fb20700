"""Command-line interface: fit, predict, and simulate subcommands.

Exit codes: 0 success, 2 usage or contract errors (one-line diagnostic on
stderr), 3 non-convergence (the table is still printed, with a warning).
Machine-readable output (model files, CSV) carries 17 significant digits;
tables carry 7.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .data import build_hierarchy, declare_survival, load_csv, write_csv
from .errors import MlsurvError, ModelSpecError
from .estimation import fit as fit_model, report
from .model import ModelSpec, RandomEquation, TvcSpec
from .modelfile import load_model, save_model
from .prediction import PredictionRequest, predict
from .quadrature import IntegrationSettings
from .random_effects import REDistribution
from .simulate import SimSpec, simulate_clustered

_DIST_ALIASES = {
    "exponential": "exponential",
    "weibull": "weibull",
    "gompertz": "gompertz",
    "rp": "rp",
    "rcs": "rcs_loghazard",
    "rcs_loghazard": "rcs_loghazard",
}


def _split_list(text: str) -> list[str]:
    return [tok for tok in (s.strip() for s in text.split(",")) if tok]


def _parse_re(text: str) -> RandomEquation:
    if ":" not in text:
        raise ModelSpecError(
            f"--re takes 'level: vars [noconstant]', got {text!r}"
        )
    level, right = text.split(":", 1)
    tokens = right.replace(",", " ").split()
    intercept = True
    vars_ = []
    for tok in tokens:
        if tok.lower() in ("noconstant", "nocons", "noc"):
            intercept = False
        else:
            vars_.append(tok)
    return RandomEquation(level.strip(), tuple(vars_), intercept)


def _parse_assignments(text: str) -> dict:
    out = {}
    for part in _split_list(text):
        if "=" not in part:
            raise ModelSpecError(f"expected name=value, got {part!r}")
        name, value = part.split("=", 1)
        out[name.strip()] = float(value)
    return out


def _parse_dftvc(text: str, tvc_vars: list[str]) -> dict:
    if "=" not in text:
        df = int(text)
        return {v: df for v in tvc_vars}
    out = {}
    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        name, value = part.split("=", 1)
        out[name.strip()] = int(value)
    return out


def _parse_knotstvc(text: str) -> dict:
    out = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ModelSpecError(f"--knotstvc takes 'var=t1,t2;...', got {part!r}")
        name, values = part.split("=", 1)
        out[name.strip()] = tuple(float(v) for v in _split_list(values))
    return out


def _parse_times(text: str) -> tuple[float, ...]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ModelSpecError(f"--times takes start:stop:step, got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ModelSpecError(f"invalid time grid {text!r}")
    return tuple(np.arange(start, stop + step * 0.5, step))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlsurv",
        description="Multilevel mixed-effects parametric survival models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model and write a model file")
    p_fit.add_argument("--data", required=True, help="input CSV")
    p_fit.add_argument("--time", required=True, help="exit-time column")
    p_fit.add_argument("--event", required=True, help="event-indicator column")
    p_fit.add_argument("--entry", help="entry-time column (delayed entry)")
    p_fit.add_argument("--bhazard", help="expected mortality rate column (relative survival)")
    p_fit.add_argument("--fixed", default="", help="comma-separated fixed covariates")
    p_fit.add_argument(
        "--re",
        action="append",
        default=[],
        metavar="'level: vars [noconstant]'",
        help="random-effects equation, repeatable, highest level first",
    )
    p_fit.add_argument("--distribution", default="weibull", help="exponential|weibull|gompertz|rp|rcs")
    p_fit.add_argument("--df", type=int, default=3)
    p_fit.add_argument("--knots", help="interior knots on the time scale, comma-separated")
    p_fit.add_argument("--tvc", default="", help="covariates with time-dependent effects")
    p_fit.add_argument("--dftvc", default="1", help="df for tvc terms: '2' or 'var=2;var2=1'")
    p_fit.add_argument("--knotstvc", help="interior tvc knots: 'var=t1,t2;var2=...'")
    p_fit.add_argument("--covariance", default="", help="per-level structure(s), comma-separated")
    p_fit.add_argument("--intmethod", default="mvaghermite", help="mvaghermite|ghermite|mcarlo")
    p_fit.add_argument("--intpoints", type=int, help="integration points (7; mcarlo 150)")
    p_fit.add_argument("--adapt-iterations", type=int, default=1001)
    p_fit.add_argument("--adapt-tolerance", type=float, default=1e-8)
    p_fit.add_argument("--redist", default="gaussian", help="gaussian|t")
    p_fit.add_argument("--tdf", type=float, help="degrees of freedom for t random effects")
    p_fit.add_argument("--level", type=float, default=95.0)
    p_fit.add_argument("--zeros", action="store_true", help="start all parameters at zero")
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--maxiter", type=int, default=300)
    p_fit.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker threads (results are identical regardless)")
    p_fit.add_argument("--out", help="write the fitted model file here")

    p_pred = sub.add_parser("predict", help="predictions from a model file")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--kind", required=True,
                        help="eta|hazard|survival|chazard|cif|rmst|timelost")
    p_pred.add_argument("--data", help="CSV with covariate/time rows")
    p_pred.add_argument("--at", default="", help="covariate overrides 'age=45,female=1'")
    p_pred.add_argument("--fixedonly", action="store_true")
    p_pred.add_argument("--marginal", action="store_true")
    p_pred.add_argument("--ci", action="store_true")
    p_pred.add_argument("--timevar", help="time column in --data")
    p_pred.add_argument("--times", help="explicit grid start:stop:step")
    p_pred.add_argument("--level", type=float, default=95.0)
    p_pred.add_argument("--out", help="output CSV (default: stdout)")

    p_sim = sub.add_parser("simulate", help="simulate clustered survival data")
    p_sim.add_argument("--clusters", type=int, required=True)
    p_sim.add_argument("--per-cluster", type=int, required=True)
    p_sim.add_argument("--dist", default="weibull", help="exponential|weibull|gompertz")
    p_sim.add_argument("--lambda", dest="lam", type=float, required=True)
    p_sim.add_argument("--gamma", type=float, default=1.0)
    p_sim.add_argument("--beta", default="", help="fixed effects 'trt=-0.5,x=0.2'")
    p_sim.add_argument("--re-sd", type=float, default=0.0)
    p_sim.add_argument("--re-var", default="_cons",
                       help="covariate the random effect loads on (default: intercept)")
    p_sim.add_argument("--maxt", type=float, required=True)
    p_sim.add_argument("--seed", type=int, default=1)
    p_sim.add_argument("--out", help="output CSV (default: stdout)")
    return parser


def _cmd_fit(args) -> int:
    dist = _DIST_ALIASES.get(args.distribution)
    if dist is None:
        raise ModelSpecError(f"unknown distribution {args.distribution!r}")
    fixed = tuple(_split_list(args.fixed))
    tvc_vars = _split_list(args.tvc)
    dftvc = _parse_dftvc(args.dftvc, tvc_vars)
    knotstvc = _parse_knotstvc(args.knotstvc) if args.knotstvc else {}
    tvc = tuple(
        TvcSpec(v, df=dftvc.get(v, 1), knots=knotstvc.get(v)) for v in tvc_vars
    )
    random = tuple(_parse_re(s) for s in args.re)
    covariance = tuple(_split_list(args.covariance))
    redist_kind = {"gaussian": "gaussian", "t": "student_t", "student_t": "student_t"}.get(args.redist)
    if redist_kind is None:
        raise ModelSpecError(f"unknown random-effect distribution {args.redist!r}")
    spec = ModelSpec(
        distribution=dist,
        fixed=fixed,
        df=args.df,
        knots=tuple(float(k) for k in _split_list(args.knots)) if args.knots else None,
        tvc=tvc,
        random=random,
        covariance=covariance,
        re_distribution=REDistribution(redist_kind, args.tdf),
    )
    settings = IntegrationSettings(
        method=args.intmethod,
        points=args.intpoints,
        adapt_iterations=args.adapt_iterations,
        adapt_tolerance=args.adapt_tolerance,
        seed=args.seed,
    )

    schema = {args.time: "time", args.event: "event"}
    if args.entry:
        schema[args.entry] = "entry"
    if args.bhazard:
        schema[args.bhazard] = "rate"
    for v in fixed:
        schema[v] = "covariate"
    for eq in random:
        for v in eq.vars:
            schema.setdefault(v, "covariate")
        schema[eq.level] = "level"
    ds = load_csv(args.data, schema)
    ds = declare_survival(ds, args.time, args.event, args.entry, args.bhazard)
    if random:
        ds = build_hierarchy(ds, tuple(eq.level for eq in random))

    fitted = fit_model(
        ds, spec, settings,
        zeros=args.zeros, maxiter=args.maxiter, verbose=True, level=args.level,
    )
    print()
    print(report(fitted, level=args.level))
    if args.out:
        save_model(fitted, args.out)
    return 0 if fitted.convergence.converged else 3


def _cmd_predict(args) -> int:
    fitted = load_model(args.model)
    if (args.times is None) == (args.timevar is None):
        raise ModelSpecError("pass exactly one of --times or --timevar")
    at = _parse_assignments(args.at) if args.at else {}
    data = None
    times = None
    if args.times is not None:
        times = _parse_times(args.times)
    else:
        if not args.data:
            raise ModelSpecError("--timevar needs --data")
        from .prediction import _model_covariates

        schema = {c: "covariate" for c in _model_covariates(fitted) if c not in at}
        schema[args.timevar] = "covariate"
        data = load_csv(args.data, schema)
    request = PredictionRequest(
        kind=args.kind,
        at=at,
        fixedonly=args.fixedonly,
        marginal=args.marginal,
        timevar=args.timevar,
        times=times,
        ci=args.ci,
        level=args.level,
    )
    result = predict(fitted, data, request)

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        header = ["rowid", "estimate"] + (["lci", "uci"] if args.ci else [])
        writer.writerow(header)
        for i in range(result.estimate.shape[0]):
            row = [int(result.rowid[i]), format(result.estimate[i], ".17g")]
            if args.ci:
                row += [format(result.lci[i], ".17g"), format(result.uci[i], ".17g")]
            writer.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_simulate(args) -> int:
    spec = SimSpec(
        family={"exponential": "exponential", "weibull": "weibull", "gompertz": "gompertz"}.get(
            args.dist, args.dist
        ),
        lam=args.lam,
        gamma=args.gamma,
        max_time=args.maxt,
        seed=args.seed,
    )
    betas = _parse_assignments(args.beta) if args.beta else {}
    if args.re_sd < 0:
        raise ModelSpecError("--re-sd must be nonnegative")
    sigma = np.array([[args.re_sd**2]])
    ds = simulate_clustered(
        args.clusters, args.per_cluster, betas, sigma, (args.re_var,), spec
    )
    if args.out:
        write_csv(ds, args.out)
    else:
        write_csv(ds, sys.stdout)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "predict":
            return _cmd_predict(args)
        return _cmd_simulate(args)
    except MlsurvError as exc:
        print(f"mlsurv: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"mlsurv: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
