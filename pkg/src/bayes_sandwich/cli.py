"""Command-line front end.

Subcommands
-----------
``fit``       fit a model to CSV data and print the six-column comparison of
              frequentist and Bayesian standard errors.
``simulate``  run a simulation grid (or one inline scenario) and print one
              summary row per scenario.
``kl-point``  print the minimal-KL point of the working model for a scenario.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Reports go to stdout (or ``--output``); warnings and progress go to stderr.
Every long option can also be set in a ``--config`` file of ``key = value``
lines; command-line flags override the file.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import io
from .errors import BrseError, DataError, NumericalError
from .frequentist import fit_mle
from .models import Family, ModelSpec
from .posterior import McmcConfig, PriorSpec, sample_posterior, write_draws_csv
from .robust import compute_brse
from .simulation import (
    COVARIATE_LAWS,
    GRID_NAMES,
    KINDS,
    DgpSpec,
    SimConfig,
    default_workers,
    grid,
    kl_point,
    run_scenario,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _add_output(p: argparse.ArgumentParser):
    p.add_argument("--format", choices=io.FORMATS, default="markdown", help="report format")
    p.add_argument("--output", help="write the report here (atomically) instead of stdout")
    p.add_argument("--config", help="file of key = value lines supplying option defaults")


def _add_mcmc(p: argparse.ArgumentParser, chains: int, n_iter: int, burnin: int):
    p.add_argument("--chains", type=int, default=chains)
    p.add_argument("--iter", type=int, default=n_iter, help="iterations per chain, burn-in included")
    p.add_argument("--burnin", type=int, default=burnin)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.95)


def _add_scenario(p: argparse.ArgumentParser):
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--a", type=float, default=0.0, help="quadratic coefficient")
    p.add_argument("--kappa", type=float, default=1.0, help="Weibull shape")
    p.add_argument("--beta", type=float, default=0.0, help="Weibull log hazard ratio")
    p.add_argument("--censor-time", type=float, default=10.0)
    p.add_argument("--covariate-law", choices=COVARIATE_LAWS, default="uniform",
                   help="Weibull PH covariate distribution")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bayes-sandwich", description="Bayesian robust standard errors.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    fit = sub.add_parser("fit", help="fit a model to CSV data")
    fit.add_argument("data", nargs="?", help="CSV file with a header row")
    fit.add_argument("--model", choices=[f.value for f in Family], default="linear")
    fit.add_argument("--outcome")
    fit.add_argument("--average", type=_csv_list, default=[],
                     help="comma-separated columns whose row mean is the outcome")
    fit.add_argument("--covariates", type=_csv_list, default=[], help="comma-separated column names")
    fit.add_argument("--no-intercept", action="store_true")
    fit.add_argument("--event", help="event indicator column (exp_ph)")
    fit.add_argument("--time", help="observed time column (exp_ph)")
    fit.add_argument("--assumed-variance", type=float, default=1.0, help="known variance (normal_mean)")
    fit.add_argument("--beta-mean", type=float, default=0.0)
    fit.add_argument("--beta-var", type=float, default=1e3)
    fit.add_argument("--sigma2-shape", type=float, default=0.01)
    fit.add_argument("--sigma2-rate", type=float, default=0.01)
    fit.add_argument("--credible", choices=("normal", "quantile"), default="normal")
    fit.add_argument("--strict", action="store_true", help="fail on non-numeric cells instead of dropping rows")
    fit.add_argument("--draws", help="also write retained posterior draws to this CSV")
    _add_mcmc(fit, 3, 30000, 18000)
    _add_output(fit)

    sim = sub.add_parser("simulate", help="run a simulation grid or a single scenario")
    sim.add_argument("--grid", choices=GRID_NAMES)
    _add_scenario(sim)
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--workers", type=int, default=None,
                     help="worker processes (default: $BRSE_WORKERS or 1)")
    sim.add_argument("--kl-method", choices=("monte_carlo", "quadrature"), default="monte_carlo")
    sim.add_argument("--replicates", help="also write per-replicate results to this CSV")
    _add_mcmc(sim, 1, 6000, 1000)
    _add_output(sim)

    kl = sub.add_parser("kl-point", help="minimal-KL point of the working model")
    _add_scenario(kl)
    kl.add_argument("--method", choices=("monte_carlo", "quadrature"), default="monte_carlo")
    kl.add_argument("--n-oracle", type=int, default=None, help="rows in the Monte Carlo oracle")
    kl.add_argument("--seed", type=int, default=20240101)
    _add_output(kl)
    parser.subcommands = {"fit": fit, "simulate": sim, "kl-point": kl}
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required: fit, simulate or kl-point")
    if not getattr(args, "config", None):
        return args
    sub = parser.subcommands[args.command]
    known = {a.dest: a for a in sub._actions}
    settings = io.read_config(args.config)
    defaults = {}
    for key, value in settings.items():
        if key not in known or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _flag(value)
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r}: invalid value {value!r}") from None
        else:
            defaults[key] = value
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} is not one of {list(action.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _emit(text: str, output) -> None:
    if output:
        io.atomic_write(output, text)
    else:
        sys.stdout.write(text)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _mcmc(args) -> McmcConfig:
    return McmcConfig(n_chains=args.chains, n_iter=args.iter, n_burnin=args.burnin,
                      thin=args.thin, seed=args.seed)


def cmd_fit(args) -> int:
    if not args.data:
        raise UsageError("fit needs a data file")
    family = Family(args.model)
    if family is Family.EXP_PH:
        formula = io.Formula(covariates=args.covariates, intercept=not args.no_intercept,
                             event=args.event, time=args.time)
    else:
        formula = io.Formula(outcome=args.outcome, covariates=args.covariates,
                             intercept=not args.no_intercept, average=args.average)
    if family is Family.NORMAL_MEAN and (formula.covariates or not formula.intercept):
        raise UsageError("normal_mean takes no covariates")
    model = ModelSpec(family, args.assumed_variance) if family is Family.NORMAL_MEAN else ModelSpec(family)
    cfg = _mcmc(args)
    prior = PriorSpec(args.beta_mean, args.beta_var, args.sigma2_shape, args.sigma2_rate)

    ingested = io.ingest_csv(args.data, formula, strict=args.strict)
    if ingested.n_dropped:
        _warn(f"dropped {ingested.n_dropped} row(s) with missing or non-numeric values")
        for msg in ingested.messages:
            _warn(msg)
    data = ingested.data
    fit = fit_mle(model, data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sample = sample_posterior(model, prior, data, cfg, fit=fit)
    res = compute_brse(model, sample, data, level=args.level, credible=args.credible)
    if not res.valid:
        raise NumericalError(res.error)
    for msg in sample.diagnostics.get("warnings", ()):
        _warn(msg)
    settings = {
        "chains": cfg.n_chains, "iterations": cfg.n_iter, "burn_in": cfg.n_burnin,
        "thin": cfg.thin, "seed": cfg.seed, "retained_draws": sample.S,
        "prior": _describe_prior(model, prior),
    }
    report = io.FitReport(
        family=family, terms=ingested.term_names, n=data.n, n_dropped=ingested.n_dropped,
        estimate=fit.theta_mle, model_se=fit.model_se, robust_se=fit.robust_se,
        bayes_estimate=res.d_hat, post_sd=res.post_sd, brse=res.brse, level=args.level,
        credible=np.array([iv.credible for iv in res.intervals]),
        robust_interval=np.array([iv.robust for iv in res.intervals]),
        diagnostics=_diagnostics_for_report(sample.diagnostics), settings=settings,
    )
    _emit(io.render_fit_report(report, args.format), args.output)
    if args.draws:
        write_draws_csv(sample, args.draws)
    return EXIT_OK


def _describe_prior(model: ModelSpec, prior: PriorSpec) -> str:
    text = f"beta_j ~ N({prior.beta_mean:g}, {prior.beta_var:g})"
    if model.has_sigma2:
        text += f"; sigma2 ~ InvGamma({prior.sigma2_shape:g}, {prior.sigma2_rate:g})"
    return text


def _diagnostics_for_report(diag: dict) -> dict:
    keep = ("rhat", "ess", "rhat_sigma2", "ess_sigma2", "acceptance_rate", "warnings")
    return {k: diag[k] for k in keep if k in diag}


def _scenarios(args) -> list[DgpSpec]:
    if args.grid and args.kind:
        raise UsageError("give either --grid or --kind, not both")
    if args.grid:
        return grid(args.grid, covariate_law=args.covariate_law)
    if not args.kind:
        raise UsageError("simulate needs --grid or --kind")
    return [_inline_dgp(args)]


def _inline_dgp(args) -> DgpSpec:
    if args.kind == "weibull_ph":
        return DgpSpec(args.kind, args.n, kappa=args.kappa, beta=(0.0, args.beta),
                       censor_time=args.censor_time, covariate_law=args.covariate_law)
    return DgpSpec(args.kind, args.n, a=args.a, covariate_law=args.covariate_law)


def cmd_simulate(args) -> int:
    specs = _scenarios(args)
    mcmc = _mcmc(args)
    workers = default_workers() if args.workers is None else args.workers
    if workers < 1:
        raise UsageError("--workers must be at least 1")
    reports = []
    for k, dgp in enumerate(specs, start=1):
        print(f"[{k}/{len(specs)}] {dgp.scenario_id}", file=sys.stderr)
        cfg = SimConfig(dgp, n_reps=args.reps, mcmc=replace(mcmc, seed=0), seed=args.seed,
                        level=args.level, kl_method=args.kl_method)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = run_scenario(cfg, workers=workers, keep_replicates=bool(args.replicates))
        if rep.n_failed_reps:
            _warn(f"{dgp.scenario_id}: {rep.n_failed_reps} of {rep.n_reps} replicates failed")
        if not rep.valid:
            _warn(f"{dgp.scenario_id}: too many failed replicates; row marked invalid")
        reports.append(rep)
    _emit(io.render_sim_reports(reports, args.format), args.output)
    if args.replicates:
        io.atomic_write(args.replicates, io.render_replicates(reports))
    return EXIT_OK


def cmd_kl_point(args) -> int:
    if not args.kind:
        raise UsageError("kl-point needs --kind")
    dgp = _inline_dgp(args)
    kp = kl_point(dgp, method=args.method, n_oracle=args.n_oracle, seed=args.seed)
    se = kp.mc_se if kp.mc_se is not None else np.full(2, np.nan)
    header = ("scenario", "method", "intercept", "slope", "mc_se_intercept", "mc_se_slope")
    row = [dgp.scenario_id, kp.method, kp.value[0], kp.value[1], se[0], se[1]]
    _emit(io.render_table(header, [row], args.format), args.output)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "kl-point": cmd_kl_point}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(build_parser(), argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
