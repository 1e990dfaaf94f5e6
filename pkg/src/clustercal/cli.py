"""Command-line entry point ``clustercal``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .analysis import METHODS, AnalysisConfig, analyse_sample, run_multi
from .errors import DomainError, InfeasibleError, LoadError, ScenarioConfigError
from .frames import load_sample, write_sample
from .montecarlo import DEFAULT_ESTIMATORS, KNOWN_ESTIMATORS, run_scenario
from .scenarios import ScenarioSpec, synthetic_sample


def _write(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _spec(args) -> ScenarioSpec:
    extra = {k: getattr(args, k) for k in ("gamma0", "gamma1", "tau") if getattr(args, k) is not None}
    return ScenarioSpec.scenario(args.scenario, m=args.m, n=args.n, M=args.pop_clusters,
                                 seed=args.seed, **extra)


def cmd_simulate(args) -> int:
    estimators = tuple(args.estimators.split(",")) if args.estimators else DEFAULT_ESTIMATORS
    spec = _spec(args).with_(replications=args.reps)
    report = run_scenario(spec, estimators=estimators, workers=args.workers,
                          fixed_population=args.fixed_population)
    _write(report.to_json(), args.out)
    if args.csv:
        report.write_table1_csv(args.csv)
    logging.getLogger(__name__).info("simulation finished in %.1fs", report.runtime)
    return 0


def cmd_sample(args) -> int:
    spec = _spec(args)
    write_sample(synthetic_sample(spec, args.seed), args.out)
    return 0


def cmd_estimate(args) -> int:
    methods = METHODS if args.method == "all" else (args.method,)
    config = AnalysisConfig(methods=methods, bootstrap=args.bootstrap, seed=args.seed,
                            level=args.level, use_design_weights=args.weighted_step0,
                            workers=args.workers)
    result = analyse_sample(load_sample(args.data), config)
    _write(result.to_json(), args.out)
    if args.balance_csv:
        result.balance.write_csv(args.balance_csv)
    return 0


def cmd_balance(args) -> int:
    table = analyse_sample(load_sample(args.data), AnalysisConfig(bootstrap=0)).balance
    _write(_dump(table.to_dict()), args.out)
    if args.csv:
        table.write_csv(args.csv)
    return 0


def cmd_multi(args) -> int:
    try:
        a, b = (int(v) for v in args.contrast.split(","))
    except ValueError:
        raise DomainError(f"--contrast must look like 1,2, got {args.contrast!r}") from None
    sample = load_sample(args.data, levels=args.levels)
    report = run_multi(sample, args.levels, a, b, args.level)
    _write(_dump(report.to_dict()), args.out)
    return 0


def _add_scenario_args(p, reps: bool) -> None:
    p.add_argument("--scenario", type=int, choices=range(1, 7), default=1)
    p.add_argument("--m", type=int, default=50, help="clusters sampled")
    p.add_argument("--n", type=int, default=50, help="expected units per sampled cluster")
    if reps:
        p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pop-clusters", type=int, default=2000, help="population clusters M")
    p.add_argument("--gamma0", type=float)
    p.add_argument("--gamma1", type=float)
    p.add_argument("--tau", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustercal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo study of one scenario")
    _add_scenario_args(p, reps=True)
    p.add_argument("--out", default="-")
    p.add_argument("--csv", help="also write a Table-1 style CSV here")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--estimators", help=f"comma list from {','.join(KNOWN_ESTIMATORS)}")
    p.add_argument("--fixed-population", action="store_true",
                   help="draw every replicate sample from one population")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sample", help="write one synthetic two-stage sample as CSV")
    _add_scenario_args(p, reps=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("estimate", help="estimate the treatment effect on a sample file")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=(*METHODS, "all"), default="all")
    p.add_argument("--bootstrap", type=int, default=500,
                   help="cluster bootstrap replicates; 0 uses linearized variances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--weighted-step0", action="store_true",
                   help="fit the working propensity model with design weights")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--balance-csv")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("balance", help="standardized mean differences by cluster")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("multi-estimate", help="calibrated contrast for a multi-level treatment")
    p.add_argument("--data", required=True)
    p.add_argument("--levels", type=int, required=True, help="number of treatment levels T")
    p.add_argument("--contrast", required=True, help="a,a'")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_multi)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LoadError, DomainError, InfeasibleError, ScenarioConfigError) as exc:
        print(f"clustercal: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
