"""Monte Carlo driver: bias, variance and Wald coverage of the four estimators."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibration import initial_weights, solve_calibration
from .designs import FirstStageDesign
from .estimators import tau_calibrated, tau_iptw, tau_simple
from .glm import fit_logistic_fixed, fit_logistic_random
from .inference import (
    confidence_interval,
    iptw_influence,
    linearization_pieces,
    simple_influence,
    variance_from_influence,
    variance_linearized,
)
from .scenarios import ScenarioSpec, draw_two_stage, gen_population

logger = logging.getLogger(__name__)

DEFAULT_ESTIMATORS = ("simple", "fixed", "random", "calibrated")
KNOWN_ESTIMATORS = DEFAULT_ESTIMATORS + ("calibrated-uniform",)
MAX_FAILURE_RATE = 0.02
TRUTH_NOTE = "finite-population ATE of each replicate's population"
FIXED_TRUTH_NOTE = "finite-population ATE of the fixed population"


def _replicate_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng([seed, rep])


def fixed_population_rng(seed: int) -> np.random.Generator:
    """Stream for the population shared by all replicates in fixed-population mode."""
    return np.random.default_rng([seed, 2**32 - 1, 0])


def _estimate_all(sample, estimators):
    out = {}
    ff = None
    if {"fixed", "calibrated"} & set(estimators):
        ff = fit_logistic_fixed(sample)

    def guarded(name, fn):
        try:
            out[name] = fn()
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            logger.debug("estimator %s failed: %s", name, exc)
            out[name] = (math.nan, math.nan)

    def simple():
        return tau_simple(sample), variance_from_influence(sample, simple_influence(sample))

    def iptw(fit):
        est = tau_iptw(sample, fit.fitted)
        return est, variance_from_influence(sample, iptw_influence(sample, fit.fitted, est))

    def calibrated(source):
        d = initial_weights(ff, sample, source)
        cal = solve_calibration(sample, d)
        est = tau_calibrated(sample, cal)
        return est, variance_linearized(sample, linearization_pieces(sample, cal))

    table = {
        "simple": simple,
        "fixed": lambda: iptw(ff),
        "random": lambda: iptw(fit_logistic_random(sample)),
        "calibrated": lambda: calibrated("fixed-model"),
        "calibrated-uniform": lambda: calibrated("uniform"),
    }
    for name in estimators:
        guarded(name, table[name])
    return out


def run_replicate(spec: ScenarioSpec, rep: int, estimators=DEFAULT_ESTIMATORS,
                  fixed_population: bool = False):
    """One replicate; returns ``(truth, {estimator: (estimate, variance)})``."""
    rng = _replicate_rng(spec.seed, rep)
    if fixed_population:
        pop, design = _fixed_population(spec)
    else:
        pop = gen_population(spec, rng)
        design = None
    sample = draw_two_stage(pop, spec, rng, design=design)
    return pop.finite_population_ate(), _estimate_all(sample, estimators)


_POP_CACHE: dict = {}


def _fixed_population(spec: ScenarioSpec):
    key = (spec.outcome_model, spec.ps_link, spec.M, spec.m, spec.tau, spec.gamma0, spec.gamma1,
           spec.seed)
    if key not in _POP_CACHE:
        _POP_CACHE.clear()
        pop = gen_population(spec, fixed_population_rng(spec.seed))
        _POP_CACHE[key] = (pop, FirstStageDesign.from_sizes(pop.sizes, spec.m))
    return _POP_CACHE[key]


def _job(args):
    spec, rep, estimators, fixed = args
    try:
        return run_replicate(spec, rep, estimators, fixed)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        logger.warning("replicate %d failed: %s", rep, exc)
        return math.nan, {name: (math.nan, math.nan) for name in estimators}


@dataclass(frozen=True)
class EstimatorSummary:
    bias: float
    variance: float
    coverage: float
    mean_variance_estimate: float
    n_ok: int
    failures: int

    def to_dict(self) -> dict:
        return {k: _json_num(v) for k, v in self.__dict__.items()}


def _json_num(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    return None if not math.isfinite(v) else float(v)


@dataclass(frozen=True)
class MonteCarloReport:
    """Aggregated Monte Carlo results.

    ``runtime`` is wall-clock seconds and is left out of :meth:`to_json` so
    that reports are reproducible byte for byte.
    """

    spec: ScenarioSpec
    estimators: dict
    replications: int
    truth: str
    mean_truth: float
    flagged: bool
    fixed_population: bool = False
    runtime: float = field(default=0.0, compare=False)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "replications": self.replications,
            "fixed_population": self.fixed_population,
            "truth": self.truth,
            "mean_truth": _json_num(self.mean_truth),
            "flagged": self.flagged,
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table1_rows(self) -> list[list]:
        """Rows of ``scenario, m, n, estimator, bias, var/1e3, cvg/100``."""
        s = self.spec
        out = []
        for name, e in self.estimators.items():
            out.append([s.number, s.m, s.n, name, f"{e.bias:.2f}",
                        f"{e.variance * 1e3:.0f}", f"{e.coverage * 100:.1f}"])
        return out

    def write_table1_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "m", "n", "estimator", "bias", "var_x1e3", "cvg_x100"])
            w.writerows(self.table1_rows())


def _summarize(truth, est, var) -> EstimatorSummary:
    ok = np.isfinite(est) & np.isfinite(truth)
    n_ok = int(ok.sum())
    if n_ok == 0:
        return EstimatorSummary(math.nan, math.nan, math.nan, math.nan, 0, int(est.size))
    e, t, v = est[ok], truth[ok], var[ok]
    covered = []
    for ei, ti, vi in zip(e, t, v):
        if not (np.isfinite(vi) and vi >= 0):
            covered.append(False)
            continue
        lo, hi = confidence_interval(ei, vi)
        covered.append(lo <= ti <= hi)
    return EstimatorSummary(
        bias=float(np.mean(e - t)),
        variance=float(np.var(e, ddof=1)) if n_ok > 1 else math.nan,
        coverage=float(np.mean(covered)),
        mean_variance_estimate=float(np.nanmean(v)) if np.isfinite(v).any() else math.nan,
        n_ok=n_ok,
        failures=int(est.size - n_ok),
    )


def run_scenario(spec: ScenarioSpec, *, estimators=DEFAULT_ESTIMATORS, workers: int = 1,
                 fixed_population: bool = False) -> MonteCarloReport:
    """Run ``spec.replications`` independent replicates.

    Replicate ``r`` draws from ``numpy.random.default_rng([seed, r])``; in
    ``fixed_population`` mode one population is generated up front and only
    the samples vary. Results are assembled in replicate order, so the report
    does not depend on ``workers``.
    """
    unknown = set(estimators) - set(KNOWN_ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    estimators = tuple(estimators)
    start = time.perf_counter()
    jobs = [(spec, r, estimators, fixed_population) for r in range(spec.replications)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        results = [_job(j) for j in jobs]

    truth = np.array([r[0] for r in results])
    summaries, raw = {}, {"truth": truth}
    for name in estimators:
        est = np.array([r[1][name][0] for r in results])
        var = np.array([r[1][name][1] for r in results])
        raw[name] = (est, var)
        summaries[name] = _summarize(truth, est, var)
    flagged = any(s.failures > MAX_FAILURE_RATE * spec.replications for s in summaries.values())
    if flagged:
        logger.warning("more than %.0f%% of replicates failed", 100 * MAX_FAILURE_RATE)
    return MonteCarloReport(
        spec=spec,
        estimators=summaries,
        replications=spec.replications,
        truth=FIXED_TRUTH_NOTE if fixed_population else TRUTH_NOTE,
        mean_truth=float(np.nanmean(truth)) if np.isfinite(truth).any() else math.nan,
        flagged=flagged,
        fixed_population=fixed_population,
        runtime=time.perf_counter() - start,
        raw=raw,
    )
