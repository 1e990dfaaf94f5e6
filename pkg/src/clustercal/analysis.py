"""Applied workflow: estimate the treatment effect four ways on one sample file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import initial_weights, solve_calibration, solve_calibration_multi
from .estimators import EstimateReport, tau_calibrated, tau_calibrated_multi, tau_iptw, tau_simple
from .frames import SampleFrame, load_sample
from .glm import fit_logistic_fixed, fit_logistic_random, fit_multinomial_fixed
from .inference import (
    balance_table,
    cluster_bootstrap,
    confidence_interval,
    iptw_influence,
    linearization_pieces,
    linearization_pieces_multi,
    simple_influence,
    variance_from_influence,
    variance_linearized,
    variance_linearized_multi,
)

METHODS = ("simple", "fixed", "random", "calibrated")
_REPORT_NAME = {"simple": "simple", "fixed": "iptw-fixed", "random": "iptw-random",
                "calibrated": "calibrated"}


@dataclass(frozen=True)
class AnalysisConfig:
    methods: tuple = METHODS
    bootstrap: int = 500
    seed: int = 0
    level: float = 0.95
    use_design_weights: bool = False
    workers: int = 1


@dataclass
class _Fitted:
    estimate: float
    weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    influence: np.ndarray | None = None
    linearized: float | None = None


def _fit(sample: SampleFrame, method: str, use_design_weights: bool = False) -> _Fitted:
    a = sample.treatment
    w = sample.weight
    if method == "simple":
        return _Fitted(tau_simple(sample), w.copy(), influence=None)
    if method in ("fixed", "random"):
        fit = (fit_logistic_fixed(sample, use_design_weights) if method == "fixed"
               else fit_logistic_random(sample))
        e = fit.fitted
        diag = {"converged": bool(fit.converged), "iterations": int(fit.iterations),
                "min_ehat": float(e.min()), "max_ehat": float(e.max())}
        if method == "random":
            diag["sigma2"] = float(fit.sigma2)
        est = tau_iptw(sample, e)
        return _Fitted(est, w * np.where(a == 1, 1 / e, 1 / (1 - e)), diag,
                       influence=iptw_influence(sample, e, est))
    if method == "calibrated":
        d = initial_weights(fit_logistic_fixed(sample, use_design_weights), sample)
        cal = solve_calibration(sample, d)
        diag = {"converged": bool(cal.converged), "iterations": int(cal.iterations),
                "residual_norm": float(cal.residual_norm),
                "per_cluster_check": float(cal.per_cluster_check),
                "min_ehat": float(cal.ehat.min()), "max_ehat": float(cal.ehat.max()),
                "n_clipped": int(cal.n_clipped)}
        lin = None
        if sample.has_probabilities:
            lin = variance_linearized(sample, linearization_pieces(sample, cal))
        return _Fitted(tau_calibrated(sample, cal), w * cal.alpha, diag, linearized=lin)
    raise ValueError(f"unknown method {method!r}")


def estimate_method(sample: SampleFrame, method: str, use_design_weights: bool = False) -> float:
    """Point estimate only; the closure used by the bootstrap."""
    return _fit(sample, method, use_design_weights).estimate


class _Estimator:
    """Picklable bootstrap closure."""

    def __init__(self, method, use_design_weights):
        self.method, self.use_design_weights = method, use_design_weights

    def __call__(self, sample):
        return estimate_method(sample, self.method, self.use_design_weights)


def _linearized(sample, method, fitted):
    if not sample.has_probabilities:
        return None
    if method == "simple":
        return variance_from_influence(sample, simple_influence(sample))
    if method == "calibrated":
        return fitted.linearized
    return variance_from_influence(sample, fitted.influence)


@dataclass(frozen=True)
class AnalysisResult:
    estimates: list
    balance: object
    config: AnalysisConfig

    def to_dict(self) -> dict:
        return {
            "config": {"methods": list(self.config.methods), "bootstrap": self.config.bootstrap,
                       "seed": self.config.seed, "level": self.config.level,
                       "use_design_weights": self.config.use_design_weights},
            "estimates": [r.to_dict() for r in self.estimates],
            "balance": self.balance.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def analyse_sample(sample: SampleFrame, config: AnalysisConfig = AnalysisConfig()) -> AnalysisResult:
    """Estimates, variances and the balance table for one sample.

    With ``config.bootstrap > 0`` every variance comes from the cluster
    bootstrap; each method uses its own substream of ``config.seed`` so
    adding or removing a method does not change the others. With
    ``bootstrap == 0`` linearized variances are used.
    """
    reports, weights = [], {}
    for k, method in enumerate(config.methods):
        fitted = _fit(sample, method, config.use_design_weights)
        weights[_REPORT_NAME[method]] = fitted.weights
        diag = dict(fitted.diagnostics)
        if config.bootstrap > 0:
            rng = np.random.default_rng([config.seed, METHODS.index(method)])
            boot = cluster_bootstrap(sample, _Estimator(method, config.use_design_weights),
                                     config.bootstrap, rng, workers=config.workers)
            var = boot.variance
            diag.update(variance_method="cluster-bootstrap", bootstrap_replicates=config.bootstrap,
                        bootstrap_dropped=boot.dropped)
        else:
            var = _linearized(sample, method, fitted)
            diag["variance_method"] = "linearized" if var is not None else "none"
        lo = hi = None
        if var is not None:
            lo, hi = confidence_interval(fitted.estimate, var, config.level)
        reports.append(EstimateReport(_REPORT_NAME[method], fitted.estimate, var, lo, hi, diag))
    return AnalysisResult(reports, balance_table(sample, weights), config)


def run_analysis(path: str | Path, config: AnalysisConfig = AnalysisConfig()) -> AnalysisResult:
    return analyse_sample(load_sample(path), config)


def run_multi(sample: SampleFrame, T: int, a: int, a_prime: int, level: float = 0.95) -> EstimateReport:
    """Calibrated contrast between treatment levels ``a`` and ``a_prime``."""
    fit = fit_multinomial_fixed(sample, T)
    cal = solve_calibration_multi(sample, initial_weights(fit, sample), T)
    est = tau_calibrated_multi(sample, cal, a, a_prime)
    diag = {"converged": bool(cal.converged), "iterations": int(cal.iterations),
            "residual_norm": float(cal.residual_norm),
            "per_cluster_check": float(cal.per_cluster_check), "contrast": [a, a_prime]}
    var = lo = hi = None
    if sample.has_probabilities:
        var = variance_linearized_multi(sample, linearization_pieces_multi(sample, cal), None,
                                        a, a_prime)
        lo, hi = confidence_interval(est, var, level)
    return EstimateReport("calibrated-multi", est, var, lo, hi, diag)
