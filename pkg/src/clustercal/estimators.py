"""Average-treatment-effect point estimators for two-stage samples."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationResult
from .errors import ConvergenceError, DomainError
from .frames import SampleFrame, n_hat

logger = logging.getLogger(__name__)

ESTIMATORS = ("simple", "iptw-fixed", "iptw-random", "calibrated", "aiptw", "calibrated-multi")


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    estimate: float
    variance: float | None = None
    ci_lower: float | None = None
    ci_upper: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.ci_lower is None) != (self.ci_upper is None):
            raise DomainError("give both confidence bounds or neither")
        if self.ci_lower is not None and not self.ci_lower <= self.estimate <= self.ci_upper:
            raise DomainError("confidence interval does not bracket the estimate")

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None or not math.isfinite(v) else float(v)
        return {
            "estimator": self.estimator,
            "estimate": num(self.estimate),
            "variance": num(self.variance),
            "ci_lower": num(self.ci_lower),
            "ci_upper": num(self.ci_upper),
            "diagnostics": self.diagnostics,
        }


def _require_converged(cal: CalibrationResult, force: bool) -> None:
    if not cal.converged and not force:
        raise ConvergenceError(
            f"calibration did not converge (||Q||_inf = {cal.residual_norm:.3g}); pass force=True to use it"
        )


def tau_simple(sample: SampleFrame) -> float:
    """Difference of design-weighted (Hajek) arm means."""
    w, a, y = sample.weight, sample.treatment, sample.outcome
    t, c = a == 1, a == 0
    if not t.any() or not c.any():
        raise DomainError("both treatment arms must be present")
    return float(np.sum(w[t] * y[t]) / np.sum(w[t]) - np.sum(w[c] * y[c]) / np.sum(w[c]))


def tau_iptw(sample: SampleFrame, e) -> float:
    """Design-weighted inverse probability of treatment weighting.

    ``N_hat^-1 sum w {A Y / e - (1 - A) Y / (1 - e)}``
    """
    e = np.asarray(e, dtype=float)
    if e.shape != (sample.n_rows,):
        raise DomainError(f"need one propensity per row, got shape {e.shape}")
    if np.any(~((e > 0) & (e < 1))):
        raise DomainError("propensities must lie strictly inside (0, 1)")
    w, a, y = sample.weight, sample.treatment, sample.outcome
    return float(np.sum(w * (a * y / e - (1 - a) * y / (1 - e))) / n_hat(sample))


def tau_calibrated(sample: SampleFrame, cal: CalibrationResult, *, force: bool = False) -> float:
    """IPTW with the calibrated propensity, written through the tilted weights."""
    _require_converged(cal, force)
    w, a, y = sample.weight, sample.treatment, sample.outcome
    return float(np.sum(w * cal.alpha * (a * y - (1 - a) * y)) / n_hat(sample))


def _aiptw(sample, inv_t, inv_c, beta1, beta0, u):
    """Shared three-term form given per-row 1/e (treated) and 1/(1-e) (control)."""
    w, a, y, x = sample.weight, sample.treatment, sample.outcome, sample.x
    b1 = np.atleast_1d(np.asarray(beta1, dtype=float))
    b0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    if b1.shape != (sample.p,) or b0.shape != (sample.p,):
        raise DomainError(f"coefficient vectors must have length p={sample.p}")
    uc = np.zeros(sample.n_clusters) if u is None else np.asarray(u, dtype=float)
    if uc.shape != (sample.n_clusters,):
        raise DomainError("u needs one value per sampled cluster")
    m1 = x @ b1 + uc[sample.cluster]
    m0 = x @ b0 + uc[sample.cluster]
    # sum w {A Y/e - (A/e - 1) m1} - sum w {(1-A) Y/(1-e) + (1 - (1-A)/(1-e)) m0}
    total = (np.sum(w * (a * inv_t * y - (a * inv_t - 1) * m1))
             - np.sum(w * ((1 - a) * inv_c * y + (1 - (1 - a) * inv_c) * m0)))
    return float(total / n_hat(sample))


def tau_aiptw(sample: SampleFrame, cal: CalibrationResult, beta1, beta0, u=None, *,
              force: bool = False) -> float:
    """Augmented IPTW with calibrated propensities.

    Predictions are ``x' beta_a + u_i``; ``u`` is indexed by sampled cluster
    and defaults to zero. Inverse propensities are taken directly from the
    tilted weights (treated: 1/e = alpha, control: 1/(1-e) = alpha) so that
    the augmentation terms cancel to rounding.
    """
    _require_converged(cal, force)
    a = sample.treatment
    inv = np.where(a == 1, cal.alpha, 0.0), np.where(a == 0, cal.alpha, 0.0)
    return _aiptw(sample, inv[0], inv[1], beta1, beta0, u)


def tau_aiptw_propensity(sample: SampleFrame, e, beta1, beta0, u=None) -> float:
    """Augmented IPTW for an arbitrary propensity vector, e.g. a raw Step-0 fit."""
    e = np.asarray(e, dtype=float)
    if np.any(~((e > 0) & (e < 1))):
        raise DomainError("propensities must lie strictly inside (0, 1)")
    return _aiptw(sample, 1.0 / e, 1.0 / (1.0 - e), beta1, beta0, u)


def fit_outcome_regression(sample: SampleFrame, arm: int) -> np.ndarray:
    """Design-weighted least squares of Y on X within arm ``arm``.

    X and Y are centred at their weighted means within each cluster (among
    the arm's rows), which removes any additive cluster effect.
    """
    r = np.flatnonzero(sample.treatment == arm)
    if r.size == 0:
        raise DomainError(f"no rows with treatment {arm}")
    w, x, y, c = sample.weight[r], sample.x[r], sample.outcome[r], sample.cluster[r]
    m = sample.n_clusters
    wsum = np.bincount(c, weights=w, minlength=m)
    wsum[wsum == 0] = 1.0
    xbar = np.stack([np.bincount(c, weights=w * x[:, k], minlength=m) for k in range(x.shape[1])], 1)
    xc = x - (xbar / wsum[:, None])[c]
    yc = y - (np.bincount(c, weights=w * y, minlength=m) / wsum)[c]
    G = (xc * w[:, None]).T @ xc
    h = (xc * w[:, None]).T @ yc
    if np.linalg.matrix_rank(G) < G.shape[0]:
        logger.warning("outcome regression design is rank deficient; using pseudo-inverse")
        return np.linalg.pinv(G) @ h
    return np.linalg.solve(G, h)


def tau_calibrated_multi(sample: SampleFrame, cal: CalibrationResult, a: int, a_prime: int, *,
                         force: bool = False) -> float:
    """Pairwise contrast ``N_hat^-1 sum w alpha {I(A=a) - I(A=a')} Y``."""
    _require_converged(cal, force)
    if a == a_prime:
        raise DomainError("contrast levels must differ")
    for lev in (a, a_prime):
        if lev not in cal.levels or not np.any(sample.treatment == lev):
            raise DomainError(f"treatment level {lev} absent")
    t = sample.treatment
    ind = (t == a).astype(float) - (t == a_prime)
    return float(np.sum(sample.weight * cal.alpha * ind * sample.outcome) / n_hat(sample))
