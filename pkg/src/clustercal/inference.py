"""Variance estimation, confidence intervals and covariate-balance diagnostics."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.stats import norm

from .calibration import CalibrationResult
from .designs import FirstStageDesign, JointInclusion
from .errors import DomainError
from .frames import SampleFrame, n_hat

logger = logging.getLogger(__name__)

MAX_DROP_FRACTION = 0.10


@dataclass(frozen=True)
class LinearizationPieces:
    """Plug-in influence values and their per-cluster aggregates.

    ``b_hat`` maps treatment level to its regression coefficient vector;
    for binary samples ``b1_hat``/``b2_hat`` are the treated and control
    entries.
    """

    b_hat: dict
    phi: np.ndarray
    tau_i: np.ndarray
    v_i: np.ndarray

    @property
    def b1_hat(self) -> np.ndarray:
        return self.b_hat[1]

    @property
    def b2_hat(self) -> np.ndarray:
        return self.b_hat[0]


@dataclass(frozen=True)
class MultiLinearizationPieces:
    """Level-indexed regression coefficients; :meth:`contrast` builds the pieces of one pair."""

    sample: SampleFrame
    alpha: np.ndarray
    y: np.ndarray
    b_hat: dict

    def contrast(self, a: int, a_prime: int) -> LinearizationPieces:
        if a == a_prime:
            raise DomainError("contrast levels must differ")
        t = self.sample.treatment
        x = self.sample.x
        ba, bb = self.b_hat[a], self.b_hat[a_prime]
        phi = (self.alpha * ((t == a) * (self.y - x @ ba) - (t == a_prime) * (self.y - x @ bb))
               + x @ (ba - bb))
        return _assemble(self.sample, {a: ba, a_prime: bb}, phi)


def _leverage(sample: SampleFrame, alpha: np.ndarray, variant: str) -> np.ndarray:
    if variant == "n":
        return 1.0 - alpha / sample.cluster_n[sample.cluster]
    if variant == "N":
        return 1.0 - alpha / sample.cluster_weight[sample.cluster]
    raise DomainError(f"unknown leverage variant {variant!r}; use 'n' or 'N'")


def _regress(c, x, y) -> np.ndarray:
    G = (x * c[:, None]).T @ x
    h = (x * c[:, None]).T @ y
    if np.linalg.matrix_rank(G) < G.shape[0]:
        logger.warning("singular weighted XX' block; using pseudo-inverse")
        return np.linalg.pinv(G) @ h
    return np.linalg.solve(G, h)


def _assemble(sample: SampleFrame, b_hat: dict, phi: np.ndarray) -> LinearizationPieces:
    if not np.all(np.isfinite(phi)):
        raise DomainError("non-finite influence values")
    ps = sample.pi_second
    m = sample.n_clusters
    tau_i = np.bincount(sample.cluster, weights=phi / ps, minlength=m)
    v_i = np.bincount(sample.cluster, weights=(1.0 - ps) * (phi / ps) ** 2, minlength=m)
    return LinearizationPieces(b_hat, phi, tau_i, v_i)


def linearization_pieces(sample: SampleFrame, cal: CalibrationResult, y=None, *,
                         leverage: str = "n") -> LinearizationPieces:
    """Influence values of the calibrated estimator for a binary sample.

    ``B_a = (sum c x x')^-1 sum c x y`` with ``c = w alpha (1 - alpha/n_i) I(A=a)``,
    ``phi = alpha {A (y - B_1'x) - (1-A)(y - B_0'x)} + (B_1 - B_0)'x``,
    ``tau_i = sum_j phi_ij / pi_j|i`` and the Poisson within-cluster variance
    ``v_i = sum_k (1 - pi_k|i) (phi_ik / pi_k|i)^2``.

    ``leverage="N"`` replaces ``n_i`` by the estimated cluster size.
    """
    y = sample.outcome if y is None else np.asarray(y, dtype=float)
    if not sample.has_probabilities:
        raise DomainError("linearization needs inclusion probabilities")
    a, x, alpha = sample.treatment, sample.x, cal.alpha
    c = sample.weight * alpha * _leverage(sample, alpha, leverage)
    t = a == 1
    b1 = _regress(c[t], x[t], y[t])
    b0 = _regress(c[~t], x[~t], y[~t])
    phi = alpha * (a * (y - x @ b1) - (1 - a) * (y - x @ b0)) + x @ (b1 - b0)
    return _assemble(sample, {1: b1, 0: b0}, phi)


def _block_centre(cluster, c, v, m):
    tot = np.bincount(cluster, weights=c, minlength=m)
    if v.ndim == 1:
        return v - (np.bincount(cluster, weights=c * v, minlength=m) / tot)[cluster]
    return np.column_stack([_block_centre(cluster, c, v[:, k], m) for k in range(v.shape[1])])


def linearization_pieces_blocked(sample: SampleFrame, cal: CalibrationResult,
                                 y=None) -> LinearizationPieces:
    """Influence values that also linearize the per-cluster size constraints.

    Within each arm the fitted surface is ``g_a(x) = c_ia + B_a'x``. Here ``B_a`` is
    the ``w alpha``-weighted slope after centring ``y`` and ``x`` inside each
    (cluster, arm) block, and ``c_ia`` is that block's intercept. Then
    ``phi = alpha {A (y - g_1) - (1-A)(y - g_0)} + g_1 - g_0``. Cluster-level
    shifts of the outcome leave ``phi`` unchanged, which keeps the within-cluster
    term from counting them as sampling noise. Agrees closely with
    :func:`linearization_pieces` when the working propensity model is adequate.
    """
    y = sample.outcome if y is None else np.asarray(y, dtype=float)
    if not sample.has_probabilities:
        raise DomainError("linearization needs inclusion probabilities")
    a, x, alpha = sample.treatment, sample.x, cal.alpha
    m, cl = sample.n_clusters, sample.cluster
    c = sample.weight * alpha
    g, b_hat = {}, {}
    for arm in (1, 0):
        r = a == arm
        cr = np.where(r, c, 0.0)
        xc = _block_centre(cl, cr, x, m)
        yc = _block_centre(cl, cr, y, m)
        b = _regress(c[r], xc[r], yc[r])
        ybar = np.bincount(cl, weights=cr * y, minlength=m) / np.bincount(cl, weights=cr, minlength=m)
        xbar = np.column_stack([np.bincount(cl, weights=cr * x[:, k], minlength=m)
                                for k in range(x.shape[1])]) / np.bincount(cl, weights=cr,
                                                                           minlength=m)[:, None]
        g[arm] = (ybar - xbar @ b)[cl] + x @ b
        b_hat[arm] = b
    phi = alpha * (a * (y - g[1]) - (1 - a) * (y - g[0])) + g[1] - g[0]
    return _assemble(sample, b_hat, phi)


def linearization_pieces_multi(sample: SampleFrame, cal: CalibrationResult, y=None, *,
                               leverage: str = "n") -> MultiLinearizationPieces:
    """Per-level regression coefficients for multi-level contrasts."""
    y = sample.outcome if y is None else np.asarray(y, dtype=float)
    if not sample.has_probabilities:
        raise DomainError("linearization needs inclusion probabilities")
    c = sample.weight * cal.alpha * _leverage(sample, cal.alpha, leverage)
    b = {}
    for lev in cal.levels:
        r = sample.treatment == lev
        b[lev] = _regress(c[r], sample.x[r], y[r])
    return MultiLinearizationPieces(sample, cal.alpha, y, b)


def _first_stage(sample: SampleFrame, first_stage: FirstStageDesign | None) -> FirstStageDesign:
    design = sample.first_stage if first_stage is None else first_stage
    if design is None or not sample.has_probabilities:
        raise DomainError("linearized variance needs first-stage inclusion probabilities")
    return design


def variance_from_cluster_totals(sample: SampleFrame, tau_i, v_i,
                                 first_stage: FirstStageDesign | None = None) -> float:
    """Two-stage design variance of ``N_hat^-1 sum w phi`` from per-cluster pieces.

    ``N_hat^-2 [sum_i sum_j (pi_ij - pi_i pi_j)/pi_ij (t_i/pi_i)(t_j/pi_j) + sum_i v_i/pi_i]``
    over sampled clusters, with Hartley-Rao joint probabilities. A negative
    total is floored at the within-cluster term.
    """
    design = _first_stage(sample, first_stage)
    pi = sample.cluster_pi
    pij = JointInclusion(design).matrix(pi)
    delta = (pij - np.outer(pi, pi)) / pij
    t = np.asarray(tau_i, dtype=float) / pi
    between = float(t @ delta @ t)
    within = float(np.sum(np.asarray(v_i, dtype=float) / pi))
    nh2 = n_hat(sample) ** 2
    total = between + within
    if total < 0:
        logger.warning("negative linearized variance %.3g; flooring at the within-cluster term",
                       total / nh2)
        total = within
    return total / nh2


def variance_linearized(sample: SampleFrame, pieces: LinearizationPieces,
                        first_stage: FirstStageDesign | None = None) -> float:
    """Linearized variance of the calibrated estimator.

    ``first_stage`` defaults to the design attached to the sample.
    """
    return variance_from_cluster_totals(sample, pieces.tau_i, pieces.v_i, first_stage)


def variance_linearized_multi(sample: SampleFrame, pieces: MultiLinearizationPieces,
                              first_stage: FirstStageDesign | None, a: int, a_prime: int) -> float:
    return variance_linearized(sample, pieces.contrast(a, a_prime), first_stage)


def variance_from_influence(sample: SampleFrame, phi,
                            first_stage: FirstStageDesign | None = None) -> float:
    """Design variance of ``N_hat^-1 sum w phi`` for arbitrary per-row influence values."""
    pieces = _assemble(sample, {}, np.asarray(phi, dtype=float))
    return variance_from_cluster_totals(sample, pieces.tau_i, pieces.v_i, first_stage)


def simple_influence(sample: SampleFrame) -> np.ndarray:
    """Ratio linearization of the difference of Hajek arm means."""
    w, a, y = sample.weight, sample.treatment, sample.outcome
    t = a == 1
    nh = n_hat(sample)
    n1, n0 = w[t].sum(), w[~t].sum()
    mu1, mu0 = np.sum(w[t] * y[t]) / n1, np.sum(w[~t] * y[~t]) / n0
    return a * (y - mu1) * nh / n1 - (1 - a) * (y - mu0) * nh / n0


def iptw_influence(sample: SampleFrame, e, estimate: float) -> np.ndarray:
    """Influence values of the IPTW ratio, treating ``e`` as known."""
    a, y = sample.treatment, sample.outcome
    e = np.asarray(e, dtype=float)
    return a * y / e - (1 - a) * y / (1 - e) - estimate


@dataclass(frozen=True)
class BootstrapResult:
    variance: float
    estimates: np.ndarray
    dropped: int

    def __float__(self) -> float:
        return self.variance


def cluster_bootstrap(sample: SampleFrame, estimator: Callable[[SampleFrame], float], B: int,
                      rng: np.random.Generator, *, workers: int = 1) -> BootstrapResult:
    """Cluster bootstrap variance.

    Each replicate draws ``m`` sampled clusters with replacement, keeps all
    their rows (repeat draws get fresh cluster ids) and calls ``estimator``
    on the resampled frame. Resampling indices are drawn up front from
    ``rng``, so results do not depend on ``workers``. Replicates whose
    estimator raises are dropped; more than 10% drops is an error.
    """
    if B < 2:
        raise DomainError("need at least 2 bootstrap replicates")
    m = sample.n_clusters
    if m < 2:
        raise DomainError("need at least 2 clusters to resample")
    draws = [rng.integers(0, m, size=m) for _ in range(B)]
    index = sample.cluster_index
    ids = sample.cluster_ids

    def one(pick):
        rows = np.concatenate([index[c] for c in pick])
        labels = np.concatenate([np.full(index[c].size, f"{ids[c]}#{k}", dtype=object)
                                 for k, c in enumerate(pick)])
        try:
            return float(estimator(sample.take(rows, labels)))
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            logger.debug("bootstrap replicate failed: %s", exc)
            return math.nan

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            est = np.array(list(pool.map(one, draws)))
    else:
        est = np.array([one(p) for p in draws])
    ok = np.isfinite(est)
    dropped = int(B - ok.sum())
    if dropped > MAX_DROP_FRACTION * B:
        raise RuntimeError(f"{dropped} of {B} bootstrap replicates failed")
    if dropped:
        logger.warning("%d of %d bootstrap replicates dropped", dropped, B)
    return BootstrapResult(float(np.var(est[ok], ddof=1)), est, dropped)


def confidence_interval(estimate: float, variance: float, level: float = 0.95) -> tuple[float, float]:
    """Wald interval ``estimate +/- z sqrt(variance)``."""
    if not variance >= 0:
        raise DomainError(f"variance {variance!r} must be non-negative")
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    half = norm.ppf((1 + level) / 2) * math.sqrt(variance)
    return estimate - half, estimate + half


WHOLE = "whole"


@dataclass(frozen=True)
class BalanceTable:
    """Standardized mean differences per covariate, at cluster and whole-population level.

    Each row is ``(covariate, cluster, {method: smd})``; ``cluster`` is
    :data:`WHOLE` for the population row. Covariates with zero spread are
    listed in ``flagged`` and carry NaN entries.
    """

    methods: tuple
    rows: list
    flagged: tuple = field(default=())

    def value(self, covariate: str, cluster: str, method: str) -> float:
        for cov, cl, vals in self.rows:
            if cov == covariate and cl == cluster:
                return vals[method]
        raise KeyError((covariate, cluster))

    def to_dict(self) -> dict:
        def num(v):
            return None if not math.isfinite(v) else float(v)
        return {
            "methods": list(self.methods),
            "flagged": list(self.flagged),
            "rows": [{"covariate": cov, "cluster": cl, **{k: num(v) for k, v in vals.items()}}
                     for cov, cl, vals in self.rows],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["covariate", "cluster", *self.methods])
            for cov, cl, vals in self.rows:
                w.writerow([cov, cl, *(repr(float(vals[k])) for k in self.methods)])


def balance_table(sample: SampleFrame, weight_sets: Mapping[str, np.ndarray]) -> BalanceTable:
    """Standardized differences of weighted treated and control covariate means.

    ``weight_sets`` maps a method name to final per-row weights (``w`` for
    the unadjusted comparison, ``w * alpha`` for calibration, ``w / e`` or
    ``w / (1 - e)`` for IPTW). Every difference is divided by the
    design-weighted standard deviation of the covariate over the whole
    sample.
    """
    w0 = sample.weight
    x = sample.x
    mean = w0 @ x / w0.sum()
    sd = np.sqrt(w0 @ (x - mean) ** 2 / w0.sum())
    names = sample.covariate_names or tuple(f"x{k + 1}" for k in range(sample.p))
    flagged = tuple(names[k] for k in range(sample.p) if not sd[k] > 0)
    t = sample.treatment == 1
    W = {}
    for name, wt in weight_sets.items():
        wt = np.asarray(wt, dtype=float)
        if wt.shape != (sample.n_rows,) or np.any(~(wt > 0)):
            raise DomainError(f"weights for {name!r} must be positive, one per row")
        W[name] = wt

    def smd(rows, wt, k):
        tt, cc = rows & t, rows & ~t
        if not tt.any() or not cc.any() or not sd[k] > 0:
            return math.nan
        d = (np.sum(wt[tt] * x[tt, k]) / np.sum(wt[tt])
             - np.sum(wt[cc] * x[cc, k]) / np.sum(wt[cc]))
        return float(d / sd[k])

    everything = np.ones(sample.n_rows, dtype=bool)
    out = []
    for k, cov in enumerate(names):
        for c, cid in enumerate(sample.cluster_ids):
            rows = sample.cluster == c
            out.append((cov, str(cid), {m: smd(rows, wt, k) for m, wt in W.items()}))
        out.append((cov, WHOLE, {m: smd(everything, wt, k) for m, wt in W.items()}))
    return BalanceTable(tuple(W), out, flagged)
