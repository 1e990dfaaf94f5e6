"""Exponential-tilting calibration of inverse propensity weights.

Within every (cluster, treatment level) block the tilted weights are

    alpha_ij = N_i * d_ij exp(lambda_a' x_ij) / sum_block w_kj d_kj exp(lambda_a' x_kj)

so the per-cluster constraints ``sum_j w_ij I(A_ij = a) alpha_ij = N_i`` hold
for every lambda. Only the covariate-balance equations

    Q_a(lambda) = sum_ij w_ij {I(A_ij = a) alpha_ij - 1} x_ij = 0

need solving. Q_a depends on lambda_a alone and its Jacobian is a sum of
within-block weighted covariance matrices, so each level is an independent
p-dimensional Newton problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DomainError, InfeasibleError
from .frames import SampleFrame, check_levels
from .glm import PROB_CLIP, FittedPropensity

logger = logging.getLogger(__name__)

TOL = 1e-10
MAX_ITER = 100


@dataclass(frozen=True)
class InitialWeights:
    d: np.ndarray
    source: str = "custom"

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise DomainError("initial weights must be finite and positive")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)


@dataclass(frozen=True)
class CalibrationResult:
    """Tilted weights and solver diagnostics.

    ``lam`` maps each treatment level to its multiplier vector. For binary
    samples ``lambda1`` and ``lambda2`` are the treated and control
    multipliers. ``ehat`` is the calibrated propensity of the received
    treatment's model: P(A=1) for binary samples, ``g_{A_ij}`` otherwise.
    """

    alpha: np.ndarray
    lam: dict
    residual: np.ndarray
    residual_norm: float
    scale: float
    per_cluster_check: float
    converged: bool
    iterations: int
    ehat: np.ndarray
    levels: tuple
    n_clipped: int = 0

    @property
    def lambda1(self) -> np.ndarray:
        return self.lam[1]

    @property
    def lambda2(self) -> np.ndarray:
        return self.lam[0]


def initial_weights(fit: FittedPropensity | None, sample: SampleFrame,
                    source: str = "fixed-model") -> InitialWeights:
    """Inverse-propensity starting weights.

    ``source="uniform"`` ignores ``fit`` and returns 2 for binary samples or
    T for samples with T levels.
    """
    levels = tuple(sample.levels)
    if source == "uniform":
        return InitialWeights(np.full(sample.n_rows, float(len(levels))), "uniform")
    if fit is None:
        raise DomainError("a fitted propensity model is required")
    fitted = np.asarray(fit.fitted, dtype=float)
    if fitted.ndim == 2:
        col = np.searchsorted(np.asarray(levels), sample.treatment)
        g = fitted[np.arange(sample.n_rows), col]
        return InitialWeights(1.0 / g, source)
    a = sample.treatment
    return InitialWeights(np.where(a == 1, 1.0 / fitted, 1.0 / (1.0 - fitted)), source)


class _Blocks:
    """Row grouping by (cluster, level) with per-cluster weight totals."""

    def __init__(self, sample: SampleFrame, levels):
        check_levels(sample.cluster, sample.treatment, levels, sample.cluster_ids)
        lev = np.asarray(levels)
        self.levels = tuple(levels)
        self.level_code = np.searchsorted(lev, sample.treatment)
        self.L = len(levels)
        self.m = sample.n_clusters
        self.block = sample.cluster * self.L + self.level_code
        self.n_blocks = self.m * self.L
        self.w = np.asarray(sample.weight, dtype=float)
        self.x = np.asarray(sample.x, dtype=float)
        self.N_i = sample.cluster_weight
        self.N_block = np.repeat(self.N_i, self.L)
        self.cluster = sample.cluster

    def alpha(self, lam: np.ndarray, logd: np.ndarray) -> np.ndarray:
        """Tilted weights for a (L, p) multiplier array."""
        s = logd + np.einsum("ij,ij->i", self.x, lam[self.level_code])
        mx = np.full(self.n_blocks, -np.inf)
        np.maximum.at(mx, self.block, s)
        e = np.exp(s - mx[self.block])
        denom = np.bincount(self.block, weights=self.w * e, minlength=self.n_blocks)
        return self.N_block[self.block] * e / denom[self.block]

    def residual(self, alpha: np.ndarray) -> np.ndarray:
        """(L, p) array of Q_a."""
        wx_total = np.sum(self.w[:, None] * self.x, axis=0)
        out = np.empty((self.L, self.x.shape[1]))
        for k in range(self.L):
            r = self.level_code == k
            out[k] = np.sum((self.w[r] * alpha[r])[:, None] * self.x[r], axis=0) - wx_total
        return out

    def jacobian(self, alpha: np.ndarray, k: int) -> np.ndarray:
        r = np.flatnonzero(self.level_code == k)
        wa = self.w[r] * alpha[r]
        xr = self.x[r]
        full = (xr * wa[:, None]).T @ xr
        b = self.cluster[r]
        sums = np.zeros((self.m, xr.shape[1]))
        np.add.at(sums, b, wa[:, None] * xr)
        return full - (sums / self.N_i[:, None]).T @ sums

    def per_cluster_error(self, alpha: np.ndarray) -> float:
        """Max relative violation of sum_j w I(A=a) alpha = N_i over all blocks."""
        tot = np.bincount(self.block, weights=self.w * alpha, minlength=self.n_blocks)
        return float(np.max(np.abs(tot - self.N_block) / self.N_block))

    def scale(self) -> float:
        return float(max(1.0, np.max(np.sum(self.w[:, None] * np.abs(self.x), axis=0))))


def tilted_weights(lambda1, lambda2, sample: SampleFrame, d: InitialWeights) -> np.ndarray:
    """Closed-form tilted weights for a binary sample at given multipliers."""
    blocks = _Blocks(sample, (0, 1))
    lam = np.vstack([np.atleast_1d(lambda2), np.atleast_1d(lambda1)]).astype(float)
    return blocks.alpha(lam, np.log(_d(d)))


def tilted_weights_multi(lam, sample: SampleFrame, d: InitialWeights) -> np.ndarray:
    """Closed-form tilted weights for levels ``sample.levels``; ``lam`` is (T, p)."""
    blocks = _Blocks(sample, sample.levels)
    return blocks.alpha(np.atleast_2d(np.asarray(lam, dtype=float)), np.log(_d(d)))


def constraint_residual(lambda1, lambda2, sample: SampleFrame, d: InitialWeights) -> np.ndarray:
    """The stacked 2p-vector (Q_1, Q_2) for a binary sample."""
    blocks = _Blocks(sample, (0, 1))
    lam = np.vstack([np.atleast_1d(lambda2), np.atleast_1d(lambda1)]).astype(float)
    Q = blocks.residual(blocks.alpha(lam, np.log(_d(d))))
    return np.concatenate([Q[1], Q[0]])


def _d(d) -> np.ndarray:
    return d.d if isinstance(d, InitialWeights) else np.asarray(d, dtype=float)


def check_balance_feasible(sample: SampleFrame, levels=None) -> None:
    """Fail fast when some covariate's balance target lies outside the reachable range.

    With cluster totals fixed at N_i, the level-a weighted total of covariate
    k can only range over sum_i N_i [min, max] of x_k among level-a units of
    cluster i. The design-weighted total must lie strictly inside.
    """
    levels = tuple(sample.levels if levels is None else levels)
    blocks = _Blocks(sample, levels)
    target = np.sum(blocks.w[:, None] * blocks.x, axis=0)
    tol = 1e-12 * blocks.scale()
    for k, lev in enumerate(levels):
        r = blocks.level_code == k
        for j in range(sample.p):
            lo = np.full(blocks.m, np.inf)
            hi = np.full(blocks.m, -np.inf)
            np.minimum.at(lo, blocks.cluster[r], blocks.x[r, j])
            np.maximum.at(hi, blocks.cluster[r], blocks.x[r, j])
            lo_t, hi_t = np.sum(blocks.N_i * lo), np.sum(blocks.N_i * hi)
            if hi_t - lo_t <= tol and abs(target[j] - lo_t) <= tol:
                continue  # no spread within blocks, and already on target
            if not (lo_t + tol < target[j] < hi_t - tol):
                name = sample.covariate_names[j] if sample.covariate_names else f"x{j + 1}"
                raise InfeasibleError(
                    f"covariate {name} cannot be balanced for treatment level {lev}: "
                    f"target {target[j]:.6g} outside reachable ({lo_t:.6g}, {hi_t:.6g})"
                )


def _solve(sample: SampleFrame, d: InitialWeights, levels, tol: float, max_iter: int,
           check_feasible: bool):
    blocks = _Blocks(sample, levels)
    if check_feasible:
        check_balance_feasible(sample, levels)
    logd = np.log(_d(d))
    scale = blocks.scale()
    p = sample.p
    lam = np.zeros((blocks.L, p))
    alpha = blocks.alpha(lam, logd)
    Q = blocks.residual(alpha)
    iterations = np.zeros(blocks.L, dtype=int)

    for k in range(blocks.L):
        for it in range(1, max_iter + 1):
            if np.max(np.abs(Q[k])) <= tol * scale:
                break
            iterations[k] = it
            J = blocks.jacobian(alpha, k)
            try:
                if np.linalg.cond(J) > 1e14:
                    raise np.linalg.LinAlgError
                step = -np.linalg.solve(J, Q[k])
            except np.linalg.LinAlgError:
                step = -np.linalg.pinv(J) @ Q[k]
            norm0 = np.linalg.norm(Q[k])
            t = 1.0
            while True:
                trial = lam.copy()
                trial[k] += t * step
                a_try = blocks.alpha(trial, logd)
                q_try = blocks.residual(a_try)[k]
                if np.linalg.norm(q_try) < norm0 or t < 1e-12:
                    break
                t *= 0.5
            lam, alpha = trial, a_try
            Q[k] = q_try
            if t < 1e-12:
                break
    Q = blocks.residual(alpha)
    if check_feasible:
        for k, lev in enumerate(levels):
            if np.max(np.abs(Q[k])) > tol * scale and not _jointly_feasible(blocks, k, scale):
                names = ", ".join(sample.covariate_names or
                                  [f"x{j + 1}" for j in range(p)])
                raise InfeasibleError(
                    f"covariates {names} cannot be balanced jointly for treatment level {lev}"
                )
    return blocks, lam, alpha, Q, scale, int(iterations.max())


def _jointly_feasible(blocks: _Blocks, k: int, scale: float, margin: float = 1e-9) -> bool:
    """Whether strictly positive within-block weights can reach the balance target.

    Solves max s subject to p_r >= s, sum_block p = 1 and
    sum_r N_i p_r x_r = sum w x over the level-k rows. A finite tilting
    solution exists exactly when the optimum is positive.
    """
    r = np.flatnonzero(blocks.level_code == k)
    n = r.size
    codes = blocks.cluster[r]
    target = np.sum(blocks.w[:, None] * blocks.x, axis=0) / scale
    A_eq = np.zeros((blocks.m + blocks.x.shape[1], n + 1))
    A_eq[codes, np.arange(n)] = 1.0
    A_eq[blocks.m:, :n] = (blocks.N_i[codes][:, None] * blocks.x[r]).T / scale
    b_eq = np.concatenate([np.ones(blocks.m), target])
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, 1)] * (n + 1), method="highs")
    return bool(res.status == 0 and -res.fun > margin)


def calibrated_propensity(alpha, treatment) -> tuple[np.ndarray, int]:
    """Invert tilted weights to propensities of treatment (binary coding).

    Treated rows get 1/alpha, control rows 1 - 1/alpha. Values are clipped to
    [1e-6, 1 - 1e-6]; the second return value counts clipped rows.
    """
    alpha = np.asarray(alpha, dtype=float)
    a = np.asarray(treatment)
    with np.errstate(divide="ignore"):
        e = np.where(a == 1, 1.0 / alpha, 1.0 - 1.0 / alpha)
    clipped = (e < PROB_CLIP) | (e > 1 - PROB_CLIP)
    return np.clip(e, PROB_CLIP, 1 - PROB_CLIP), int(clipped.sum())


def solve_calibration(sample: SampleFrame, d: InitialWeights, *, tol: float = TOL,
                      max_iter: int = MAX_ITER, check_feasible: bool = True) -> CalibrationResult:
    """Calibrate binary-treatment weights to covariate and per-cluster balance.

    Newton iterations start at lambda = 0 and use the analytic Jacobian with
    step-halving on ||Q||_2; a near-singular Jacobian falls back to a
    pseudo-inverse step. Convergence means ||Q||_inf <= tol * scale with
    ``scale = max(1, max_k sum_ij w_ij |x_ijk|)``. An unconverged result is
    returned with ``converged=False``.

    Raises:
        InfeasibleError: a cluster lacks an arm, a covariate's target is out
            of reach, or Newton stalls and a linear program confirms that no
            positive weighting within blocks meets all covariate targets.
    """
    if tuple(sample.levels) != (0, 1):
        raise DomainError("solve_calibration needs treatments coded 0/1")
    blocks, lam, alpha, Q, scale, iters = _solve(sample, d, (0, 1), tol, max_iter, check_feasible)
    resid = np.concatenate([Q[1], Q[0]])
    rnorm = float(np.max(np.abs(resid)))
    conv = rnorm <= tol * scale
    if not conv:
        logger.warning("calibration stopped with ||Q||_inf = %.3g (scale %.3g)", rnorm, scale)
    ehat, n_clip = calibrated_propensity(alpha, sample.treatment)
    return CalibrationResult(alpha, {1: lam[1], 0: lam[0]}, resid, rnorm, scale,
                             blocks.per_cluster_error(alpha), conv, iters, ehat, (0, 1), n_clip)


def solve_calibration_multi(sample: SampleFrame, d: InitialWeights, T: int | None = None, *,
                            tol: float = TOL, max_iter: int = MAX_ITER,
                            check_feasible: bool = True) -> CalibrationResult:
    """Multi-level calibration for treatments coded ``1..T``.

    ``ehat`` holds the calibrated generalized propensity of the received
    level, ``1 / alpha``.
    """
    levels = tuple(range(1, T + 1)) if T is not None else tuple(sample.levels)
    if tuple(sample.levels) != levels:
        raise DomainError(f"sample levels {sample.levels} do not match T={T}")
    blocks, lam, alpha, Q, scale, iters = _solve(sample, d, levels, tol, max_iter, check_feasible)
    resid = Q.ravel()
    rnorm = float(np.max(np.abs(resid)))
    conv = rnorm <= tol * scale
    if not conv:
        logger.warning("calibration stopped with ||Q||_inf = %.3g (scale %.3g)", rnorm, scale)
    g = np.clip(1.0 / alpha, PROB_CLIP, 1 - PROB_CLIP)
    return CalibrationResult(alpha, {lev: lam[k] for k, lev in enumerate(levels)}, resid, rnorm,
                             scale, blocks.per_cluster_error(alpha), conv, iters, g, levels)


def binary_as_multi(sample: SampleFrame) -> SampleFrame:
    """Recode a 0/1 sample as levels 1 (treated) and 2 (control)."""
    kw = (dict(pi_first=sample.pi_first, pi_second=sample.pi_second)
          if sample.has_probabilities else dict(weight=sample.weight))
    return SampleFrame.from_arrays(
        np.asarray(sample.cluster_ids, dtype=object)[sample.cluster],
        np.where(sample.treatment == 1, 1, 2), sample.outcome, sample.x,
        unit_ids=sample.unit_id, covariate_names=sample.covariate_names,
        first_stage=sample.first_stage, levels=(1, 2), **kw,
    )
