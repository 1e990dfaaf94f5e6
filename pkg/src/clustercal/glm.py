"""Working propensity models used to seed the calibration.

Three fits are provided: logistic regression with one intercept per cluster
(fitted by IRLS), a random-intercept logistic model fitted by adaptive
Gauss-Hermite quadrature, and a multinomial logit with level-specific cluster
intercepts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError
from .frames import SampleFrame, check_levels

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-6
RIDGE = 1e-6
MAX_ITER = 200
COEF_TOL = 1e-9
N_NODES = 15

LINKS = ("logit", "probit", "cloglog")


def inverse_link(kind: str, eta):
    """Map a linear predictor to a probability."""
    eta = np.asarray(eta, dtype=float)
    if kind == "logit":
        out = special.expit(eta)
    elif kind == "probit":
        out = special.ndtr(eta)
    elif kind == "cloglog":
        out = -np.expm1(-np.exp(eta))
    else:
        raise DomainError(f"unknown link {kind!r}")
    return out[()] if out.ndim == 0 else out


def link(kind: str, p):
    p = np.asarray(p, dtype=float)
    if kind == "logit":
        out = special.logit(p)
    elif kind == "probit":
        out = special.ndtri(p)
    elif kind == "cloglog":
        out = np.log(-np.log1p(-p))
    else:
        raise DomainError(f"unknown link {kind!r}")
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class LinkFunction:
    kind: str = "logit"

    def __post_init__(self):
        if self.kind not in LINKS:
            raise DomainError(f"unknown link {self.kind!r}")

    def inverse(self, eta):
        return inverse_link(self.kind, eta)

    def __call__(self, p):
        return link(self.kind, p)


@dataclass(frozen=True)
class FittedPropensity:
    """Result of a Step-0 propensity fit.

    ``fitted`` is the per-row probability of treatment (binary models) or an
    ``(n, T)`` matrix of level probabilities (multinomial). ``slopes`` has one
    column per non-reference level for the multinomial model.
    """

    model_kind: str
    fitted: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    sigma2: float | None = None
    cluster_effects: np.ndarray | None = None
    score_max: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.slopes), np.ravel(self.intercepts)])


def _clip(p):
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def _bernoulli_loglik(a, eta):
    # a*eta - log(1 + e^eta), stable for large |eta|
    return a * eta - np.logaddexp(0.0, eta)


def _norm_weights(sample: SampleFrame, use_design_weights: bool) -> np.ndarray:
    if not use_design_weights:
        return np.ones(sample.n_rows)
    w = np.asarray(sample.weight, dtype=float)
    return w / w.mean()


def _irls(Z, a, v, ridge, theta0=None):
    """Penalized logistic IRLS with step-halving; returns (theta, converged, iters, obj)."""
    n, k = Z.shape
    theta = np.zeros(k) if theta0 is None else np.array(theta0, dtype=float)

    def objective(t):
        return float(np.sum(v * _bernoulli_loglik(a, Z @ t)) - ridge * t @ t)

    obj = objective(theta)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        mu = special.expit(Z @ theta)
        score = Z.T @ (v * (a - mu)) - 2 * ridge * theta
        W = v * mu * (1 - mu)
        H = (Z * W[:, None]).T @ Z + 2 * ridge * np.eye(k)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta + t * step
            new = objective(cand)
            if new >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        change = np.max(np.abs(cand - theta))
        theta, obj = cand, new
        if change < COEF_TOL:
            converged = True
            break
    mu = special.expit(Z @ theta)
    score = Z.T @ (v * (a - mu)) - 2 * ridge * theta
    return theta, converged, it, obj, float(np.max(np.abs(score)))


def _dummies(codes, m):
    D = np.zeros((codes.size, m))
    D[np.arange(codes.size), codes] = 1.0
    return D


def fit_logistic_fixed(sample: SampleFrame, use_design_weights: bool = False) -> FittedPropensity:
    """Logistic regression with covariate slopes and one intercept per cluster.

    A ridge penalty of 1e-6 on all coefficients keeps the cluster intercepts
    finite under separation. Non-convergence is flagged, not raised.
    """
    a = sample.treatment.astype(float)
    check_levels(sample.cluster, sample.treatment, (0, 1), sample.cluster_ids)
    m = sample.n_clusters
    Z = np.hstack([sample.x, _dummies(sample.cluster, m)])
    v = _norm_weights(sample, use_design_weights)
    frac = np.bincount(sample.cluster, weights=v * a, minlength=m) / np.bincount(
        sample.cluster, weights=v, minlength=m)
    theta0 = np.concatenate([np.zeros(sample.p), special.logit(np.clip(frac, 0.01, 0.99))])
    theta, conv, it, obj, smax = _irls(Z, a, v, RIDGE, theta0)
    if not conv:
        logger.warning("fixed-effect logistic fit stopped after %d iterations", it)
    fitted = _clip(special.expit(Z @ theta))
    return FittedPropensity("fixed", fitted, theta[: sample.p], theta[sample.p:], conv, it,
                            obj, score_max=smax)


def fit_logistic_plain(x, a, weights=None, ridge: float = 0.0) -> tuple[np.ndarray, bool]:
    """Ordinary logistic regression with a single intercept (first coefficient)."""
    x = np.asarray(x, dtype=float).reshape(len(a), -1)
    a = np.asarray(a, dtype=float)
    v = np.ones(a.size) if weights is None else np.asarray(weights, dtype=float)
    Z = np.hstack([np.ones((a.size, 1)), x])
    theta, conv, *_ = _irls(Z, a, v, ridge)
    return theta, conv


# --- random-intercept logistic model -------------------------------------------------


class _ClusterSums:
    """Segment sums over rows grouped by cluster (rows pre-sorted)."""

    def __init__(self, codes, m):
        self.order = np.argsort(codes, kind="stable")
        counts = np.bincount(codes, minlength=m)
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.codes_sorted = codes[self.order]

    def __call__(self, arr):
        return np.add.reduceat(arr, self.starts, axis=0)


class _RandomInterceptModel:
    def __init__(self, sample: SampleFrame, n_nodes: int):
        self.m = sample.n_clusters
        self.sums = _ClusterSums(sample.cluster, self.m)
        o = self.sums.order
        self.a = sample.treatment[o].astype(float)
        self.x = sample.x[o]
        self.c = self.sums.codes_sorted
        self.p = sample.p
        t, w = np.polynomial.hermite.hermgauss(n_nodes)
        self.t, self.logw = t, np.log(w)

    def fixed_eta(self, theta):
        return theta[0] + self.x @ theta[1: 1 + self.p]

    def modes(self, theta, zhat=None):
        """Posterior modes and curvature scales of the standardized cluster effect."""
        sigma = theta[-1]
        base = self.fixed_eta(theta)
        z = np.zeros(self.m) if zhat is None else zhat.copy()
        for _ in range(50):
            mu = special.expit(base + sigma * z[self.c])
            g = sigma * self.sums(self.a - mu) - z
            h = -(sigma**2) * self.sums(mu * (1 - mu)) - 1.0
            dz = -g / h
            z += dz
            if np.max(np.abs(dz)) < 1e-12:
                break
        mu = special.expit(base + sigma * z[self.c])
        h = -(sigma**2) * self.sums(mu * (1 - mu)) - 1.0
        return z, 1.0 / np.sqrt(-h)

    def _log_terms(self, theta, nodes):
        """Per-cluster per-node log integrand terms and row-level eta."""
        sigma = theta[-1]
        eta = self.fixed_eta(theta)[:, None] + sigma * nodes[self.c]
        ll = self.sums(_bernoulli_loglik(self.a[:, None], eta))
        return ll - 0.5 * nodes**2 - 0.5 * np.log(2 * np.pi), eta

    def nodes(self, zhat, scale):
        z = zhat[:, None] + np.sqrt(2.0) * scale[:, None] * self.t[None, :]
        logc = self.logw[None, :] + self.t[None, :] ** 2 + np.log(np.sqrt(2.0) * scale)[:, None]
        return z, logc

    def cluster_loglik(self, theta, nodes, logc):
        terms, _ = self._log_terms(theta, nodes)
        return special.logsumexp(terms + logc, axis=1)

    def grad_hess(self, theta, nodes, logc, free):
        terms, eta = self._log_terms(theta, nodes)
        s = terms + logc
        L = special.logsumexp(s, axis=1)
        r = np.exp(s - L[:, None])  # m x K posterior node weights
        mu = special.expit(eta)
        resid = self.a[:, None] - mu
        w = mu * (1 - mu)
        S0 = self.sums(resid)                                  # m x K
        Sx = self.sums(resid[:, :, None] * self.x[:, None, :])  # m x K x p
        W0 = self.sums(w)
        Wx = self.sums(w[:, :, None] * self.x[:, None, :])
        Wxx = self.sums(w[:, :, None, None] * self.x[:, None, :, None] * self.x[:, None, None, :])
        m, K = S0.shape
        p = self.p
        d = p + 2
        g = np.empty((m, K, d))
        g[..., 0] = S0
        g[..., 1:1 + p] = Sx
        g[..., -1] = nodes * S0
        H = np.empty((m, K, d, d))
        H[..., 0, 0] = W0
        H[..., 0, 1:1 + p] = Wx
        H[..., 1:1 + p, 0] = Wx
        H[..., 1:1 + p, 1:1 + p] = Wxx
        H[..., 0, -1] = H[..., -1, 0] = nodes * W0
        H[..., 1:1 + p, -1] = H[..., -1, 1:1 + p] = nodes[..., None] * Wx
        H[..., -1, -1] = nodes**2 * W0
        H = -H
        gbar = np.einsum("mk,mkd->md", r, g)
        hess = (np.einsum("mk,mkde->de", r, H + g[..., :, None] * g[..., None, :])
                - gbar.T @ gbar)
        grad = gbar.sum(axis=0)
        return float(L.sum()), grad[free], hess[np.ix_(free, free)]


def fit_logistic_random(
    sample: SampleFrame,
    *,
    n_nodes: int = N_NODES,
    fix_sigma2: float | None = None,
    tol: float = 1e-8,
    max_outer: int = 50,
) -> FittedPropensity:
    """Random-intercept logistic regression by adaptive Gauss-Hermite quadrature.

    Quadrature nodes are centred at each cluster's posterior mode and scaled
    by its curvature. The outer loop alternates Newton steps on the
    fixed-node likelihood with re-centring until the parameters settle.
    Fitted probabilities plug in the empirical Bayes (posterior mode)
    intercept of each cluster.

    When the variance estimate collapses to zero the plain logistic fit is
    returned with ``sigma2 = 0``.

    Args:
        sample: Frame with binary treatment.
        n_nodes: Quadrature nodes per cluster.
        fix_sigma2: Hold the random-intercept variance at this value.
    """
    check_levels(sample.cluster, sample.treatment, (0, 1), sample.cluster_ids)
    model = _RandomInterceptModel(sample, n_nodes)
    p = sample.p
    beta0, conv0 = fit_logistic_plain(sample.x, sample.treatment)
    sigma = 0.5 if fix_sigma2 is None else float(np.sqrt(fix_sigma2))
    theta = np.concatenate([beta0, [sigma]])
    free = np.arange(p + 2) if fix_sigma2 is None else np.arange(p + 1)

    zhat = None
    converged = False
    iterations = 0
    for outer in range(max_outer):
        zhat, scale = model.modes(theta, zhat)
        nodes, logc = model.nodes(zhat, scale)
        prev = theta.copy()
        for _ in range(20):
            iterations += 1
            obj, g, H = model.grad_hess(theta, nodes, logc, free)
            try:
                step = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(H, g, rcond=None)[0]
            if not np.all(np.isfinite(step)):
                break
            t = 1.0
            while t > 1e-10:
                cand = theta.copy()
                cand[free] += t * step
                if model.cluster_loglik(cand, nodes, logc).sum() >= obj - 1e-10 * abs(obj):
                    break
                t *= 0.5
            theta = cand
            if np.max(np.abs(t * step)) < tol:
                break
        if np.max(np.abs(theta - prev)) < tol:
            converged = True
            break

    sigma = abs(theta[-1])
    theta[-1] = sigma
    if fix_sigma2 is None and sigma < 1e-4:
        logger.info("random-intercept variance at boundary; using plain logistic fit")
        eta = beta0[0] + sample.x @ beta0[1:]
        ll = float(np.sum(_bernoulli_loglik(sample.treatment, eta)))
        return FittedPropensity("random", _clip(special.expit(eta)), beta0[1:], beta0[:1],
                                conv0, iterations, ll, sigma2=0.0,
                                cluster_effects=np.zeros(sample.n_clusters))

    zhat, scale = model.modes(theta, zhat)
    nodes, logc = model.nodes(zhat, scale)
    per_cluster = model.cluster_loglik(theta, nodes, logc)
    b = sigma * zhat
    eta = theta[0] + sample.x @ theta[1:1 + p] + b[sample.cluster]
    if not converged:
        logger.warning("random-intercept fit did not settle after %d outer steps", max_outer)
    return FittedPropensity(
        "random", _clip(special.expit(eta)), theta[1:1 + p], theta[:1], converged, iterations,
        float(per_cluster.sum()), sigma2=float(sigma**2), cluster_effects=b,
        extra={"cluster_loglik": per_cluster, "theta": theta},
    )


def random_intercept_cluster_loglik(sample: SampleFrame, intercept, slopes, sigma2,
                                    n_nodes: int = N_NODES) -> np.ndarray:
    """Adaptive-quadrature marginal log-likelihood per cluster at given parameters."""
    model = _RandomInterceptModel(sample, n_nodes)
    theta = np.concatenate([[intercept], np.ravel(slopes), [np.sqrt(sigma2)]])
    zhat, scale = model.modes(theta)
    nodes, logc = model.nodes(zhat, scale)
    return model.cluster_loglik(theta, nodes, logc)


# --- multinomial ---------------------------------------------------------------------


def fit_multinomial_fixed(sample: SampleFrame, T: int,
                          use_design_weights: bool = False) -> FittedPropensity:
    """Multinomial logit with level-specific slopes and cluster intercepts.

    Treatments are coded ``1..T`` and level ``T`` is the reference, so its
    slopes and intercepts are fixed at zero. Returns an ``(n, T)`` matrix of
    level probabilities, clipped to [1e-6, 1 - 1e-6] and renormalized.
    """
    if T < 2:
        raise DomainError("need at least two treatment levels")
    levels = tuple(range(1, T + 1))
    check_levels(sample.cluster, sample.treatment, levels, sample.cluster_ids)
    n, m = sample.n_rows, sample.n_clusters
    Z = np.hstack([sample.x, _dummies(sample.cluster, m)])
    k = Z.shape[1]
    J = T - 1
    Y = (sample.treatment[:, None] == np.arange(1, T)[None, :]).astype(float)  # n x J
    v = _norm_weights(sample, use_design_weights)

    def probs(theta):
        eta = Z @ theta.reshape(J, k).T                     # n x J
        full = np.hstack([eta, np.zeros((n, 1))])
        return np.exp(full - special.logsumexp(full, axis=1, keepdims=True))

    def objective(theta):
        eta = Z @ theta.reshape(J, k).T
        full = np.hstack([eta, np.zeros((n, 1))])
        ll = np.sum(Y * eta, axis=1) - special.logsumexp(full, axis=1)
        return float(np.sum(v * ll) - RIDGE * theta @ theta)

    counts = np.array([np.bincount(sample.cluster, weights=v * (sample.treatment == lev),
                                   minlength=m) for lev in levels])
    start = np.log(counts[:J] / counts[J])
    theta = np.concatenate([np.concatenate([np.zeros(sample.p), start[j]]) for j in range(J)])
    obj = objective(theta)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        P = probs(theta)[:, :J]
        score = ((Y - P) * v[:, None]).T @ Z                 # J x k
        score = score.ravel() - 2 * RIDGE * theta
        H = np.empty((J * k, J * k))
        for r in range(J):
            for s in range(r, J):
                w = v * P[:, r] * ((r == s) - P[:, s])
                blk = (Z * w[:, None]).T @ Z
                H[r * k:(r + 1) * k, s * k:(s + 1) * k] = blk
                H[s * k:(s + 1) * k, r * k:(r + 1) * k] = blk.T
        H += 2 * RIDGE * np.eye(J * k)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta + t * step
            new = objective(cand)
            if new >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        change = np.max(np.abs(cand - theta))
        theta, obj = cand, new
        if change < COEF_TOL:
            converged = True
            break
    P = probs(theta)
    score = ((Y - P[:, :J]) * v[:, None]).T @ Z
    smax = float(np.max(np.abs(score.ravel() - 2 * RIDGE * theta)))
    if not converged:
        logger.warning("multinomial fit stopped after %d iterations", it)
    P = np.clip(P, PROB_CLIP, 1 - PROB_CLIP)
    P /= P.sum(axis=1, keepdims=True)
    coef = theta.reshape(J, k)
    return FittedPropensity("multinomial", P, coef[:, :sample.p].T, coef[:, sample.p:].T,
                            converged, it, obj, score_max=smax)
