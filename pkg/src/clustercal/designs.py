"""Two-stage sampling: systematic PPS selection of clusters, Poisson selection of units.

First-order probabilities are exact. Joint cluster probabilities use the
Hartley-Rao (1962) expansion for randomized systematic PPS, which is what the
linearized variance estimator consumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

logger = logging.getLogger(__name__)

_CERTAIN = 1.0 - 1e-12


def pps_inclusion_probs(size_measures, m: int) -> np.ndarray:
    """First-order PPS inclusion probabilities with iterative certainty handling.

    Clusters whose scaled probability reaches 1 are taken with certainty and
    the remaining ``m - #certain`` draws are re-allocated proportionally over
    the rest, until every probability is at most 1.

    Args:
        size_measures: Positive measure of size per cluster.
        m: Number of clusters to draw.

    Returns:
        Array of probabilities summing to ``m``.
    """
    sizes = np.asarray(size_measures, dtype=float)
    M = sizes.size
    if not 1 <= m <= M:
        raise DomainError(f"m={m} must lie in [1, {M}]")
    if np.any(~np.isfinite(sizes)) or np.any(sizes <= 0):
        raise DomainError("size measures must be finite and positive")

    pi = np.zeros(M)
    certain = np.zeros(M, dtype=bool)
    while True:
        rest = ~certain
        k = m - int(certain.sum())
        if k == 0 or not rest.any():
            break
        pi[rest] = k * sizes[rest] / sizes[rest].sum()
        newly = rest & (pi >= 1.0)
        if not newly.any():
            break
        certain |= newly
        pi[newly] = 1.0
    pi[certain] = 1.0
    return pi


def draw_pps_systematic(probs, rng: np.random.Generator) -> np.ndarray:
    """Randomized systematic PPS draw.

    Certainty clusters are always taken; the others are put in random order
    and hit by a systematic grid with random start on their cumulated
    probabilities.

    Returns:
        Sorted array of selected cluster indices, of length ``round(sum(probs))``.
    """
    probs = np.asarray(probs, dtype=float)
    total = probs.sum()
    m = int(round(total))
    if abs(total - m) > 1e-9 * max(1.0, total):
        raise DomainError(f"probabilities sum to {total!r}, not an integer")
    if np.any(probs <= 0) or np.any(probs > 1 + 1e-12):
        raise DomainError("probabilities must lie in (0, 1]")

    certain = np.flatnonzero(probs >= _CERTAIN)
    rest = np.flatnonzero(probs < _CERTAIN)
    k = m - certain.size
    chosen = [certain]
    if k > 0:
        order = rng.permutation(rest)
        cum = np.cumsum(probs[order])
        points = rng.uniform() + np.arange(k)
        hit = np.searchsorted(cum, points, side="right")
        chosen.append(order[np.minimum(hit, order.size - 1)])
    out = np.sort(np.concatenate(chosen))
    return out


def poisson_within_probs(z, n: float) -> np.ndarray:
    """Within-cluster Poisson inclusion probabilities ``n z / sum(z)``, clipped at 1.

    Mass lost to clipping is not re-allocated, so the expected sample size
    can fall below ``n`` in small clusters.
    """
    z = np.asarray(z, dtype=float)
    if n < 1:
        raise DomainError(f"n={n} must be at least 1")
    if np.any(~np.isfinite(z)) or np.any(z <= 0):
        raise DomainError("size measures must be finite and positive")
    return np.minimum(n * z / z.sum(), 1.0)


def draw_poisson(probs, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli inclusion; returns a boolean mask."""
    probs = np.asarray(probs, dtype=float)
    return rng.uniform(size=probs.size) < probs


@dataclass(frozen=True)
class FirstStageDesign:
    """Fixed-size PPS design over clusters.

    ``probs`` covers the whole population when it is known (simulation).
    For analysed files only the sampled clusters' probabilities are known;
    :meth:`from_sample` then estimates the population sum of squared
    non-certainty probabilities by its Horvitz-Thompson estimate.
    """

    probs: np.ndarray
    m: int
    kind: str = "pps-systematic"
    size_measures: np.ndarray | None = None
    sum_sq_noncertain: float = field(default=float("nan"))

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if np.isnan(self.sum_sq_noncertain):
            rest = probs[probs < _CERTAIN]
            object.__setattr__(self, "sum_sq_noncertain", float(np.sum(rest**2)))

    @classmethod
    def from_sizes(cls, size_measures, m: int) -> "FirstStageDesign":
        sizes = np.asarray(size_measures, dtype=float)
        return cls(pps_inclusion_probs(sizes, m), m, size_measures=sizes)

    @classmethod
    def from_sample(cls, sampled_probs) -> "FirstStageDesign":
        pi = np.asarray(sampled_probs, dtype=float)
        rest = pi[pi < _CERTAIN]
        return cls(pi, int(pi.size), sum_sq_noncertain=float(rest.sum()))

    @property
    def certainty_set(self) -> np.ndarray:
        return np.flatnonzero(self.probs >= _CERTAIN)

    @property
    def n_certain(self) -> int:
        return int(self.certainty_set.size)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return draw_pps_systematic(self.probs, rng)


@dataclass(frozen=True)
class SecondStageDesign:
    """Poisson sampling within one cluster; joint probabilities factorize."""

    n: float
    size_measures: np.ndarray
    kind: str = "poisson"

    @property
    def probs(self) -> np.ndarray:
        return poisson_within_probs(self.size_measures, self.n)

    def joint(self, k: int, l: int) -> float:
        p = self.probs
        return float(p[k]) if k == l else float(p[k] * p[l])


class JointInclusion:
    """Pairwise cluster inclusion probabilities for a :class:`FirstStageDesign`.

    Indexing by ``(i, j)`` refers to positions in ``design.probs``. Pairs
    involving a certainty cluster get ``pi_i * pi_j``; the diagonal is
    ``pi_i``; other pairs use the Hartley-Rao expansion with the
    non-certainty draw count and squared-probability sum.
    """

    def __init__(self, design: FirstStageDesign):
        self.design = design
        self.n_draw = design.m - design.n_certain
        self.sum_sq = design.sum_sq_noncertain

    def __call__(self, i: int, j: int) -> float:
        p = self.design.probs
        return float(self.matrix(p[[i, j]])[0, 1]) if i != j else float(p[i])

    def matrix(self, pi) -> np.ndarray:
        """Joint probability matrix for a vector of first-order probabilities."""
        pi = np.asarray(pi, dtype=float)
        n = self.n_draw
        pp = np.outer(pi, pi)
        if n >= 1:
            hr = (
                (n - 1) / n * pp
                + (n - 1) / n**2 * pp * (pi[:, None] + pi[None, :])
                - (n - 1) / n**3 * pp * self.sum_sq
            )
        else:
            hr = pp.copy()
        certain = pi >= _CERTAIN
        hr = np.where(certain[:, None] | certain[None, :], pp, hr)
        # Keep the approximation inside the feasible range (0, min(pi_i, pi_j)].
        upper = np.minimum(pi[:, None], pi[None, :])
        hr = np.clip(hr, 1e-300, upper)
        np.fill_diagonal(hr, pi)
        return hr


def joint_inclusion(design: FirstStageDesign) -> JointInclusion:
    return JointInclusion(design)
