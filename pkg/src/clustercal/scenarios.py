"""Synthetic populations with shared cluster confounding, and two-stage draws from them."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import expit

from .designs import FirstStageDesign, draw_poisson, poisson_within_probs
from .errors import DomainError, ScenarioConfigError
from .frames import PopulationFrame, SampleFrame
from .glm import LINKS, inverse_link

logger = logging.getLogger(__name__)

OUTCOME_MODELS = ("linear-mixed", "logistic-mixed")
TABLE1_SIZES = ((50, 50), (100, 30), (30, 100))
MAX_REDRAWS = 1000

_SCENARIOS = {
    1: ("linear-mixed", "logit"),
    2: ("linear-mixed", "probit"),
    3: ("linear-mixed", "cloglog"),
    4: ("logistic-mixed", "logit"),
    5: ("logistic-mixed", "probit"),
    6: ("logistic-mixed", "cloglog"),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation configuration.

    Treatment follows ``A ~ Bernoulli(h(gamma0 + gamma1 U + X))`` with ``h``
    the inverse of ``ps_link``. ``table1=True`` restricts ``(m, n)`` to the
    three published sample-size regimes.
    """

    outcome_model: str = "linear-mixed"
    ps_link: str = "logit"
    m: int = 50
    n: int = 50
    M: int = 2000
    tau: float = 2.0
    gamma0: float = 0.0
    gamma1: float = -1.1
    replications: int = 1000
    seed: int = 0
    table1: bool = False

    def __post_init__(self):
        if self.outcome_model not in OUTCOME_MODELS:
            raise DomainError(f"outcome_model must be one of {OUTCOME_MODELS}")
        if self.ps_link not in LINKS:
            raise DomainError(f"ps_link must be one of {LINKS}")
        if not 1 <= self.m <= self.M:
            raise DomainError(f"need 1 <= m <= M, got m={self.m}, M={self.M}")
        if self.n < 1 or self.replications < 1:
            raise DomainError("n and replications must be positive")
        if self.table1 and (self.m, self.n) not in TABLE1_SIZES:
            raise DomainError(f"(m, n) = ({self.m}, {self.n}) is not a Table-1 regime")

    @classmethod
    def scenario(cls, number: int, **overrides) -> "ScenarioSpec":
        """Scenarios 1-3: linear outcome; 4-6: logistic outcome; links logit, probit, cloglog."""
        try:
            outcome, ps_link = _SCENARIOS[int(number)]
        except KeyError:
            raise DomainError(f"scenario must be 1..6, got {number!r}") from None
        return cls(outcome_model=outcome, ps_link=ps_link, **overrides)

    @property
    def number(self) -> int:
        for k, v in _SCENARIOS.items():
            if v == (self.outcome_model, self.ps_link):
                return k
        raise AssertionError("unreachable")

    def with_(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def cluster_sizes(u) -> np.ndarray:
    """``floor(500 expit(2 + u))``, at least 1."""
    return np.maximum(np.floor(500.0 * expit(2.0 + np.asarray(u, dtype=float))), 1).astype(np.int64)


def gen_population(spec: ScenarioSpec, rng: np.random.Generator) -> PopulationFrame:
    """Draw a finite population of ``spec.M`` clusters."""
    u = rng.standard_normal(spec.M)
    sizes = cluster_sizes(u)
    N = int(sizes.sum())
    uu = np.repeat(u, sizes)
    x = rng.standard_normal(N)
    e = rng.standard_normal(N)
    a = (rng.uniform(size=N) < inverse_link(spec.ps_link, spec.gamma0 + spec.gamma1 * uu + x))
    a = a.astype(np.int64)
    tau = spec.tau
    if spec.outcome_model == "linear-mixed":
        y0 = x + uu + e
        y1 = x + tau + tau * uu + e
        z = np.where(e < 0, 0.5, 1.0)
    else:
        y0 = (rng.uniform(size=N) < expit(x + uu)).astype(float)
        y1 = (rng.uniform(size=N) < expit(x + tau + tau * uu)).astype(float)
        z = np.where(np.where(a == 1, y1, y0) == 0, 0.5, 1.0)
    return PopulationFrame(u=u, sizes=sizes, x=x, treatment=a, y0=y0, y1=y1, z=z)


def draw_two_stage(pop: PopulationFrame, spec: ScenarioSpec, rng: np.random.Generator, *,
                   require_both_arms: bool = True,
                   design: FirstStageDesign | None = None) -> SampleFrame:
    """PPS-systematic cluster draw followed by Poisson unit draws.

    When ``require_both_arms`` is set, a sampled cluster whose Poisson draw
    misses an arm is redrawn at the second stage only. A sampled cluster in
    which every population unit shares one arm can never be redrawn into
    shape; it is left out of the sample and logged.

    Raises:
        ScenarioConfigError: a cluster needed more than 1000 redraws.
    """
    if design is None:
        design = FirstStageDesign.from_sizes(pop.sizes, spec.m)
    chosen = design.draw(rng)
    off = pop.offsets
    rows, ps = [], []
    redraws = 0
    skipped = []
    for i in chosen:
        lo, hi = off[i], off[i + 1]
        p = poisson_within_probs(pop.z[lo:hi], spec.n)
        a = pop.treatment[lo:hi]
        if require_both_arms and a.min() == a.max():
            skipped.append(int(i))
            continue
        for attempt in range(MAX_REDRAWS + 1):
            keep = draw_poisson(p, rng)
            if not require_both_arms or (keep.any() and a[keep].min() == 0 and a[keep].max() == 1):
                break
        else:
            raise ScenarioConfigError(
                f"cluster {i} lacked a treatment arm after {MAX_REDRAWS} redraws; "
                "check n and the treatment model"
            )
        redraws += attempt
        idx = np.flatnonzero(keep)
        rows.append(lo + idx)
        ps.append(p[idx])
    if redraws:
        logger.debug("second-stage redraws: %d", redraws)
    if skipped:
        logger.info("left out single-arm population clusters %s", skipped)
    if not rows:
        raise ScenarioConfigError("every sampled cluster holds a single treatment arm")
    rows = np.concatenate(rows)
    ps = np.concatenate(ps)
    if rows.size == 0:
        raise ScenarioConfigError("empty sample")
    cl = pop.unit_cluster[rows]
    y = pop.outcome[rows]
    return SampleFrame.from_arrays(
        cl.astype(str), pop.treatment[rows], y, pop.x[rows],
        pi_first=design.probs[cl], pi_second=ps, unit_ids=rows.astype(str),
        first_stage=design, require_all_levels=require_both_arms,
    )


def synthetic_sample(spec: ScenarioSpec, seed: int) -> SampleFrame:
    """One population and one sample from it, for examples and demos."""
    rng = np.random.default_rng(seed)
    return draw_two_stage(gen_population(spec, rng), spec, rng)
