"""Population and sample data model, design weights and CSV ingestion."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .designs import FirstStageDesign
from .errors import DomainError, LoadError

WEIGHT_RTOL = 1e-8


def design_weight(pi_first: float, pi_second: float) -> float:
    """Return the two-stage design weight ``1 / (pi_first * pi_second)``."""
    for name, p in (("pi_first", pi_first), ("pi_second", pi_second)):
        if not (isinstance(p, (int, float, np.floating)) and 0 < p <= 1):
            raise DomainError(f"{name}={p!r} is not a probability in (0, 1]")
    return 1.0 / (pi_first * pi_second)


def _readonly(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PopulationCluster:
    """One population cluster; every unit shares the latent effect ``u``."""

    cluster_id: int
    u: float
    x: np.ndarray
    a: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    z: np.ndarray

    @property
    def size(self) -> int:
        return int(self.a.size)


@dataclass(frozen=True)
class PopulationFrame:
    """Finite population of M clusters stored as flat unit arrays.

    Unit rows of cluster ``i`` occupy ``offsets[i]:offsets[i + 1]``.
    """

    u: np.ndarray
    sizes: np.ndarray
    x: np.ndarray
    treatment: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.int64)
        if sizes.ndim != 1 or np.any(sizes < 1):
            raise DomainError("every cluster needs at least one unit")
        n = int(sizes.sum())
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        for name, arr in (("treatment", self.treatment), ("y0", self.y0),
                          ("y1", self.y1), ("z", self.z), ("x", x)):
            if len(arr) != n:
                raise DomainError(f"{name} has {len(arr)} rows, expected {n}")
        object.__setattr__(self, "sizes", _readonly(sizes))
        object.__setattr__(self, "u", _readonly(self.u, float))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "treatment", _readonly(self.treatment, np.int64))
        for name in ("y0", "y1", "z"):
            object.__setattr__(self, name, _readonly(getattr(self, name), float))

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @cached_property
    def unit_cluster(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    @property
    def n_clusters(self) -> int:
        return int(self.sizes.size)

    @property
    def total_size(self) -> int:
        return int(self.offsets[-1])

    @property
    def outcome(self) -> np.ndarray:
        return np.where(self.treatment == 1, self.y1, self.y0)

    def cluster(self, i: int) -> PopulationCluster:
        s = slice(self.offsets[i], self.offsets[i + 1])
        return PopulationCluster(i, float(self.u[i]), self.x[s], self.treatment[s],
                                 self.y0[s], self.y1[s], self.z[s])

    @property
    def clusters(self) -> list[PopulationCluster]:
        return [self.cluster(i) for i in range(self.n_clusters)]

    def finite_population_ate(self) -> float:
        """N^-1 sum of Y(1) - Y(0) over every population unit."""
        return float(np.sum(self.y1 - self.y0) / self.total_size)

    def total(self, values) -> float:
        return float(np.sum(values))


@dataclass(frozen=True)
class SampleRow:
    cluster_id: str
    unit_id: str
    pi_first: float
    pi_second: float
    weight: float
    treatment: int
    outcome: float
    x: tuple


@dataclass(frozen=True, eq=False)
class SampleFrame:
    """Analysed two-stage sample held column-wise.

    ``cluster`` holds integer codes into ``cluster_ids``. Inclusion
    probabilities are NaN when a file supplied only weights; everything but
    the linearized variance works in that case.

    Use :meth:`from_arrays` to build a validated frame.
    """

    cluster: np.ndarray
    cluster_ids: tuple
    unit_id: np.ndarray
    pi_first: np.ndarray
    pi_second: np.ndarray
    weight: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    x: np.ndarray
    covariate_names: tuple = ()
    first_stage: FirstStageDesign | None = None
    second_stage: str = "poisson"
    levels: tuple = (0, 1)

    @classmethod
    def from_arrays(
        cls,
        cluster_ids: Sequence,
        treatment,
        outcome,
        x,
        *,
        pi_first=None,
        pi_second=None,
        weight=None,
        unit_ids: Sequence | None = None,
        covariate_names: Sequence[str] | None = None,
        first_stage: FirstStageDesign | None = None,
        levels: Sequence[int] | None = None,
        require_all_levels: bool = True,
    ) -> "SampleFrame":
        """Validate raw columns and build a frame.

        Either both probability columns or ``weight`` must be given; when
        all three are present the weights must agree with the probability
        product to a relative 1e-8. ``levels`` defaults to the binary coding
        ``(0, 1)``; multi-valued treatments use ``(1, ..., T)``.
        """
        labels = [str(c) for c in cluster_ids]
        n = len(labels)
        if n == 0:
            raise DomainError("empty sample")
        uniq, codes = np.unique(np.asarray(labels, dtype=object), return_inverse=True)
        # np.unique sorts; keep first-appearance order instead so ids stay stable.
        first_seen = {}
        for lab in labels:
            first_seen.setdefault(lab, len(first_seen))
        order = np.array([first_seen[u] for u in uniq])
        codes = order[codes]
        ids = tuple(sorted(first_seen, key=first_seen.get))

        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != n:
            raise DomainError(f"x has {x.shape[0]} rows, expected {n}")
        a = np.asarray(treatment)
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise DomainError("treatment labels must be integers")
        a = a.astype(np.int64)
        y = np.asarray(outcome, dtype=float)
        if levels is None:
            levels = (0, 1)
        levels = tuple(int(v) for v in levels)
        bad = ~np.isin(a, levels)
        if bad.any():
            raise DomainError(f"row {int(np.argmax(bad))}: treatment {a[bad][0]} not in {levels}")

        if pi_first is None and pi_second is None:
            if weight is None:
                raise DomainError("need (pi_first, pi_second) or weight")
            pf = np.full(n, np.nan)
            ps = np.full(n, np.nan)
            w = np.asarray(weight, dtype=float)
        else:
            if pi_first is None or pi_second is None:
                raise DomainError("pi_first and pi_second must be given together")
            pf = np.asarray(pi_first, dtype=float)
            ps = np.asarray(pi_second, dtype=float)
            for name, p in (("pi_first", pf), ("pi_second", ps)):
                bad = ~((p > 0) & (p <= 1))
                if bad.any():
                    raise DomainError(f"row {int(np.argmax(bad))}: {name} not in (0, 1]")
            w_pi = 1.0 / (pf * ps)
            if weight is not None:
                w = np.asarray(weight, dtype=float)
                rel = np.abs(w - w_pi) / w_pi
                if np.any(rel > WEIGHT_RTOL):
                    r = int(np.argmax(rel))
                    raise DomainError(
                        f"row {r}: weight {w[r]!r} disagrees with 1/(pi_first*pi_second)={w_pi[r]!r}"
                    )
            w = w_pi
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise DomainError("weights must be finite and positive")
        if np.any(~np.isfinite(y)) or np.any(~np.isfinite(x)):
            raise DomainError("outcome and covariates must be finite")
        if not np.isnan(pf).all():
            spread = np.zeros(len(ids))
            np.maximum.at(spread, codes, pf)
            lo = np.full(len(ids), np.inf)
            np.minimum.at(lo, codes, pf)
            if np.any(spread - lo > 1e-12 * spread):
                raise DomainError("pi_first must be constant within each cluster")

        if require_all_levels:
            check_levels(codes, a, levels, ids)

        if unit_ids is None:
            unit_ids = np.arange(n).astype(str)
        if covariate_names is None:
            covariate_names = tuple(f"x{k + 1}" for k in range(x.shape[1]))
        if first_stage is None and not np.isnan(pf).all():
            pi_c = np.zeros(len(ids))
            pi_c[codes] = pf
            first_stage = FirstStageDesign.from_sample(pi_c)
        return cls(
            cluster=_readonly(codes, np.int64),
            cluster_ids=ids,
            unit_id=_readonly(np.asarray(unit_ids, dtype=object)),
            pi_first=_readonly(pf),
            pi_second=_readonly(ps),
            weight=_readonly(w),
            treatment=_readonly(a),
            outcome=_readonly(y),
            x=_readonly(x),
            covariate_names=tuple(covariate_names),
            first_stage=first_stage,
            levels=levels,
        )

    @property
    def n_rows(self) -> int:
        return int(self.weight.size)

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @cached_property
    def cluster_index(self) -> list[np.ndarray]:
        order = np.argsort(self.cluster, kind="stable")
        bounds = np.cumsum(np.bincount(self.cluster, minlength=self.n_clusters))
        return np.split(order, bounds[:-1])

    @cached_property
    def cluster_n(self) -> np.ndarray:
        """Sampled units per cluster, n_i."""
        return np.bincount(self.cluster, minlength=self.n_clusters)

    @cached_property
    def cluster_weight(self) -> np.ndarray:
        """Per-cluster weight totals, N-hat_i."""
        return np.bincount(self.cluster, weights=self.weight, minlength=self.n_clusters)

    @cached_property
    def cluster_pi(self) -> np.ndarray:
        pi = np.full(self.n_clusters, np.nan)
        pi[self.cluster] = self.pi_first
        return pi

    @property
    def has_probabilities(self) -> bool:
        return not (np.isnan(self.pi_first).any() or np.isnan(self.pi_second).any())

    @property
    def rows(self) -> list[SampleRow]:
        return [
            SampleRow(self.cluster_ids[c], str(u), float(pf), float(ps), float(w),
                      int(a), float(y), tuple(float(v) for v in xr))
            for c, u, pf, ps, w, a, y, xr in zip(
                self.cluster, self.unit_id, self.pi_first, self.pi_second,
                self.weight, self.treatment, self.outcome, self.x)
        ]

    def take(self, idx, cluster_labels=None) -> "SampleFrame":
        """Rows ``idx`` as a new frame; ``cluster_labels`` overrides cluster ids."""
        idx = np.asarray(idx)
        labels = (np.asarray(self.cluster_ids, dtype=object)[self.cluster[idx]]
                  if cluster_labels is None else cluster_labels)
        kw = dict(pi_first=self.pi_first[idx], pi_second=self.pi_second[idx])
        if not self.has_probabilities:
            kw = dict(weight=self.weight[idx])
        return SampleFrame.from_arrays(
            labels, self.treatment[idx], self.outcome[idx], self.x[idx],
            unit_ids=self.unit_id[idx], covariate_names=self.covariate_names,
            levels=self.levels, **kw,
        )


def check_levels(codes, treatment, levels, cluster_ids) -> None:
    """Raise unless every cluster contains every treatment level."""
    n_c = len(cluster_ids)
    for lev in levels:
        present = np.bincount(codes[treatment == lev], minlength=n_c) > 0
        if not present.all():
            c = cluster_ids[int(np.argmin(present))]
            if tuple(levels) == (0, 1):
                arm = "treated" if lev == 1 else "control"
                raise DomainError(f"cluster {c} lacks {arm} units")
            raise DomainError(f"cluster {c} lacks units at treatment level {lev}")


def n_hat(sample: SampleFrame) -> float:
    """Design-weighted population size estimate, the sum of all weights."""
    if sample is None or sample.n_rows == 0:
        raise DomainError("empty sample")
    return float(np.sum(sample.weight))


_X_COL = re.compile(r"^x(\d+)$")


def load_sample(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    *,
    levels: int | None = None,
) -> SampleFrame:
    """Read and validate a two-stage sample CSV.

    Args:
        path: CSV file with a header row.
        schema: Optional mapping from canonical column names
            (``cluster_id``, ``unit_id``, ``pi_first``, ``pi_second``,
            ``weight``, ``treatment``, ``outcome``) to the file's names. A
            ``covariates`` entry may list covariate columns explicitly,
            comma-separated; otherwise columns ``x1..xp`` are used.
        levels: ``None`` for binary 0/1 treatments, or ``T`` for
            treatments coded ``1..T``.

    Raises:
        LoadError: on an unreadable file, missing columns, non-numeric or empty fields,
            inconsistent weights, or clusters lacking a treatment level.
    """
    schema = dict(schema or {})
    col = {k: schema.get(k, k) for k in
           ("cluster_id", "unit_id", "pi_first", "pi_second", "weight", "treatment", "outcome")}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            records = list(reader)
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    if not header:
        raise LoadError(f"{path}: empty file")

    pos = {h: i for i, h in enumerate(header)}
    if "covariates" in schema:
        xcols = [c.strip() for c in schema["covariates"].split(",") if c.strip()]
    else:
        xcols = sorted((h for h in header if _X_COL.match(h)),
                       key=lambda h: int(_X_COL.match(h).group(1)))
    if not xcols:
        raise LoadError(f"{path}: no covariate columns (x1..xp)")
    required = [col["cluster_id"], col["unit_id"], col["treatment"], col["outcome"], *xcols]
    have_pi = col["pi_first"] in pos and col["pi_second"] in pos
    have_w = col["weight"] in pos
    if not (have_pi or have_w):
        required += [col["pi_first"], col["pi_second"]]
    missing = [c for c in required if c not in pos]
    if missing:
        raise LoadError(f"{path}: missing columns {', '.join(missing)}")

    def numeric(name: str) -> np.ndarray:
        j = pos[name]
        out = np.empty(len(records))
        for r, rec in enumerate(records):
            line = r + 2
            if j >= len(rec) or rec[j].strip() == "":
                raise LoadError(f"{path}: row {line}: missing value in column {name}")
            try:
                out[r] = float(rec[j])
            except ValueError:
                raise LoadError(f"{path}: row {line}: non-numeric {name}={rec[j]!r}") from None
            if not math.isfinite(out[r]):
                raise LoadError(f"{path}: row {line}: non-finite {name}")
        return out

    def text(name: str) -> list[str]:
        j = pos[name]
        vals = []
        for r, rec in enumerate(records):
            if j >= len(rec) or rec[j].strip() == "":
                raise LoadError(f"{path}: row {r + 2}: missing value in column {name}")
            vals.append(rec[j].strip())
        return vals

    if not records:
        raise LoadError(f"{path}: no data rows")
    clusters = text(col["cluster_id"])
    units = text(col["unit_id"])
    a = numeric(col["treatment"])
    y = numeric(col["outcome"])
    x = np.column_stack([numeric(c) for c in xcols])
    kw = {}
    if have_pi:
        kw["pi_first"] = numeric(col["pi_first"])
        kw["pi_second"] = numeric(col["pi_second"])
    if have_w:
        kw["weight"] = numeric(col["weight"])

    lev = (0, 1) if levels is None else tuple(range(1, int(levels) + 1))
    bad = ~np.isin(a, lev)
    if bad.any():
        r = int(np.argmax(bad))
        raise LoadError(f"{path}: row {r + 2}: treatment {a[r]:g} not in {lev}")
    try:
        return SampleFrame.from_arrays(clusters, a, y, x, unit_ids=units,
                                       covariate_names=xcols, levels=lev, **kw)
    except DomainError as exc:
        msg = str(exc)
        m = re.match(r"row (\d+): (.*)", msg)
        if m:
            msg = f"row {int(m.group(1)) + 2}: {m.group(2)}"
        raise LoadError(f"{path}: {msg}") from None


def write_sample(sample: SampleFrame, path: str | Path) -> None:
    """Write a frame in the CSV layout accepted by :func:`load_sample`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        names = list(sample.covariate_names)
        cols = ["cluster_id", "unit_id"]
        cols += ["pi_first", "pi_second"] if sample.has_probabilities else ["weight"]
        w.writerow(cols + ["treatment", "outcome"] + names)
        for r in range(sample.n_rows):
            row = [sample.cluster_ids[sample.cluster[r]], sample.unit_id[r]]
            if sample.has_probabilities:
                row += [repr(float(sample.pi_first[r])), repr(float(sample.pi_second[r]))]
            else:
                row += [repr(float(sample.weight[r]))]
            row += [int(sample.treatment[r]), repr(float(sample.outcome[r]))]
            row += [repr(float(v)) for v in sample.x[r]]
            w.writerow(row)
