import os

import numpy as np
import pytest

from clustercal.frames import SampleFrame

WORKERS = os.cpu_count() or 1


def make_sample(rng, n_clusters=5, per_cluster=(6, 15), p=1, levels=(0, 1), probabilities=True,
                confounded=True):
    """Random clustered sample where every cluster holds every treatment level."""
    ids, a, x, y, pf, ps = [], [], [], [], [], []
    for c in range(n_clusters):
        size = int(rng.integers(per_cluster[0], per_cluster[1] + 1))
        size = max(size, len(levels))
        u = rng.normal()
        xc = rng.normal(size=(size, p)) + (0.5 * u if confounded else 0.0)
        ac = rng.choice(levels, size=size)
        ac[: len(levels)] = rng.permutation(levels)
        ids += [f"c{c}"] * size
        a.append(ac)
        x.append(xc)
        y.append(xc.sum(1) + u + ac + rng.normal(size=size))
        pf += [rng.uniform(0.05, 1.0)] * size
        ps.append(rng.uniform(0.1, 1.0, size))
    kw = dict(pi_first=np.array(pf), pi_second=np.concatenate(ps)) if probabilities else dict(
        weight=1.0 / (np.array(pf) * np.concatenate(ps)))
    return SampleFrame.from_arrays(ids, np.concatenate(a), np.concatenate(y), np.vstack(x),
                                   levels=levels, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def scenario1_report():
    """Scenario 1 at (50, 50) with 1000 replicates, shared by the acceptance checks."""
    from clustercal.montecarlo import run_scenario
    from clustercal.scenarios import ScenarioSpec

    spec = ScenarioSpec.scenario(1, m=50, n=50, M=2000, replications=1000, seed=1)
    return run_scenario(spec, estimators=("simple", "fixed", "random", "calibrated",
                                          "calibrated-uniform"), workers=WORKERS)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
