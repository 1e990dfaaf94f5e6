import numpy as np
import pytest
from scipy.special import logit
from scipy.stats import norm

from clustercal.designs import FirstStageDesign
from clustercal.errors import DomainError, ScenarioConfigError
from clustercal.frames import PopulationFrame
from clustercal.scenarios import (
    ScenarioSpec,
    cluster_sizes,
    draw_two_stage,
    gen_population,
    synthetic_sample,
)


@pytest.mark.parametrize("u,size", [(0.0, 440), (-2.0, 250), (40.0, 500), (-40.0, 1)])
def test_cluster_size_formula(u, size):
    assert cluster_sizes([u])[0] == size


def test_cluster_size_range():
    sizes = cluster_sizes(np.random.default_rng(0).standard_normal(10_000))
    assert sizes.max() <= 500
    # the lower tail of U dips below 100 now and then
    assert np.mean((sizes >= 100) & (sizes <= 500)) > 0.99


@pytest.mark.parametrize("number,outcome,link", [
    (1, "linear-mixed", "logit"), (3, "linear-mixed", "cloglog"), (5, "logistic-mixed", "probit"),
])
def test_scenario_table(number, outcome, link):
    spec = ScenarioSpec.scenario(number)
    assert (spec.outcome_model, spec.ps_link, spec.number) == (outcome, link, number)


@pytest.mark.parametrize("kw", [dict(m=0), dict(m=3000), dict(n=0), dict(table1=True, m=40),
                                dict(ps_link="cauchit"), dict(outcome_model="poisson")])
def test_spec_validation(kw):
    with pytest.raises(DomainError):
        ScenarioSpec(**kw)


def test_unknown_scenario():
    with pytest.raises(DomainError):
        ScenarioSpec.scenario(7)


def test_table1_regimes_accepted():
    for m, n in ((50, 50), (100, 30), (30, 100)):
        ScenarioSpec(m=m, n=n, table1=True)


def test_population_structure():
    spec = ScenarioSpec.scenario(1, M=300)
    pop = gen_population(spec, np.random.default_rng(2))
    assert pop.u.size == 300 and pop.total_size == cluster_sizes(pop.u).sum()
    uu = np.repeat(pop.u, pop.sizes)
    # Y(1) - Y(0) = tau + (tau - 1) U exactly in the linear model
    np.testing.assert_allclose(pop.y1 - pop.y0, 2 + uu, atol=1e-12)
    e = pop.y0 - pop.x[:, 0] - uu
    np.testing.assert_array_equal(pop.z, np.where(e < 0, 0.5, 1.0))


def test_logistic_population_binary():
    pop = gen_population(ScenarioSpec.scenario(4, M=100), np.random.default_rng(3))
    assert set(np.unique(pop.y0)) <= {0.0, 1.0} and set(np.unique(pop.y1)) <= {0.0, 1.0}
    np.testing.assert_array_equal(pop.z, np.where(pop.outcome == 0, 0.5, 1.0))


def test_treatment_model_frequency():
    spec = ScenarioSpec.scenario(2, M=2000, gamma1=-1.1)
    pop = gen_population(spec, np.random.default_rng(4))
    uu = np.repeat(pop.u, pop.sizes)
    p = norm.cdf(-1.1 * uu + pop.x[:, 0])
    se = np.sqrt(np.sum(p * (1 - p))) / p.size
    assert abs(pop.treatment.mean() - p.mean()) < 4 * se


def test_first_stage_size_fixed():
    spec = ScenarioSpec.scenario(1, M=200, m=15, n=20)
    rng = np.random.default_rng(5)
    pop = gen_population(spec, rng)
    for _ in range(30):
        s = draw_two_stage(pop, spec, rng)
        assert s.n_clusters == 15
        assert s.first_stage is not None


def test_sample_probabilities_attached():
    spec = ScenarioSpec.scenario(1, M=200, m=10, n=20)
    rng = np.random.default_rng(6)
    pop = gen_population(spec, rng)
    s = draw_two_stage(pop, spec, rng)
    design = FirstStageDesign.from_sizes(pop.sizes, 10)
    cl = np.array([int(c) for c in s.cluster_ids])
    np.testing.assert_allclose(s.cluster_pi, design.probs[cl], rtol=1e-14)
    np.testing.assert_allclose(s.weight, 1 / (s.pi_first * s.pi_second), rtol=1e-14)
    # every sampled cluster holds both arms
    for idx in s.cluster_index:
        assert set(s.treatment[idx]) == {0, 1}


def test_mean_within_cluster_size():
    spec = ScenarioSpec.scenario(1, M=300, m=20, n=50)
    rng = np.random.default_rng(7)
    pop = gen_population(spec, rng)
    means = np.array([draw_two_stage(pop, spec, rng, require_both_arms=False).n_rows / 20
                      for _ in range(1000)])
    se = means.std(ddof=1) / np.sqrt(means.size)
    assert abs(means.mean() - 50) < 3 * se + 0.05


def test_z_one_units_twice_as_likely():
    n_units = 400
    z = np.tile([0.5, 1.0], n_units // 2)
    pop = PopulationFrame(u=[0.0], sizes=[n_units], x=np.zeros(n_units),
                          treatment=np.tile([0, 1], n_units // 2), y0=np.zeros(n_units),
                          y1=np.zeros(n_units), z=z)
    spec = ScenarioSpec(M=1, m=1, n=50)
    rng = np.random.default_rng(8)
    hits = np.zeros(n_units)
    for _ in range(2000):
        hits[np.array([int(u) for u in draw_two_stage(pop, spec, rng,
                                                       require_both_arms=False).unit_id])] += 1
    ratio = hits[z == 1].mean() / hits[z == 0.5].mean()
    assert ratio == pytest.approx(2.0, rel=0.03)


def test_redraw_limit():
    n_units = 5000
    a = np.zeros(n_units, dtype=int)
    a[0] = 1
    z = np.ones(n_units)
    z[0] = 0.5
    pop = PopulationFrame(u=[0.0], sizes=[n_units], x=np.zeros(n_units), treatment=a,
                          y0=np.zeros(n_units), y1=np.zeros(n_units), z=z)
    spec = ScenarioSpec(M=1, m=1, n=1)
    with pytest.raises(ScenarioConfigError, match="redraws"):
        draw_two_stage(pop, spec, np.random.default_rng(0))


def test_single_arm_cluster_left_out():
    sizes = [300, 50, 300]
    N = sum(sizes)
    a = np.tile([0, 1], N // 2)
    a[300:350] = 1
    pop = PopulationFrame(u=[0.0, 0.0, 0.0], sizes=sizes, x=np.zeros(N), treatment=a,
                          y0=np.zeros(N), y1=np.zeros(N), z=np.ones(N))
    spec = ScenarioSpec(M=3, m=3, n=20)
    s = draw_two_stage(pop, spec, np.random.default_rng(1))
    assert s.cluster_ids == ("0", "2")
    kept = draw_two_stage(pop, spec, np.random.default_rng(1), require_both_arms=False)
    assert "1" in kept.cluster_ids


def test_all_single_arm_is_an_error():
    pop = PopulationFrame(u=[0.0], sizes=[10], x=np.zeros(10), treatment=np.ones(10, int),
                          y0=np.zeros(10), y1=np.zeros(10), z=np.ones(10))
    with pytest.raises(ScenarioConfigError):
        draw_two_stage(pop, ScenarioSpec(M=1, m=1, n=5), np.random.default_rng(0))


def test_truth_matches_size_weighted_formula():
    spec = ScenarioSpec.scenario(1, M=400)
    truths = []
    for r in range(50):
        pop = gen_population(spec, np.random.default_rng([11, r]))
        direct = 2 + np.sum(pop.sizes * pop.u) / pop.sizes.sum()
        assert pop.finite_population_ate() == pytest.approx(direct, abs=1e-10)
        truths.append(direct)

    # size == k exactly when U lies in [logit(k/500) - 2, logit((k+1)/500) - 2)
    k = np.arange(1, 501)
    lo = logit(k / 500) - 2
    hi = logit(np.minimum(k + 1, 500) / 500) - 2
    hi[-1] = np.inf
    lo[0] = -np.inf
    num = np.sum(k * (norm.pdf(lo) - norm.pdf(hi)))
    den = np.sum(k * (norm.cdf(hi) - norm.cdf(lo)))
    assert np.mean(truths) == pytest.approx(2 + num / den, abs=0.05)


def test_synthetic_sample_deterministic():
    spec = ScenarioSpec.scenario(1, M=100, m=8, n=15)
    a, b = synthetic_sample(spec, 3), synthetic_sample(spec, 3)
    np.testing.assert_array_equal(a.outcome, b.outcome)
    np.testing.assert_array_equal(a.weight, b.weight)
