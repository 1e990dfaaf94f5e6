import json
from importlib import resources

import jsonschema
import numpy as np
import pytest
from referencing import Registry, Resource

from clustercal.analysis import AnalysisConfig, analyse_sample, run_analysis, run_multi
from clustercal.frames import SampleFrame, write_sample
from clustercal.scenarios import ScenarioSpec, synthetic_sample
from conftest import make_sample


def schema_validator(name):
    files = resources.files("clustercal") / "schemas"
    docs = {p.name: json.loads(p.read_text()) for p in files.iterdir() if p.name.endswith(".json")}
    registry = Registry().with_resources(
        (k, Resource.from_contents(v)) for k, v in docs.items())
    return jsonschema.Draft202012Validator(docs[name], registry=registry)


def _randomized(seed, m=30, size=60):
    rng = np.random.default_rng(seed)
    ids, a, y, x, pf, ps = [], [], [], [], [], []
    for c in range(m):
        u = rng.normal()
        xc = rng.normal(size=size)
        ac = rng.integers(0, 2, size)
        ac[:2] = (0, 1)
        ids += [f"k{c}"] * size
        a.append(ac)
        x.append(xc)
        y.append(xc + u + 2 * ac + rng.normal(size=size))
        pf += [rng.uniform(0.2, 0.6)] * size
        ps.append(rng.uniform(0.3, 0.9, size))
    return SampleFrame.from_arrays(ids, np.concatenate(a), np.concatenate(y), np.concatenate(x),
                                   pi_first=np.array(pf), pi_second=np.concatenate(ps))


def test_confounded_sample_separates_simple_from_calibrated():
    spec = ScenarioSpec.scenario(1, M=2000, gamma1=-2.5)
    s = synthetic_sample(spec, 21)
    res = analyse_sample(s, AnalysisConfig(methods=("simple", "calibrated"), bootstrap=100, seed=1))
    simple, cal = res.estimates
    sd = np.sqrt(max(simple.variance, cal.variance))
    assert abs(simple.estimate - cal.estimate) > 2 * sd


@pytest.mark.slow
def test_randomized_sample_methods_agree():
    s = _randomized(3)
    res = analyse_sample(s, AnalysisConfig(bootstrap=60, seed=2))
    est = {r.estimator: r for r in res.estimates}
    assert list(est) == ["simple", "iptw-fixed", "iptw-random", "calibrated"]
    for a in est.values():
        for b in est.values():
            sd = np.sqrt(max(a.variance, b.variance))
            assert abs(a.estimate - b.estimate) <= 2 * sd


def test_linearized_mode_and_schema(tmp_path):
    s = make_sample(np.random.default_rng(4), n_clusters=6, per_cluster=(20, 30), p=2)
    f = tmp_path / "s.csv"
    write_sample(s, f)
    res = run_analysis(f, AnalysisConfig(bootstrap=0))
    doc = json.loads(res.to_json())
    schema_validator("analysis.schema.json").validate(doc)
    assert [e["diagnostics"]["variance_method"] for e in doc["estimates"]] == ["linearized"] * 4
    for e in doc["estimates"]:
        assert e["ci_lower"] <= e["estimate"] <= e["ci_upper"]
    assert doc["balance"]["methods"] == ["simple", "iptw-fixed", "iptw-random", "calibrated"]


def test_bootstrap_mode_reproducible():
    s = make_sample(np.random.default_rng(5), n_clusters=6, per_cluster=(20, 30))
    cfg = AnalysisConfig(methods=("simple", "calibrated"), bootstrap=20, seed=7)
    a = analyse_sample(s, cfg).to_json()
    b = analyse_sample(s, AnalysisConfig(methods=cfg.methods, bootstrap=20, seed=7, workers=3)).to_json()
    assert a == b
    # dropping a method leaves the others' bootstrap streams alone
    c = analyse_sample(s, AnalysisConfig(methods=("calibrated",), bootstrap=20, seed=7))
    assert json.loads(a)["estimates"][1]["variance"] == c.estimates[0].variance


def test_weights_without_probabilities_have_no_linearization():
    s = make_sample(np.random.default_rng(6), probabilities=False)
    res = analyse_sample(s, AnalysisConfig(methods=("simple",), bootstrap=0))
    assert res.estimates[0].variance is None
    assert res.estimates[0].diagnostics["variance_method"] == "none"


def test_multi_report():
    s = make_sample(np.random.default_rng(7), n_clusters=5, per_cluster=(30, 40),
                    levels=(1, 2, 3), confounded=False)
    rep = run_multi(s, 3, 1, 3)
    schema_validator("estimate_report.schema.json").validate(rep.to_dict())
    back = run_multi(s, 3, 3, 1)
    assert back.estimate == pytest.approx(-rep.estimate, abs=1e-12)
    assert back.variance == pytest.approx(rep.variance, rel=1e-12)
