import json
import math

import numpy as np
import pytest

from bivmeta.copula import bernoulli_frank_table, theta_from_spearman
from bivmeta.core_types import PosteriorSummary
from bivmeta.mcmc import summarize
from bivmeta.simulation import (
    MODELS, ReplicationResult, ScenarioConfig, Truth, TruthSnapshot, aggregate, factorial_cells, generate_dataset,
    parse_scenario, point_estimate, replication_seed, run_replication, run_replications, scenario_grid,
    write_outputs,
)


def test_factorial_has_18_unique_cells():
    cells = factorial_cells()
    assert len(cells) == 18 and len(set(cells)) == 18
    grid = scenario_grid(replications=5)
    assert sorted(c.index for c in grid) == list(range(18))
    assert all(c.replications == 5 for c in grid)


def test_parse_scenario():
    cfg = parse_scenario("eta=3,assoc=strong,m=300", replications=7)
    assert (cfg.eta, cfg.assoc, cfg.m, cfg.replications) == (3.0, "strong", 300, 7)
    assert cfg.label == "eta=3,assoc=strong,m=300"
    assert cfg.spearman == 0.75
    for bad in ("eta=3,assoc=strong", "eta=3,assoc=huge,m=80", "eta=3;assoc=weak;m=80", "eta=3,assoc=weak,m=80,x=1"):
        with pytest.raises(ValueError):
            parse_scenario(bad)


def test_off_grid_index_is_stable():
    a = ScenarioConfig(eta=1.5, assoc="weak", m=50)
    assert a.index >= 100 and a.index == ScenarioConfig(eta=1.5, assoc="weak", m=50).index


def test_truth_validation():
    with pytest.raises(ValueError):
        Truth(tau1=-0.1)
    with pytest.raises(ValueError):
        Truth(rho_b=1.2)


def test_replication_seeds_distinct():
    cfg = ScenarioConfig(eta=0, assoc="weak", m=80)
    states = {tuple(replication_seed(cfg, r).generate_state(2)) for r in range(50)}
    assert len(states) == 50
    other = ScenarioConfig(eta=0, assoc="weak", m=300)
    assert replication_seed(cfg, 0).generate_state(2).tolist() != replication_seed(other, 0).generate_state(2).tolist()


def test_counts_match_ipd_and_sizes():
    cfg = ScenarioConfig(eta=3, assoc="moderate", m=80)
    studies, truth = generate_dataset(cfg, 0)
    assert len(studies) == 30 and truth.delta1.shape == (30,)
    for s in studies:
        r = s.record
        assert r.n_ctrl == len(s.ipd_ctrl) >= 2 and r.n_trt == len(s.ipd_trt) >= 2
        assert r.r1_ctrl == s.ipd_ctrl[:, 0].sum() and r.r2_ctrl == s.ipd_ctrl[:, 1].sum()
        assert r.r1_trt == s.ipd_trt[:, 0].sum() and r.r2_trt == s.ipd_trt[:, 1].sum()
        assert 0 <= r.r1_trt <= r.n_trt


def test_generation_is_deterministic():
    cfg = ScenarioConfig(eta=0, assoc="weak", m=80, seed=3)
    a, ta = generate_dataset(cfg, 4)
    b, tb = generate_dataset(cfg, 4)
    assert [s.record for s in a] == [s.record for s in b]
    assert np.array_equal(ta.delta2, tb.delta2)
    c, _ = generate_dataset(cfg, 5)
    assert [s.record for s in a] != [s.record for s in c]


@pytest.mark.parametrize("eta,expected", [(0, 0.5), (3, 0.9526), (4, 0.9820)])
def test_control_proportion_by_eta(eta, expected):
    cfg = ScenarioConfig(eta=eta, assoc="weak", m=80, n_studies=200)
    studies, _ = generate_dataset(cfg, 0)
    prop = np.mean([s.record.r1_ctrl / s.record.n_ctrl for s in studies])
    assert prop == pytest.approx(expected, abs=0.01)


def test_weak_association_empirical_correlation():
    truth = Truth(d1=0.0, d2=0.0, tau1=0.0, tau2=0.0, s1=0.0, s2=0.0)
    cfg = ScenarioConfig(eta=0, assoc="weak", m=300, n_studies=60, truth=truth)
    studies, tr = generate_dataset(cfg, 0)
    bits = np.concatenate([np.concatenate([s.ipd_ctrl, s.ipd_trt]) for s in studies]).astype(float)
    phi = np.corrcoef(bits.T)[0, 1]
    t = bernoulli_frank_table(0.5, 0.5, theta_from_spearman(0.15))
    phi_exact = (t[1, 1] - 0.25) / 0.25
    se = 1 / math.sqrt(len(bits))
    assert abs(phi - phi_exact) < 4 * se
    assert tr.theta == pytest.approx(theta_from_spearman(0.15))


def _summary(name, est, lo, hi):
    return PosteriorSummary(name, est, est, 0.1, lo, hi, 1.0, 400.0)


def _fake_result(rep, shift, converged=True):
    truth = TruthSnapshot(np.array([0.1, 0.3]), np.array([0.2, -0.2]), np.zeros(2), np.zeros(2), 1.0)
    summ = {}
    for m in MODELS:
        ss = [_summary("rho_b", 0.8 + shift, 0.5, 0.9), _summary("tau1", 0.5 + shift, 0.4, 0.6),
              _summary("tau2", 0.5, 0.6, 0.7), _summary("d1", 0.4, 0.3, 0.5), _summary("d2", 0.2, 0.1, 0.3),
              _summary("delta2[0]", 0.2 + shift, 0.0, 0.4), _summary("delta2[1]", -0.2 - shift, -0.3, -0.25)]
        summ[m] = ss
    conv = {m: converged for m in MODELS}
    return ReplicationResult(rep, summ, truth, conv)


def test_aggregate_metrics_by_hand():
    cfg = ScenarioConfig(eta=0, assoc="weak", m=80)
    results = [_fake_result(0, 0.1), _fake_result(1, -0.05), _fake_result(2, 5.0, converged=False)]
    table = aggregate(cfg, results)
    assert table.excluded["any"] == 1 and table.n_replications == 3
    rho = table.get("BRMA", "rho_b")
    assert rho.bias == pytest.approx(0.025)
    assert rho.rmse == pytest.approx(math.sqrt((0.01 + 0.0025) / 2))
    assert rho.coverage == pytest.approx(1.0) and rho.n_used == 2
    assert table.get("BRMA_IB", "tau2").coverage == 0.0
    d2 = table.get("BRMA_BC", "delta2")
    # per replication: errors (s, -s) average to 0; squared errors average to s^2
    assert d2.bias == pytest.approx(0.0, abs=1e-15)
    assert d2.rmse == pytest.approx(math.sqrt((0.01 + 0.0025) / 2))
    assert d2.coverage == pytest.approx(0.5)
    csv_text = table.to_csv()
    assert csv_text.splitlines()[0] == "model,parameter,bias,coverage,rmse"
    with pytest.raises(KeyError):
        table.get("BRMA", "nope")


def test_all_excluded_gives_nan():
    cfg = ScenarioConfig(eta=0, assoc="weak", m=80)
    table = aggregate(cfg, [_fake_result(0, 0.0, converged=False)])
    assert math.isnan(table.get("BRMA", "rho_b").bias)


def test_point_estimate_rule():
    assert point_estimate(PosteriorSummary("rho_b", 0.1, 0.3, 0.1, 0, 1, 1, 1)) == 0.3
    assert point_estimate(PosteriorSummary("tau1", 0.1, 0.3, 0.1, 0, 1, 1, 1)) == 0.1


def test_coverage_matches_raw_draw_recomputation():
    rng = np.random.default_rng(0)
    draws = rng.normal(0.3, 0.2, (2, 500, 1))
    s = summarize(draws, ["d1"])[0]
    q = np.quantile(draws.ravel(), [0.025, 0.975])
    assert (s.ci_low, s.ci_high) == pytest.approx(tuple(q))


@pytest.fixture(scope="module")
def tiny_cfg():
    return ScenarioConfig(eta=0, assoc="moderate", m=60, n_studies=5, replications=2, chains=2,
                          warmup=150, iters=150, bootstrap=50, seed=11)


@pytest.fixture(scope="module")
def tiny_results(tiny_cfg):
    return run_replications(tiny_cfg)


def test_replication_smoke(tiny_results):
    r = tiny_results[0]
    assert set(r.summaries) == set(MODELS)
    names = [s.parameter for s in r.summaries["BRMA_BC"]]
    assert names[:5] == ["rho_b", "tau1", "tau2", "d1", "d2"]
    assert sum(n.startswith("delta2[") for n in names) == 5
    assert len(r.associations) == 5
    obj = json.loads(r.to_json())
    assert obj["rep"] == 0 and len(obj["truth"]["delta2"]) == 5


def test_replications_bit_reproducible(tiny_cfg, tiny_results):
    again = run_replication(tiny_cfg, 1)
    assert again.to_json() == tiny_results[1].to_json()


def test_worker_count_does_not_change_output(tiny_cfg, tiny_results):
    par = run_replications(tiny_cfg, workers=2)
    assert [r.to_json() for r in par] == [r.to_json() for r in tiny_results]


def test_write_outputs(tmp_path, tiny_cfg, tiny_results):
    table = aggregate(tiny_cfg, tiny_results)
    write_outputs(table, tiny_results, tmp_path)
    assert len((tmp_path / "replications.jsonl").read_text().splitlines()) == 2
    assert (tmp_path / "performance.csv").read_text() == table.to_csv()
    assert json.loads((tmp_path / "exclusions.json").read_text())["replications"] == 2


def test_truth_recovery_without_heterogeneity():
    truth = Truth(tau1=0.0, tau2=0.0, s1=0.0, s2=0.0)
    cfg = ScenarioConfig(eta=0, assoc="weak", m=3000, n_studies=8, chains=2, warmup=400, iters=400,
                         bootstrap=20, truth=truth, seed=2)
    r = run_replication(cfg, 0)
    for m in MODELS:
        d1 = next(s for s in r.summaries[m] if s.parameter == "d1")
        assert abs(d1.mean - 0.4) < 0.1
