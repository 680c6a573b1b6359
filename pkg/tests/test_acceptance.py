"""Acceptance criteria, one test each, on the full fixture set.

The fixtures and the shared grid runs come from ``conftest``; each
configuration runs once per session.
"""

import time

import numpy as np
import pytest

from hrfa import attack, harness, metrics
from hrfa.defenses import dctn, deflect, idctn, jpeg_compress, mean_filter
from hrfa.metrics import DefenseOutcome, ExampleRecord

import graphs
from conftest import classification_config
from oracles import naive_dct_matrix, naive_mean_filter, naive_ssim_constant

pytestmark = pytest.mark.slow

def test_gradient_oracle_on_composed_graphs():
    start = time.perf_counter()
    cases = graphs.all_cases()
    worst = max(graphs.gradient_error(fn, inputs) for _, inputs, fn in cases)
    elapsed = time.perf_counter() - start
    assert len(cases) >= 20 and any(name.startswith("stack") for name, _, _ in cases)
    assert worst < 1e-4
    assert elapsed < 120


def test_encode_self_inversion(full_fixtures):
    fx = full_fixtures.fx
    tau = fx.calibration["tau_encode_shapes"]
    cfg = attack.AttackConfig.classification_preset(tau_encode=tau, encode_iters=600)
    start = time.perf_counter()
    reached = []
    for trial in range(50):
        rng = np.random.default_rng([7, trial])
        g = fx.generators[trial % len(fx.generators)]
        z_true = rng.standard_normal((1, g.latent_dim)).astype(np.float32)
        res = attack.encode(g, g(z_true).data, cfg, rng=rng)
        reached.append(bool(res.l_img[0] < tau))
    elapsed = time.perf_counter() - start
    assert np.mean(reached) >= 0.9
    assert elapsed < 600


def test_attack_success_rates(classification_grid):
    report, elapsed = classification_grid(0)
    agg = report.aggregates()
    assert agg["hrfa"]["count"] >= 90
    assert agg["hrfa"]["success_rate"] >= 0.95
    assert agg["pgd"]["success_rate"] >= 0.90
    assert elapsed < 900


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_feature_attack_survives_denoisers_better_than_pixel_attacks(classification_grid, seed):
    agg = classification_grid(seed)[0].aggregates()
    for defense in ("mean_filter", "pixel_deflection"):
        mine = agg["hrfa"][f"evasion[{defense}]"]
        for rival in ("pgd", "cw"):
            assert mine > agg[rival][f"evasion[{defense}]"], (defense, rival, agg)


def test_feature_attack_is_more_similar_at_matched_success(verification_grid):
    _, report = verification_grid
    ok = {name: {r.index: r for r in report.successful(name)} for name in ("hrfa", "pgd")}
    both = sorted(set(ok["hrfa"]) & set(ok["pgd"]))
    assert len(both) >= 20, {k: len(v) for k, v in ok.items()}
    hrfa_ssim = np.mean([ok["hrfa"][i].ssim for i in both])
    pgd_ssim = np.mean([ok["pgd"][i].ssim for i in both])
    assert hrfa_ssim > pgd_ssim


def test_verification_threshold_semantics(verification_grid, full_fixtures):
    cfg, report = verification_grid
    tau_attack = harness.hrfa_config(cfg.attacks[0], cfg.task, full_fixtures.fx.calibration).tau_attack
    ok = report.successful("hrfa")
    assert ok
    assert all(r.distance >= tau_attack for r in ok)
    assert all(r.defended["mean_filter"].distance is not None for r in ok)
    row = report.aggregates()["hrfa"]
    cell = f"{row['evasion[mean_filter]'] * 100:6.2f} ({row['distance[mean_filter]']:.2f})"
    summary = report.summary()
    assert "(face distance)" in summary and cell in summary


def test_defense_golden_vectors():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for k in (3, 5):
        x = rng.uniform(0, 1, (3, 17, 13))
        np.testing.assert_allclose(mean_filter(x, k), naive_mean_filter(x, k), rtol=0, atol=1e-12)

    x = rng.uniform(0, 1, (3, 24, 24))
    out, coords = deflect(x, 300, 4, np.random.default_rng(5))
    again, coords_again = deflect(x, 300, 4, np.random.default_rng(5))
    assert np.array_equal(out, again) and np.array_equal(coords, coords_again)
    for i in range(24):
        for j in range(24):
            win = x[:, max(i - 4, 0):i + 5, max(j - 4, 0):j + 5].reshape(3, -1)
            assert np.any(np.all(win == out[:, i, j][:, None], axis=0))

    m = naive_dct_matrix()
    block = rng.uniform(-128, 127, (8, 8))
    np.testing.assert_allclose(dctn(block, type=2, norm="ortho"), m @ block @ m.T, atol=1e-6)
    np.testing.assert_allclose(idctn(dctn(block, type=2, norm="ortho"), type=2, norm="ortho"), block, atol=1e-6)
    assert jpeg_compress(x, 75).shape == x.shape
    assert time.perf_counter() - start < 60


def test_metric_properties_and_report_determinism(full_fixtures, tmp_path):
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (3, 20, 20)), rng.uniform(0, 1, (3, 20, 20))
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-15)
    c1, c2 = np.full((3, 16, 16), 0.2), np.full((3, 16, 16), 0.7)
    assert abs(metrics.ssim(c1, c2) - naive_ssim_constant(0.2, 0.7)) < 1e-9

    recs = [ExampleRecord(attack="a", index=i, success=True, iterations=1, l_img=0.0, l2=0.0, linf=0.0,
                          ssim=1.0, stop_reason="misclassified", label=0, prediction=1,
                          defended={"d": DefenseOutcome(wrong=bool(w))})
            for i, w in enumerate(rng.integers(0, 2, 30))]
    rate = metrics.evasion_rate(recs, "d")
    assert all(metrics.evasion_rate(list(rng.permutation(recs)), "d") == rate for _ in range(10))

    outputs = []
    for run in ("a", "b"):
        cfg = classification_config(full_fixtures.path, tmp_path / run, seed=4, samples=6)
        harness.run_experiment(cfg, fixtures=full_fixtures.fx)
        outputs.append({p.name: p.read_bytes() for p in (tmp_path / run).iterdir() if p.is_file()})
    assert outputs[0] == outputs[1]
    assert {"report.csv", "report.json", "summary.txt"} <= set(outputs[0])
