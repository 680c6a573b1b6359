import random

import numpy as np
import pytest

from hrfa import metrics
from hrfa.attack import image_loss
from hrfa.metrics import DefenseOutcome, EvalReport, ExampleRecord

from oracles import naive_ssim_constant


def _img(seed, shape=(3, 24, 24)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


def test_ssim_identity():
    x = _img(0)
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetry():
    a, b = _img(1), _img(2)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-15)


@pytest.mark.parametrize("mu", [0.1, 0.3, 0.45])
def test_ssim_of_two_constants_is_closed_form(mu):
    a = np.full((3, 16, 16), mu)
    b = a + 0.5
    assert metrics.ssim(a, b) == pytest.approx(naive_ssim_constant(mu, mu + 0.5), abs=1e-9)


def test_ssim_bounded_and_distinguishes():
    a = _img(3)
    for s in range(5):
        b = np.clip(a + np.random.default_rng(s).normal(0, 0.05 * (s + 1), a.shape), 0, 1)
        v = metrics.ssim(a, b)
        assert -1 <= v < 1 - 1e-9


def test_ssim_matches_a_direct_window_sum():
    # brute force: explicit Gaussian-weighted moments at one position
    a, b = _img(4, (1, 11, 11)), _img(5, (1, 11, 11))
    g = metrics.gaussian_window()
    w = np.outer(g, g)
    mu1, mu2 = np.sum(w * a[0]), np.sum(w * b[0])
    s11 = np.sum(w * a[0] ** 2) - mu1 ** 2
    s22 = np.sum(w * b[0] ** 2) - mu2 ** 2
    s12 = np.sum(w * a[0] * b[0]) - mu1 * mu2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expect = ((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / ((mu1 ** 2 + mu2 ** 2 + c1) * (s11 + s22 + c2))
    assert metrics.ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_ssim_batch_gives_per_row_values():
    a, b = np.stack([_img(6), _img(7)]), np.stack([_img(8), _img(9)])
    np.testing.assert_allclose(metrics.ssim(a, b), [metrics.ssim(a[0], b[0]), metrics.ssim(a[1], b[1])])


def test_ssim_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        metrics.ssim(_img(0), _img(0, (3, 24, 23)))


def test_perturbation_stats_identity_and_impulse():
    x = _img(10)
    s = metrics.perturbation_stats(x, x)
    assert s["l2"] == 0 and s["linf"] == 0 and not s["map"].any()
    y = x.copy()
    y[1, 3, 4] += 0.2
    s = metrics.perturbation_stats(x, y)
    assert s["linf"] == pytest.approx(0.2)
    assert s["map"].max() == 1.0


def test_perturbation_l2_agrees_with_image_loss():
    a, b = _img(11), _img(12)
    assert metrics.perturbation_stats(a, b)["l2"] == pytest.approx(float(image_loss(a, b).data), abs=1e-6)


def _records(flags, attack="hrfa"):
    return [ExampleRecord(attack=attack, index=i, success=True, iterations=1, l_img=0.0, l2=0.0,
                          linf=0.0, ssim=1.0, stop_reason="misclassified", label=0, prediction=1,
                          defended={"mf": DefenseOutcome(wrong=f, prediction=int(f))})
            for i, f in enumerate(flags)]


def test_evasion_rate_extremes():
    assert metrics.evasion_rate(_records([False] * 5), "mf") == 0.0
    assert metrics.evasion_rate(_records([True] * 5), "mf") == 1.0


def test_evasion_rate_order_invariant():
    recs = _records([True, False, True, True, False, False, True])
    base = metrics.evasion_rate(recs, "mf")
    rng = random.Random(0)
    for _ in range(10):
        rng.shuffle(recs)
        assert metrics.evasion_rate(recs, "mf") == base
    assert base == pytest.approx(4 / 7)


def test_evasion_rate_rejects_empty_and_missing():
    with pytest.raises(ValueError):
        metrics.evasion_rate([], "mf")
    with pytest.raises(KeyError):
        metrics.evasion_rate(_records([True]), "jpeg")


def test_report_aggregates_count_successes_only():
    recs = _records([True, False, True])
    recs.append(ExampleRecord(attack="hrfa", index=3, success=False, iterations=100, l_img=1.0, l2=1.0,
                              linf=0.1, ssim=0.9, stop_reason="iteration_cap", label=0, prediction=0))
    rep = EvalReport(task="classification", tau=None, defenses=["mf"], records=recs)
    agg = rep.aggregates()["hrfa"]
    assert agg["count"] == 4
    assert agg["success_rate"] == 0.75
    assert agg["evasion[mf]"] == pytest.approx(2 / 3)
    assert rep.to_csv().count("\n") == 5
    assert "hrfa" in rep.summary()


def test_verification_summary_carries_distances():
    rec = ExampleRecord(attack="hrfa", index=0, success=True, iterations=3, l_img=1.0, l2=1.0, linf=0.1,
                        ssim=0.9, stop_reason="threshold", distance=1.7,
                        defended={"mf": DefenseOutcome(wrong=True, distance=1.4)})
    rep = EvalReport(task="verification", tau=1.2, defenses=["mf"], records=[rec])
    assert "100.00 (1.40)" in rep.summary()
