import numpy as np
import pytest

from hrfa import attack as atk
from hrfa.attack import AttackConfig, CWConfig, PGDConfig
from hrfa.autodiff import ShapeError
from hrfa.models.networks import Classifier, Embedder, Generator, face_distance


@pytest.fixture(scope="module")
def nets():
    g = Generator(latent_dim=8, image_shape=(3, 16, 16), channels=(8, 6), seed=1).astype(np.float64)
    f = Classifier(image_shape=(3, 16, 16), num_classes=3, channels=(6, 8, 8), seed=2).astype(np.float64)
    e = Embedder(image_shape=(3, 16, 16), embed_dim=6, channels=(6, 8, 8), seed=3).astype(np.float64)
    z = np.random.default_rng(0).standard_normal((6, 8))
    return g, f, e, z


def test_image_loss_is_euclidean():
    a = np.zeros((2, 3, 4, 4))
    b = np.zeros((2, 3, 4, 4))
    b[0, 0, 0, 0], b[1, 1, 1, 1] = 3.0, 4.0
    np.testing.assert_allclose(atk.image_loss(a, b).data, [3.0, 4.0])
    with pytest.raises(ShapeError):
        atk.image_loss(a, b[:, :, :3])


def test_classification_net_loss_is_true_class_probability(nets):
    g, f, _, z = nets
    x = g(z).data
    y = np.array([0, 1, 2, 0, 1, 2])
    p = f.probabilities(x).data
    np.testing.assert_allclose(atk.net_loss_classification(f, x, y).data, p[np.arange(6), y])
    with pytest.raises(ValueError):
        atk.net_loss_classification(f, x, np.full(6, 3))
    with pytest.raises(ShapeError):
        atk.net_loss_classification(f, x, y[:2])


def test_verification_net_loss_is_negative_distance(nets):
    g, _, e, z = nets
    a, b = g(z[:3]).data, g(z[3:]).data
    np.testing.assert_allclose(atk.net_loss_verification(e, a, b).data, -face_distance(e, a, b).data)


def test_zero_lambda_leaves_synthesised_original_untouched(nets):
    # L_img has a zero subgradient at the original, so nothing moves
    g, f, _, z = nets
    res = atk.hrfa_attack(g, f, z[:2], AttackConfig(lam=0.0, max_iters=5))
    for r, zi in zip(res, z[:2]):
        np.testing.assert_array_equal(r.z, zi)
        assert r.l_img < 1e-12 and r.iterations == 5 and r.stop_reason == atk.STOP_CAP


def test_trace_records_total_loss_decomposition(nets):
    g, f, _, z = nets
    cfg = AttackConfig(lam=50.0, max_iters=20, lr=0.05)
    (r,) = atk.hrfa_attack(g, f, z[:1], cfg)
    assert len(r.trace) == r.iterations + 1
    for it, li, ln, lt, _ in r.trace:
        assert lt == pytest.approx(li + 50.0 * ln, rel=1e-12)
    assert r.trace[0][1] == 0.0
    lines = r.trace_lines().splitlines()
    assert lines[0].split("\t") == ["iteration", "l_img", "l_net", "l_total", "outcome"]
    assert len(lines) == len(r.trace) + 1


def test_classification_success_means_misclassified(nets):
    g, f, _, z = nets
    labels = f.predict(g(z).data)
    res = atk.hrfa_attack(g, f, z, AttackConfig(lam=50.0, max_iters=100, lr=0.05))
    assert any(r.success for r in res)
    for r, y in zip(res, labels):
        pred = int(f.predict(r.x_adv[None])[0])
        assert r.prediction == pred
        assert r.success == (pred != y)
        assert r.stop_reason == (atk.STOP_MISCLASSIFIED if r.success else atk.STOP_CAP)
        assert r.iterations <= 100


def test_batched_rows_equal_solo_runs(nets):
    g, f, _, z = nets
    cfg = AttackConfig(lam=50.0, max_iters=40, lr=0.05)
    batch = atk.hrfa_attack(g, f, z, cfg)
    for i in range(len(z)):
        (solo,) = atk.hrfa_attack(g, f, z[i:i + 1], cfg)
        assert solo.iterations == batch[i].iterations
        np.testing.assert_allclose(solo.z, batch[i].z, rtol=0, atol=1e-12)


def test_attack_is_deterministic(nets):
    g, f, _, z = nets
    cfg = AttackConfig(lam=50.0, max_iters=30)
    a = atk.hrfa_attack(g, f, z[:3], cfg)
    b = atk.hrfa_attack(g, f, z[:3], cfg)
    for ra, rb in zip(a, b):
        assert ra.x_adv.tobytes() == rb.x_adv.tobytes()


def test_probability_guard_stops_early(nets):
    g, f, _, z = nets
    p0 = f.probabilities(g(z[:1]).data).data.max()
    (r,) = atk.hrfa_attack(g, f, z[:1], AttackConfig(lam=50.0, max_iters=50, tau_attack=p0 + 0.01))
    assert r.iterations == 0 and r.stop_reason == atk.STOP_THRESHOLD


def test_verification_success_reaches_threshold(nets):
    g, _, e, z = nets
    # start off the original, as after an imperfect encode: d has no gradient at d = 0
    cfg = AttackConfig(task="verification", lam=10.0, max_iters=200, lr=0.05, tau_attack=0.3)
    z0 = z[:4] + 0.05 * np.random.default_rng(5).standard_normal((4, 8))
    res = atk.hrfa_attack(g, e, z0, cfg, x_ori=g(z[:4]).data)
    assert any(r.success for r in res)
    for r, x in zip(res, g(z[:4]).data):
        d = float(face_distance(e, x[None], r.x_adv[None]).data[0])
        assert r.distance == pytest.approx(d, abs=1e-12)
        assert r.success == (d >= 0.3)


def test_encode_recovers_exact_start():
    g = Generator(latent_dim=8, image_shape=(3, 16, 16), channels=(8, 6), seed=1).astype(np.float64)
    z = np.random.default_rng(1).standard_normal((2, 8))
    cfg = AttackConfig(encode_restarts=2, encode_iters=10, tau_encode=1e-9)
    starts = np.stack([np.stack([z[0] + 1.0, z[0]]), np.stack([z[1], z[1] - 1.0])])
    enc = atk.encode(g, g(z).data, cfg, starts=starts)
    assert np.all(enc.success) and np.all(enc.iterations == 0)
    np.testing.assert_array_equal(enc.z, z)


def test_encode_descends_and_reports(nets):
    g, _, _, z = nets
    x = g(z[:2]).data
    cfg = AttackConfig(encode_restarts=3, encode_iters=150, encode_lr=0.05, tau_encode=0.5, seed=4)
    enc = atk.encode(g, x, cfg)
    np.testing.assert_allclose(enc.l_img, atk.image_loss(g(enc.z), x).data, rtol=1e-10)
    assert np.all(enc.success == (enc.l_img < 0.5))


def test_attack_refuses_failed_encodes(nets):
    g, f, _, z = nets
    enc = atk.EncodeResult(z=z[:2], l_img=np.array([0.1, 9.0]), success=np.array([True, False]),
                           iterations=np.array([3, 600]))
    with pytest.raises(atk.EncodeFailure):
        atk.hrfa_attack(g, f, enc, AttackConfig())


def test_latent_width_is_checked(nets):
    g, f, _, _ = nets
    with pytest.raises(ShapeError):
        atk.hrfa_attack(g, f, np.zeros((1, 5)), AttackConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(task="detection")
    with pytest.raises(ValueError):
        AttackConfig(lam=-1)
    cfg = AttackConfig.verification_preset()
    assert (cfg.lam, cfg.max_iters, cfg.lr, cfg.tau_encode, cfg.tau_attack) == (10.0, 1000, 0.05, 10.0, 1.6)
    cfg = AttackConfig.classification_preset()
    assert (cfg.lam, cfg.max_iters, cfg.lr) == (50.0, 100, 0.05)


def test_pgd_stays_in_the_box(nets):
    g, f, _, z = nets
    x = g(z).data
    labels = f.predict(x)
    cfg = PGDConfig(alpha=0.01, eps=0.03, max_iters=30)
    for r, x0, y in zip(atk.pgd_attack(f, x, cfg, labels), x, labels):
        assert np.max(np.abs(r.x_adv - x0)) <= 0.03 + 1e-12
        assert r.x_adv.min() >= 0 and r.x_adv.max() <= 1
        assert r.success == (int(f.predict(r.x_adv[None])[0]) != y)


def test_pgd_verification_reaches_threshold_when_it_succeeds(nets):
    g, _, e, z = nets
    x = g(z[:3]).data
    res = atk.pgd_attack(e, x, PGDConfig.verification(0.05, max_iters=40))
    for r, x0 in zip(res, x):
        d = float(face_distance(e, x0[None], r.x_adv[None]).data[0])
        assert r.success == (d >= 0.05)
        assert np.max(np.abs(r.x_adv - x0)) <= 8 / 255 + 1e-12


def test_pgd_explicit_start_is_projected(nets):
    g, f, _, z = nets
    x = g(z[:1]).data
    start = np.clip(x + 1.0, 0, 1)
    (r,) = atk.pgd_attack(f, x, PGDConfig(alpha=0.0, eps=0.02, max_iters=1), f.predict(x), x_start=start)
    assert np.max(np.abs(r.x_adv - x)) <= 0.02 + 1e-12


def test_cw_successes_are_misclassified(nets):
    g, f, _, z = nets
    x = g(z[:3]).data
    labels = f.predict(x)
    res = atk.cw_attack(f, x, labels, CWConfig(search_steps=2, max_iters=50, lr=0.05))
    for r, y in zip(res, labels):
        assert r.success == (r.prediction != y)
        assert r.x_adv.min() >= 0 and r.x_adv.max() <= 1


def test_cw_leaves_already_wrong_inputs_alone(nets):
    g, f, _, z = nets
    x = g(z[:2]).data
    wrong = (f.predict(x) + 1) % 3
    res = atk.cw_attack(f, x, wrong, CWConfig(search_steps=1, max_iters=5))
    for r, x0 in zip(res, x):
        assert r.success and r.l_img == 0.0
        np.testing.assert_array_equal(r.x_adv, x0)


def test_cw_is_classification_only(nets):
    _, _, e, _ = nets
    with pytest.raises(ValueError):
        atk.cw_attack(e, np.zeros((1, 3, 16, 16)), [0], task="verification")


def test_adversarial_is_reproducible_from_final_latent(nets):
    g, f, _, z = nets
    for r in atk.hrfa_attack(g, f, z, AttackConfig(max_iters=25)):
        assert g(r.z[None]).data[0].tobytes() == r.x_adv.tobytes()


def test_iteration_cap_means_full_budget(nets):
    g, f, _, z = nets
    for r in atk.hrfa_attack(g, f, z, AttackConfig(lam=0.5, max_iters=7)):
        if r.stop_reason == atk.STOP_CAP:
            assert r.iterations == 7
        else:
            assert r.stop_reason == atk.STOP_MISCLASSIFIED and r.success


def test_net_loss_falls_over_a_run(nets):
    g, f, _, z = nets
    for r in atk.hrfa_attack(g, f, z, AttackConfig(max_iters=60)):
        if r.iterations:
            assert r.trace[-1][2] < r.trace[0][2]


def test_encode_with_infinite_threshold_returns_at_once(nets):
    g, _, _, z = nets
    enc = atk.encode(g, g(z[:3]).data, AttackConfig(tau_encode=np.inf, encode_iters=50))
    assert np.all(enc.iterations == 0) and np.all(enc.success)


def test_encode_is_seeded(nets):
    g, _, _, z = nets
    cfg = AttackConfig(encode_iters=20, tau_encode=1e-6, seed=7)
    a = atk.encode(g, g(z[:2]).data, cfg)
    b = atk.encode(g, g(z[:2]).data, cfg)
    assert a.z.tobytes() == b.z.tobytes()


def test_pgd_empty_ball_returns_original(nets):
    g, f, _, z = nets
    x = g(z).data
    for r, x0 in zip(atk.pgd_attack(f, x, PGDConfig(eps=0.0, max_iters=10), f.predict(x)), x):
        np.testing.assert_array_equal(r.x_adv, x0)
        assert not r.success


def test_pgd_single_step_bound(nets):
    g, f, _, z = nets
    x = g(z).data
    for r, x0 in zip(atk.pgd_attack(f, x, PGDConfig(alpha=0.003, eps=1.0, max_iters=1), f.predict(x)), x):
        assert np.max(np.abs(r.x_adv - x0)) <= 0.003 + 1e-12
