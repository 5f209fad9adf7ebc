import numpy as np
import pytest

from advdesk import autodiff as ad
from advdesk import defenses
from advdesk.attacks import (
    AttackConfig,
    AttackResult,
    adaptive_mgm_attack,
    ensemble_average_attack,
    fgsm,
    fgsm_batch,
    pgd,
    restarted_attack,
    rbf_patient_attack,
    surrogate_transfer_attack,
    two_stage_gmm_attack,
)
from advdesk.autodiff import LossSpec, Tensor
from advdesk.models import (
    Model,
    build_model,
    plain_classifier,
    rbf_classifier,
    sequential,
)

NEG_MSE = LossSpec("composite", weights=(-0.5, -0.5),
                   terms=(LossSpec("mean-squared-error"), LossSpec("mean-squared-error")))


def tiny_model(seed=0, hidden=8, size=8):
    desc = plain_classifier(input_shape=(1, size, size), channels=(4, 8), hidden=hidden)
    return Model(desc, build_model(desc, seed))


def rand_image(seed, size=8):
    return np.random.default_rng(seed).random((1, size, size))


# --- fgsm ----------------------------------------------------------------------


def test_fgsm_zero_epsilon_returns_input():
    m = tiny_model()
    x = rand_image(0)
    r = fgsm(m, None, x, 0, epsilon=0.0)
    np.testing.assert_array_equal(r.x_adv, x)
    assert not r.delta.any()


def test_fgsm_linear_squared_loss_example():
    # loss (w.x - y)^2 with w=(1,-2), x=(0,0), y=1: gradient (-2, 4)
    desc = sequential((2,), (("dense", 1),))
    params = build_model(desc, 0)
    params["trunk.0.w"].data[:] = np.array([[1.0], [-2.0]])
    params["trunk.0.b"].data[:] = 0.0
    m = Model(desc, params)
    x = np.zeros(2)
    y = np.array([[1.0]])

    # finite-difference oracle for the input gradient
    def loss_at(v):
        return float((v @ np.array([1.0, -2.0]) - 1.0) ** 2)

    h = 1e-6
    fd = np.array([(loss_at(x + h * e) - loss_at(x - h * e)) / (2 * h)
                   for e in np.eye(2)])
    np.testing.assert_allclose(fd, [-2.0, 4.0], atol=1e-5)

    r = fgsm(m, LossSpec("mean-squared-error"), x, y, epsilon=0.1, clip=None)
    np.testing.assert_allclose(r.x_adv, [-0.1, 0.1], atol=1e-12)


def test_fgsm_delta_components_zero_or_epsilon():
    m = tiny_model()
    for seed in range(5):
        x = rand_image(seed)
        r = fgsm(m, None, x, 0, epsilon=0.05, clip=None)
        mags = np.unique(np.abs(r.delta))
        assert all(v == 0.0 or v == pytest.approx(0.05, abs=1e-15) for v in mags)


def test_fgsm_respects_clip_and_ball():
    m = tiny_model()
    x = rand_image(1)
    r = fgsm(m, None, x, 0, epsilon=0.3)
    assert np.abs(r.delta).max() <= 0.3 + 1e-9
    assert r.x_adv.min() >= 0.0 and r.x_adv.max() <= 1.0
    np.testing.assert_allclose(r.delta, r.x_adv - x, atol=1e-12)


# --- ensemble averaged signs -----------------------------------------------------


def test_eq_average_single_model_bitmatches_fgsm():
    m = tiny_model()
    x = rand_image(2)
    a = fgsm(m, None, x, 0, epsilon=0.1)
    b = ensemble_average_attack([m], None, x, 0, epsilon=0.1)
    assert np.array_equal(a.x_adv, b.x_adv)
    assert np.array_equal(a.delta, b.delta)


def test_eq_average_identical_members_match_fgsm():
    m = tiny_model(3)
    x = rand_image(3)
    a = fgsm(m, None, x, 0, epsilon=0.1)
    b = ensemble_average_attack([m, m], None, x, 0, epsilon=0.1)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_eq_average_opposite_signs_cancel():
    # two linear models with opposite weights produce opposite gradient signs
    desc = sequential((2,), (("dense", 1),))
    p1 = build_model(desc, 0)
    p1["trunk.0.w"].data[:] = np.array([[1.0], [1.0]])
    p2 = build_model(desc, 0)
    p2["trunk.0.w"].data[:] = np.array([[-1.0], [-1.0]])
    models = [Model(desc, p1), Model(desc, p2)]
    spec = LossSpec("mean-squared-error")
    r = ensemble_average_attack(models, [spec, spec], np.array([0.2, 0.4]),
                                np.array([[1.0]]), epsilon=0.1, clip=None)
    np.testing.assert_allclose(r.delta, 0.0, atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_eq_average_components_in_sign_average_set(n):
    models = [tiny_model(seed) for seed in range(n)]
    x = rand_image(4)
    r = ensemble_average_attack(models, None, x, 0, epsilon=1.0, clip=None)
    allowed = {round(k / n, 12) for k in range(-n, n + 1)}
    got = {round(float(v), 12) for v in np.unique(r.delta)}
    assert got <= allowed


# --- pgd -------------------------------------------------------------------------


def test_pgd_single_step_equals_fgsm():
    m = tiny_model(5)
    x = rand_image(5)
    cfg = AttackConfig(epsilon=0.1, steps=1, step_size=0.1)
    a = pgd(m, None, x, 0, cfg)
    b = fgsm(m, None, x, 0, epsilon=0.1)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_pgd_zero_epsilon_keeps_input():
    m = tiny_model(6)
    x = rand_image(6)
    r = pgd(m, None, x, 0, AttackConfig(epsilon=0.0, steps=10, step_size=0.0))
    np.testing.assert_array_equal(r.x_adv, x)


def test_pgd_concave_quadratic_matches_grid_search():
    # maximize -||x - c||^2 with c outside the ball: optimum is the projection
    desc = sequential((2,))
    m = Model(desc, {})
    x0 = np.array([0.5, 0.5])
    c = np.array([[0.9, 0.2]])
    eps = 0.1
    cfg = AttackConfig(epsilon=eps, steps=300, step_size=eps / 50)
    r = pgd(m, NEG_MSE, x0, c, cfg)

    grid = np.linspace(-eps, eps, 101)
    best, best_val = None, -np.inf
    for dx in grid:
        for dy in grid:
            pt = np.clip(x0 + np.array([dx, dy]), 0.0, 1.0)
            val = -float(((pt - c[0]) ** 2).mean())
            if val > best_val:
                best, best_val = pt, val
    np.testing.assert_allclose(r.x_adv, best, atol=5e-3)
    np.testing.assert_allclose(best, [0.6, 0.4], atol=1e-9)


def test_pgd_halving_schedule_converges_closer():
    desc = sequential((2,))
    m = Model(desc, {})
    x0 = np.array([0.5, 0.5])
    c = np.array([[0.55, 0.52]])  # optimum strictly inside the ball
    fixed = pgd(m, NEG_MSE, x0, c,
                AttackConfig(epsilon=0.1, steps=80, step_size=0.03))
    halving = pgd(m, NEG_MSE, x0, c,
                  AttackConfig(epsilon=0.1, steps=80, step_size=0.03,
                               schedule="halving-on-stall"))
    assert halving.victim_loss_achieved >= fixed.victim_loss_achieved


def test_pgd_result_loss_matches_returned_point():
    m = tiny_model(7)
    x = rand_image(7)
    r = pgd(m, None, x, 0, AttackConfig(epsilon=0.08, steps=12, step_size=0.01))
    recomputed = ad.cross_entropy(Tensor(m.logits(r.x_adv[None])), [0]).item()
    assert r.victim_loss_achieved == pytest.approx(recomputed, abs=1e-12)


# --- restarts --------------------------------------------------------------------


def test_restart_degenerate_equals_plain():
    m = tiny_model(8)
    x = rand_image(8)
    cfg = AttackConfig(epsilon=0.1, steps=5, step_size=0.02, restarts=1,
                       random_start_scale=0.0)
    a = restarted_attack(pgd, m, None, x, 0, cfg)
    b = pgd(m, None, x, 0, cfg)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_restart_returns_max_over_runs():
    m = tiny_model(9)
    x = rand_image(9)
    cfg = AttackConfig(epsilon=0.1, steps=4, step_size=0.03, restarts=4, seed=11)
    best = restarted_attack(pgd, m, None, x, 0, cfg)
    per_run = []
    for r in range(4):
        rng = np.random.default_rng((cfg.seed, r))
        x_init = np.clip(np.clip(x + rng.uniform(-0.1, 0.1, x.shape), x - 0.1, x + 0.1),
                         0.0, 1.0)
        per_run.append(pgd(m, None, x, 0, cfg, x_init=x_init).victim_loss_achieved)
    assert best.victim_loss_achieved == pytest.approx(max(per_run), abs=1e-12)


def test_restart_success_monotone_in_restart_count():
    m = tiny_model(10)
    rng = np.random.default_rng(12)
    samples = [(rng.random((1, 8, 8)), int(rng.integers(0, 2))) for _ in range(50)]
    rates = []
    for restarts in (1, 2, 4, 8):
        cfg = AttackConfig(epsilon=0.1, steps=3, step_size=0.05,
                           restarts=restarts, seed=99)
        wins = sum(restarted_attack(pgd, m, None, x, y, cfg).success_fooled_model
                   for x, y in samples)
        rates.append(wins)
    assert rates == sorted(rates)


def test_reproducible_bitwise():
    m = tiny_model(13)
    x = rand_image(13)
    cfg = AttackConfig(epsilon=0.1, steps=6, step_size=0.02, restarts=2, seed=5)
    a = restarted_attack(pgd, m, None, x, 0, cfg)
    b = restarted_attack(pgd, m, None, x, 0, cfg)
    assert np.array_equal(a.x_adv, b.x_adv)
    assert a.victim_loss_achieved == b.victim_loss_achieved


# --- adaptive detector attacks -----------------------------------------------------


def make_mgm(model, n=40, seed=14):
    rng = np.random.default_rng(seed)
    clean = rng.random((n, 1, 8, 8))
    state = defenses.fit_mgm(model, clean)
    defenses.calibrate_mgm(state, model, rng.random((30, 1, 8, 8)))
    return state


def test_adaptive_mgm_weight_zero_matches_plain_pgd():
    m = tiny_model(15)
    state = make_mgm(m)
    x = rand_image(15)
    cfg = AttackConfig(epsilon=0.1, steps=8, step_size=0.02, detector_weight=0.0)
    a = adaptive_mgm_attack(m, state, x, 0, cfg)
    b = pgd(m, None, x, 0, cfg)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_adaptive_mgm_judged_by_original_detector():
    m = tiny_model(16)
    state = make_mgm(m, seed=16)
    x = rand_image(16)
    cfg = AttackConfig(epsilon=0.1, steps=8, step_size=0.02, detector_weight=1.0)
    r = adaptive_mgm_attack(m, state, x, 0, cfg)
    verdict = defenses.detect(state, m, r.x_adv)
    assert r.success_evaded_detector == (not verdict.flagged)


def test_adaptive_mgm_requires_calibration():
    m = tiny_model(17)
    state = defenses.fit_mgm(m, np.random.default_rng(17).random((30, 1, 8, 8)))
    with pytest.raises(ValueError):
        adaptive_mgm_attack(m, state, rand_image(17), 0, AttackConfig(epsilon=0.1))


# --- two-stage attack ---------------------------------------------------------------


def make_gmm(model, seed=18, per_class=24):
    rng = np.random.default_rng(seed)
    clean = rng.random((2 * per_class, 1, 8, 8))
    labels = np.array([0, 1] * per_class)
    return defenses.fit_gmm(model, clean, labels,
                            calibration_inputs=rng.random((40, 1, 8, 8)))


def test_two_stage_immediate_when_already_misclassified():
    m = tiny_model(19)
    gmm = make_gmm(m, 19)
    x = rand_image(19)
    pred = int(m.predict(x[None])[0])
    wrong_label = 1 - pred
    if defenses.detect(gmm, m, x).flagged:
        pytest.skip("fixture input flagged; immediate path not reachable")
    r = two_stage_gmm_attack(m, gmm, x, wrong_label, AttackConfig(epsilon=0.1, steps=5))
    assert r.success_fooled_model and r.success_evaded_detector
    assert not r.delta.any()
    assert r.iterations_used == 0


def test_two_stage_zero_epsilon_cannot_fool():
    m = tiny_model(20)
    gmm = make_gmm(m, 20)
    x = rand_image(20)
    y = int(m.predict(x[None])[0])  # correctly classified by definition
    r = two_stage_gmm_attack(m, gmm, x, y,
                             AttackConfig(epsilon=0.0, steps=6, step_size=0.0))
    assert not r.success_fooled_model
    np.testing.assert_array_equal(r.x_adv, x)


# --- surrogate transfer ---------------------------------------------------------------


def test_surrogate_selection_prefers_highest_mean_loss():
    victim = tiny_model(21)
    surrogate = tiny_model(21)  # same weights: candidate scores are victim losses
    x = rand_image(21)
    cfg = AttackConfig(epsilon=0.1, steps=10, step_size=0.02)
    r = surrogate_transfer_attack([surrogate], victim, x, 0, cfg)
    white_box = pgd(victim, None, x, 0, cfg)
    one_step = ensemble_average_attack([surrogate], None, x, 0, 0.1)
    expected = white_box if white_box.victim_loss_achieved >= one_step.victim_loss_achieved \
        else one_step
    assert np.array_equal(r.x_adv, expected.x_adv)


def test_surrogate_empty_rejected():
    with pytest.raises(ValueError):
        surrogate_transfer_attack([], tiny_model(), rand_image(0), 0,
                                  AttackConfig(epsilon=0.1))


# --- patient attack ---------------------------------------------------------------------


def rbf_tiny(seed=22):
    desc = rbf_classifier(input_shape=(1, 8, 8), channels=(4, 8), hidden=16,
                          center_count=4)
    return Model(desc, build_model(desc, seed))


def test_patient_single_config_identical_to_that_attack():
    m = rbf_tiny()
    x = rand_image(22)
    cfg = AttackConfig(epsilon=0.1, steps=200, step_size=0.002)
    a = rbf_patient_attack(m, x, 0, [cfg])
    b = pgd(m, None, x, 0, cfg)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_patient_returns_best_of_all_configs():
    m = rbf_tiny(23)
    x = rand_image(23)
    configs = [
        AttackConfig(epsilon=0.1, steps=200, step_size=0.002),
        AttackConfig(epsilon=0.1, steps=200, step_size=0.001,
                     schedule="halving-on-stall"),
        AttackConfig(epsilon=0.1, steps=200, step_size=0.002, restarts=2, seed=3),
    ]
    best = rbf_patient_attack(m, x, 0, configs)
    singles = []
    for cfg in configs:
        if cfg.restarts >= 1:
            singles.append(restarted_attack(pgd, m, None, x, 0, cfg))
        else:
            singles.append(pgd(m, None, x, 0, cfg))
    assert best.victim_loss_achieved == pytest.approx(
        max(s.victim_loss_achieved for s in singles), abs=1e-12)
    for s in singles:
        assert best.victim_loss_achieved >= s.victim_loss_achieved - 1e-12


def test_patient_validates_configs():
    m = rbf_tiny(24)
    with pytest.raises(ValueError):
        rbf_patient_attack(m, rand_image(24), 0, [])
    with pytest.raises(ValueError):
        rbf_patient_attack(m, rand_image(24), 0,
                           [AttackConfig(epsilon=0.1, steps=50, step_size=0.001)])
    with pytest.raises(ValueError):
        rbf_patient_attack(m, rand_image(24), 0,
                           [AttackConfig(epsilon=0.1, steps=200, step_size=0.01)])


# --- config validation and linf soundness -------------------------------------------------


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, steps=0)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, step_size=0.5)  # above epsilon on fixed schedule
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, schedule="bogus")
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, targeted=True)


def test_linf_soundness_randomized():
    m = tiny_model(25)
    rng = np.random.default_rng(26)
    for i in range(60):
        eps = float(rng.uniform(0.0, 0.3))
        x = rng.random((1, 8, 8))
        y = int(rng.integers(0, 2))
        kind = i % 4
        if kind == 0:
            r = fgsm(m, None, x, y, epsilon=eps)
        elif kind == 1:
            step = eps / 5 if eps > 0 else 0.0
            r = pgd(m, None, x, y, AttackConfig(epsilon=eps, steps=4, step_size=step))
        elif kind == 2:
            r = ensemble_average_attack([m, tiny_model(27)], None, x, y, eps)
        else:
            step = eps / 5 if eps > 0 else 0.0
            cfg = AttackConfig(epsilon=eps, steps=3, step_size=step, restarts=2,
                               seed=i)
            r = restarted_attack(pgd, m, None, x, y, cfg)
        assert np.abs(r.delta).max(initial=0.0) <= eps + 1e-9
        assert r.x_adv.min() >= 0.0 and r.x_adv.max() <= 1.0
        np.testing.assert_allclose(r.delta, r.x_adv - x, atol=1e-12)


def test_fgsm_batch_zero_epsilon_identity():
    m = tiny_model(28)
    xb = np.random.default_rng(28).random((4, 1, 8, 8))
    out = fgsm_batch(m.params, m.desc, xb, [0, 1, 0, 1], 0.0)
    np.testing.assert_array_equal(out, xb)
