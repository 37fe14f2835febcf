import numpy as np
import pytest

from lspreg.attack import (AttackConfig, cw_margin_loss, evaluate_robust_accuracy, fgsm, pgd,
                           project, run_attack)
from lspreg.data import gen_two_moons
from lspreg.errors import ConfigError
from lspreg.model import init_model, logits, predict_labels


@pytest.fixture(scope="module")
def toy():
    ds = gen_two_moons(100, 0.1, 0)
    return init_model([2, 16, 2], 0), ds


@pytest.mark.parametrize("fn", [fgsm, pgd])
def test_zero_budget_returns_input(toy, fn):
    model, ds = toy
    x_adv = fn(model, ds.features, ds.labels, AttackConfig(epsilon=0.0))
    np.testing.assert_array_equal(x_adv, ds.features)


@pytest.mark.parametrize("seed", range(5))
def test_fgsm_sign_matches_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 2))
    model = init_model([3, 2], 0)
    model.set_parameter("W0", w)
    x = 0.3 + 0.4 * rng.random((10, 3))
    y = rng.integers(0, 2, 10)
    x_adv = fgsm(model, x, y, AttackConfig(epsilon=0.05))
    # d CE / dx = p_other * (w_other - w_true) for two classes
    expected = np.sign(w[:, 1 - y].T - w[:, y].T)
    np.testing.assert_array_equal(np.sign(x_adv - x), expected)


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_outputs_in_data_bounds(toy, norm):
    model, ds = toy
    cfg = AttackConfig(norm=norm, epsilon=0.5, steps=5, step_size=0.2)
    x_adv = pgd(model, ds.features, ds.labels, cfg)
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def test_one_step_pgd_is_fgsm(toy):
    model, ds = toy
    for alpha in (0.1, 0.3):
        cfg = AttackConfig(epsilon=0.1, steps=1, step_size=alpha, random_init=False)
        np.testing.assert_array_equal(pgd(model, ds.features, ds.labels, cfg),
                                      fgsm(model, ds.features, ds.labels, cfg))


def test_fgsm_requires_linf(toy):
    model, ds = toy
    with pytest.raises(ConfigError):
        fgsm(model, ds.features, ds.labels, AttackConfig(norm="l2", epsilon=0.1))


def test_cw_margin_examples():
    assert cw_margin_loss(np.array([[5.0, 1.0]]), [0]).item() == 4.0
    assert cw_margin_loss(np.array([[3.0, 3.0, -1.0]]), [0]).item() == 0.0
    assert cw_margin_loss(np.array([[1.0, 2.0, 7.0]]), [1]).item() == -5.0


def test_cw_negative_margin_means_misclassified(toy):
    model, ds = toy
    cfg = AttackConfig(epsilon=0.2, steps=20, step_size=0.02)
    x_adv = run_attack("cw", model, ds.features, ds.labels, cfg)
    z = logits(model, x_adv).data
    y = ds.labels
    margins = z[np.arange(len(y)), y] - np.where(np.arange(2)[None, :] == y[:, None], -np.inf, z).max(1)
    wrong = predict_labels(model, x_adv) != y
    assert np.all(wrong[margins < 0])
    assert (margins < 0).any()


def test_zero_budget_robust_equals_clean(toy):
    model, ds = toy
    clean, robust = evaluate_robust_accuracy(model, ds, AttackConfig(epsilon=0.0))
    assert clean == robust


def test_untrained_model_accuracy_near_chance():
    ds = gen_two_moons(400, 0.1, 1)
    accs = [float((predict_labels(init_model([2, 32, 32, 2], s), ds.features) == ds.labels).mean())
            for s in range(30)]
    assert abs(np.mean(accs) - 0.5) < 0.1


@pytest.mark.parametrize("attack,norm", [("fgsm", "linf"), ("pgd", "linf"), ("pgd", "l2"), ("cw", "l2")])
def test_robust_never_exceeds_clean(toy, attack, norm):
    model, ds = toy
    cfg = AttackConfig(norm=norm, epsilon=0.15, steps=5, step_size=0.05)
    clean, robust = evaluate_robust_accuracy(model, ds, cfg, attack)
    assert 0.0 <= robust <= clean <= 1.0


def test_projection_l2():
    x = np.zeros((2, 2))
    out = project(np.array([[3.0, 4.0], [0.1, 0.0]]), x, 1.0, "l2")
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.1, 0.0]])


def test_pgd_deterministic_with_seed(toy):
    model, ds = toy
    cfg = AttackConfig(epsilon=0.1, seed=5)
    assert pgd(model, ds.features, ds.labels, cfg).tobytes() == pgd(model, ds.features, ds.labels, cfg).tobytes()


@pytest.mark.parametrize("bad", [dict(norm="l3"), dict(epsilon=-1.0), dict(steps=0), dict(step_size=0.0),
                                 dict(loss="hinge"), dict(data_min=1.0, data_max=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        AttackConfig(**bad)


def test_unknown_attack(toy):
    model, ds = toy
    with pytest.raises(ConfigError):
        run_attack("deepfool", model, ds.features, ds.labels, AttackConfig())
