import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovalseg import training
from ovalseg.errors import ConfigError, InvalidInputError, NumericError, ShapeError
from ovalseg.network import NetConfig
from ovalseg.synthdata import SampleRecord, fit_oval, generate_phantom
from ovalseg.training import (
    AdamState,
    ClassWeights,
    LossConfig,
    TrainConfig,
    adam_step,
    class_weights,
    combined_loss,
    one_cycle_lr,
    prepare_weights,
    train,
)

TINY_NET = NetConfig(init_channels=4, depth=2, pyramid_scales=(1, 2), dropout_p=0.2)


def _masks(n1, n0):
    y = np.zeros(n1 + n0)
    y[:n1] = 1
    return y.reshape(1, 1, 1, -1)


def test_class_weights_examples():
    assert class_weights(_masks(100, 900)).background_weight == pytest.approx(1 / 9)
    cw = class_weights(_masks(50, 50))
    assert cw.background_weight == 1.0 and not cw.fallback
    for y in (_masks(10, 0), _masks(0, 10)):
        cw = class_weights(y)
        assert cw.fallback and cw.background_weight == 1.0 and cw.foreground_weight == 1.0


def test_pixel_weights():
    cw = ClassWeights(0.25)
    np.testing.assert_array_equal(cw.pixel_weights(np.array([0, 1, 0])), [0.25, 1.0, 0.25])


def _single(p, y, phi, alpha=1.0):
    arr = lambda v: np.full((1, 1, 1, 1), v, np.float64)  # noqa: E731
    return combined_loss(arr(p), arr(y), arr(phi), ClassWeights(1.0), LossConfig(alpha=alpha))


def test_single_pixel_bce():
    loss, grad = _single(0.5, 1, 1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert grad.item() == pytest.approx(-2.0, abs=1e-12)


def test_single_pixel_half_confidence():
    loss, _ = _single(0.5, 1, 0.5)
    assert loss == pytest.approx(0.5 * math.log(2), abs=1e-12)
    assert round(loss, 4) == 0.3466


def test_perfect_prediction():
    rng = np.random.default_rng(0)
    y = (rng.random((2, 1, 8, 8)) < 0.3).astype(np.float64)
    y[0, 0, 0, 0] = 1
    p = np.clip(y, training.P_CLAMP, 1 - training.P_CLAMP)
    cfg = LossConfig(alpha=0.5)
    cw = class_weights(y)
    loss, _ = combined_loss(p, y, np.ones_like(y), cw, cfg)
    n = y.size
    bce = np.sum(training.weighted_bce_terms(p, y, cw.pixel_weights(y), np.ones_like(y))) / n
    dice = training.dice_loss(p, y, cfg.dice_epsilon)
    assert bce < 1e-5
    assert abs(dice) < 1e-6
    assert loss == pytest.approx(0.5 * bce + 0.5 * dice)


def test_all_ones_phi_equals_plain_bce_bitwise():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, (3, 1, 9, 7)).astype(np.float32)
    y = (rng.random(p.shape) < 0.3).astype(np.float32)
    w = class_weights(y).pixel_weights(y).astype(np.float32)
    a = training.weighted_bce_terms(p, y, w, np.ones_like(p))
    b = training.bce_terms(p, y, w)
    assert a.tobytes() == b.tobytes()
    la, ga = combined_loss(p, y, np.ones_like(p), class_weights(y), LossConfig())
    lb, gb = combined_loss(p, y, None, class_weights(y), LossConfig())
    assert la == lb and ga.tobytes() == gb.tobytes()


def test_loss_input_errors():
    y = np.zeros((1, 1, 2, 2))
    with pytest.raises(ShapeError):
        combined_loss(np.full((1, 1, 2, 3), 0.5), y, None, ClassWeights(1.0), LossConfig())
    with pytest.raises(InvalidInputError):
        combined_loss(np.array([[[[0.5, np.nan], [0.5, 0.5]]]]), y, None, ClassWeights(1.0), LossConfig())
    with pytest.raises(ConfigError):
        LossConfig(alpha=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 1.0))
def test_lower_phi_never_raises_loss(seed, alpha):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, (1, 1, 4, 4))
    y = (rng.random(p.shape) < 0.5).astype(np.float64)
    y[0, 0, 0, 0] = 1
    phi = np.where(y > 0, rng.uniform(0.1, 1, p.shape), 1.0)
    cw, cfg = class_weights(y), LossConfig(alpha=alpha)
    base, _ = combined_loss(p, y, phi, cw, cfg)
    pos = np.argwhere(y > 0)[rng.integers(int(y.sum()))]
    lower = phi.copy()
    lower[tuple(pos)] *= rng.uniform(0, 1)
    assert combined_loss(p, y, lower, cw, cfg)[0] <= base + 1e-15
    assert base >= 0


def test_positive_gradient_linear_in_phi():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, (2, 1, 5, 5))
    y = (rng.random(p.shape) < 0.4).astype(np.float64)
    phi = np.where(y > 0, rng.uniform(0.2, 1, p.shape), 1.0)
    cw, cfg = class_weights(y), LossConfig(alpha=1.0)
    _, g1 = combined_loss(p, y, phi, cw, cfg)
    _, g2 = combined_loss(p, y, np.where(y > 0, 0.5 * phi, 1.0), cw, cfg)
    np.testing.assert_allclose(g2[y > 0], 0.5 * g1[y > 0], rtol=1e-12)
    np.testing.assert_array_equal(g2[y == 0], g1[y == 0])


def test_adam_fixed_point_and_first_step():
    params = {"a": np.array([1.0, -2.0])}
    st_ = AdamState(params)
    adam_step(params, {"a": np.zeros(2)}, st_, 0.1, 0.0)
    np.testing.assert_array_equal(params["a"], [1.0, -2.0])
    params = {"a": np.array([0.0, 3.0])}
    adam_step(params, {"a": np.ones(2)}, AdamState(params), 0.1, 0.0)
    np.testing.assert_allclose(params["a"], [-0.1, 2.9], atol=1e-8)


def test_adam_coupled_weight_decay():
    params = {"a": np.array([2.0])}
    st_ = AdamState(params)
    adam_step(params, {"a": np.zeros(1)}, st_, 0.01, 0.5)
    # the decay term alone drives the first normalized step
    np.testing.assert_allclose(params["a"], [2.0 - 0.01], atol=1e-8)


def test_adam_rejects_non_finite_gradient():
    params = {"good": np.ones(2), "bad": np.ones(2)}
    with pytest.raises(NumericError, match="bad"):
        adam_step(params, {"good": np.ones(2), "bad": np.array([1.0, np.inf])}, AdamState(params), 0.1)
    np.testing.assert_array_equal(params["good"], 1.0)


def test_one_cycle_examples():
    total = 1001
    lrs = [one_cycle_lr(s, total, 0.001) for s in range(total)]
    assert lrs[0] == pytest.approx(4e-5, rel=1e-12)
    assert lrs[300] == 0.001
    assert lrs[-1] == pytest.approx(1e-7, rel=1e-12)
    peak = int(np.argmax(lrs))
    assert peak == 300
    assert all(np.diff(lrs[:peak + 1]) > 0) and all(np.diff(lrs[peak:]) < 0)


@pytest.mark.parametrize("total", [1, 2, 3, 7, 100])
def test_one_cycle_single_peak(total):
    lrs = np.array([one_cycle_lr(s, total, 0.01) for s in range(total)])
    assert lrs.max() == 0.01
    interior = [i for i in range(1, total - 1) if lrs[i] > lrs[i - 1] and lrs[i] > lrs[i + 1]]
    assert len(interior) <= 1


def test_one_cycle_errors():
    with pytest.raises(InvalidInputError):
        one_cycle_lr(0, 0, 0.001)
    with pytest.raises(InvalidInputError):
        one_cycle_lr(5, 5, 0.001)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(moi="moi3")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(ema_beta=1.0)
    assert TrainConfig(moi="moi2").loss.use_moi_weights


def _samples(n, size=32, flag_every=3):
    out = []
    for i in range(n):
        ph = generate_phantom(i, size)
        oval = i % flag_every == 0
        mask = fit_oval(ph.truth).mask if oval else ph.truth
        out.append(SampleRecord(ph.image, mask, np.ones(mask.shape, np.float32), oval))
    return out


def test_batch_bounds():
    assert training._batch_bounds(40, 4) == [(i, i + 4) for i in range(0, 40, 4)]
    assert training._batch_bounds(9, 4) == [(0, 4), (4, 9)]
    assert training._batch_bounds(3, 8) == [(0, 3)]


def test_steps_per_epoch_and_ema_count():
    cfg = TrainConfig(epochs=2, augment=False, recalibrate_bn=False, seed=1)
    ps, logs = train(_samples(40), TINY_NET, cfg)
    assert [e.step for e in logs] == [10, 20]
    assert ps.t == 20


def test_prepare_weights_only_for_ovals():
    samples = _samples(6)
    ws = prepare_weights(samples, TrainConfig(moi="moi2", power_n=2.0))
    for s, w in zip(samples, ws):
        if s.inaccurate:
            assert w.min() < 1
            assert np.all(w[s.mask == 0] == 1)
        else:
            assert np.all(w == 1)
    assert all(np.all(w == 1) for w in prepare_weights(samples, TrainConfig()))


def test_toy_training_reduces_loss():
    cfg = TrainConfig(epochs=50, augment=False, recalibrate_bn=False, seed=0, dropout_p=0.1, max_lr=0.003)
    _, logs = train(_samples(10), TINY_NET, cfg)
    assert logs[-1].loss < logs[0].loss
    assert all(math.isfinite(e.loss) for e in logs)


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, seed=4, moi="moi1")
    a, la = train(_samples(8), TINY_NET, cfg)
    b, lb = train(_samples(8), TINY_NET, cfg)
    assert la == lb
    for k in a.shadow:
        assert a.shadow[k].tobytes() == b.shadow[k].tobytes()
        assert a.theta[k].tobytes() == b.theta[k].tobytes()
    for k in a.buffers:
        assert a.buffers[k].tobytes() == b.buffers[k].tobytes()


def test_recalibration_resets_and_fills_buffers():
    cfg = TrainConfig(epochs=1, seed=2, augment=False)
    ps, _ = train(_samples(8), TINY_NET, cfg)
    for k, v in ps.buffers.items():
        assert np.all(np.isfinite(v))
        if k.endswith(".var"):
            assert np.all(v > 0)


def test_predict_and_log_format():
    cfg = TrainConfig(epochs=1, seed=3, augment=False)
    samples = _samples(5)
    ps, logs = train(samples, TINY_NET, cfg)
    probs = training.predict(TINY_NET, ps, np.stack([s.image for s in samples]), batch_size=2)
    assert probs.shape == (5, 32, 32)
    assert np.all((probs > 0) & (probs < 1))
    text = training.format_log(logs)
    assert text.splitlines()[0] == "epoch,step,lr,loss"
    assert len(text.splitlines()) == 2


def test_train_rejects_empty():
    with pytest.raises(ConfigError):
        train([], TINY_NET, TrainConfig())
