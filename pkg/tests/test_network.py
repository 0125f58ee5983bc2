import struct

import numpy as np
import pytest

import gradcases
from ovalseg import network
from ovalseg.errors import ConfigError, FormatError, InvalidStateError
from ovalseg.network import NetConfig, ParameterSet, ema_update, forward, load_params, save_params


@pytest.fixture(scope="module")
def desk():
    cfg = NetConfig(init_channels=8, depth=3)
    return cfg, ParameterSet.create(cfg, seed=0)


def test_output_shape_and_range(desk):
    cfg, ps = desk
    x = np.random.default_rng(0).random((1, 1, 64, 64)).astype(np.float32)
    y = forward(cfg, ps.shadow, x, "eval", ps.buffers)
    assert y.shape == (1, 1, 64, 64)
    assert np.all((y > 0) & (y < 1))


def test_eval_forward_is_bit_deterministic(desk):
    cfg, ps = desk
    x = np.random.default_rng(1).random((2, 1, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(forward(cfg, ps.theta, x, "eval", ps.buffers),
                                  forward(cfg, ps.theta, x, "eval", ps.buffers))


def test_train_forward_depends_on_seed_only(desk):
    cfg, ps = desk
    x = np.random.default_rng(2).random((2, 1, 64, 64)).astype(np.float32)

    def run(seed):
        buf = {k: v.copy() for k, v in ps.buffers.items()}
        return forward(cfg, ps.theta, x, "train", buf, seed=seed), buf

    (a, ba), (b, bb), (c, _) = run(5), run(5), run(6)
    np.testing.assert_array_equal(a, b)
    for k in ba:
        np.testing.assert_array_equal(ba[k], bb[k])
    assert not np.array_equal(a, c)


def test_divisibility_error_names_dimension(desk):
    cfg, ps = desk
    with pytest.raises(ConfigError, match="height 60"):
        forward(cfg, ps.theta, np.zeros((1, 1, 60, 64), np.float32), "eval", ps.buffers)
    with pytest.raises(ConfigError, match="width"):
        forward(cfg, ps.theta, np.zeros((1, 1, 64, 36), np.float32), "eval", ps.buffers)


def test_pyramid_concat_doubles_channels():
    cfg = NetConfig(init_channels=4, depth=3, pyramid_scales=(1, 2, 3, 6), dropout_p=0.0)
    assert cfg.bottleneck_channels == 32
    ps = ParameterSet.create(cfg, seed=1)
    x = np.random.default_rng(3).random((1, 1, 128, 128)).astype(np.float32)
    _, cache = forward(cfg, ps.theta, x, "eval", ps.buffers, keep_cache=True)
    widths = cache["ppm"][1]
    assert widths == [32, 8, 8, 8, 8] and sum(widths) == 64
    assert ps.theta["post.a.w"].shape[2] == 64
    bottleneck_hw = cache["bott.b"][0][0][1:3]
    assert bottleneck_hw == (16, 16)


def test_config_validation():
    for bad in (dict(init_channels=6), dict(depth=0), dict(pyramid_scales=()), dict(dropout_p=1.0)):
        with pytest.raises(ConfigError):
            NetConfig(**bad)
    cfg = NetConfig(init_channels=12, depth=2, pyramid_scales=(1, 4))
    assert NetConfig.from_text(cfg.to_text()) == cfg


def test_end_to_end_gradient():
    errors, directional, bias_norm = gradcases.network_gradient_errors(seed=0)
    assert max(errors.values()) < 1e-3
    assert directional < 1e-3
    assert bias_norm < 1e-12


def test_ema_constant_fixed_point():
    theta = {"w": np.array([0.1, -3.7, 1e-20, 12345.678], np.float32)}
    ps = ParameterSet(theta={k: v.copy() for k, v in theta.items()})
    for _ in range(50):
        ema_update(ps)
    np.testing.assert_array_equal(ps.shadow["w"], theta["w"])


def test_ema_single_step():
    ps = ParameterSet(theta={"w": np.ones(3, np.float32)}, shadow={"w": np.zeros(3, np.float32)}, beta=0.995)
    ema_update(ps)
    expect = np.float32(0.005)
    assert np.all(np.abs(ps.shadow["w"] - expect) <= np.spacing(expect))
    assert ps.t == 1


def test_ema_stays_in_hull():
    rng = np.random.default_rng(4)
    seq = rng.uniform(-2, 3, size=(200, 10)).astype(np.float32)
    ps = ParameterSet(theta={"w": seq[0].copy()}, beta=0.9)
    lo, hi = seq[0].copy(), seq[0].copy()
    for th in seq[1:]:
        ps.theta["w"][...] = th
        lo, hi = np.minimum(lo, th), np.maximum(hi, th)
        ema_update(ps)
        assert np.all(ps.shadow["w"] >= lo) and np.all(ps.shadow["w"] <= hi)


def test_ema_rejects_mismatch():
    ps = ParameterSet(theta={"w": np.ones(3, np.float32)}, shadow={"w": np.ones(4, np.float32)})
    with pytest.raises(InvalidStateError):
        ema_update(ps)
    with pytest.raises(ConfigError):
        ParameterSet(theta={}, beta=1.0)


def _saved(tmp_path, cfg=None):
    cfg = cfg or NetConfig(init_channels=4, depth=2, pyramid_scales=(1, 2))
    ps = ParameterSet.create(cfg, seed=3)
    ps.theta["head.b"][...] = 0.25
    ema_update(ps)
    path = tmp_path / "ck.bin"
    save_params(path, ps, cfg)
    return path, ps, cfg


def test_checkpoint_round_trip(tmp_path):
    path, ps, cfg = _saved(tmp_path)
    back, cfg2 = load_params(path)
    assert cfg2 == cfg and back.beta == ps.beta and back.t == ps.t
    for section in ("theta", "shadow", "buffers"):
        a, b = getattr(ps, section), getattr(back, section)
        assert list(a) == list(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    save_params(tmp_path / "again.bin", back, cfg2)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_truncated(tmp_path):
    path, _, _ = _saved(tmp_path)
    data = path.read_bytes()
    for cut in (4, 40, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_params(path)


def test_checkpoint_bad_magic_and_version(tmp_path):
    path, _, _ = _saved(tmp_path)
    data = path.read_bytes()
    path.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(FormatError, match="magic"):
        load_params(path)
    path.write_bytes(data[:8] + struct.pack("<I", 99) + data[12:])
    with pytest.raises(FormatError, match="version"):
        load_params(path)


def test_checkpoint_missing_shadow(tmp_path):
    path, ps, cfg = _saved(tmp_path)
    buf = bytearray(network.MAGIC + struct.pack("<IdQ", network.VERSION, ps.beta, ps.t))
    buf += network._pack_str(cfg.to_text(), "<I")
    for name, tensors in (("theta", ps.theta), ("buffers", ps.buffers)):
        buf += network._pack_str(name) + network._pack_tensors(tensors)
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="shadow"):
        load_params(path)
