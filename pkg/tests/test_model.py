import logging

import numpy as np
import pytest

from v2s import autodiff as ad
from v2s import gradcheck
from v2s.fileio import FormatError
from v2s.model import Model, ModelConfig, load_checkpoint, save_checkpoint, to_feature


@pytest.fixture(scope="module")
def default_model():
    return Model(ModelConfig())


@pytest.fixture(scope="module")
def tiny():
    return Model(ModelConfig.tiny(), seed=3)


def tiny_inputs(cfg, b, seed=0):
    r = np.random.default_rng(seed)
    return r.standard_normal((b, cfg.K, cfg.H, cfg.W)), r.standard_normal((b, 2 * (cfg.K - 1), cfg.H, cfg.W))


# --------------------------------------------------------- shape contracts


def test_default_embedding_and_prepool(default_model):
    c = default_model.config
    emb, maps = default_model.encoder_forward(
        np.zeros((1, 9, 160, 128)), np.zeros((1, 16, 160, 128)), "infer", return_maps=True
    )
    assert emb.shape == (1, 1024) and c.embedding_size == 1024
    assert maps["pix"].shape[2:] == maps["flow"].shape[2:] == (5, 4) == c.prepool_shape()
    assert np.all(np.isfinite(emb.value))


def test_default_decoder_and_postnet(default_model):
    emb = ad.constant(np.random.default_rng(0).standard_normal((2, 1024)).astype(np.float32))
    mel = default_model.decoder_forward(emb)
    assert mel.shape == (2, 4, 80)
    assert default_model.config.mel_block_size == 320
    assert np.all(np.abs(mel.value) < 1)
    seq = ad.constant(np.random.default_rng(1).random((1, 32, 80)).astype(np.float32))
    assert default_model.postnet_forward(seq).shape == (1, 32, 513)


def test_tower_width_schedule():
    c = ModelConfig()
    assert [c.stem_width, *c.tower_widths()] == [128] * 3 + [256] * 4 + [512] * 4
    assert [i for i, s in enumerate(c.block_strides, 1) if s == 2] == [1, 2, 4, 6, 8]


@pytest.mark.parametrize("pix, flow", [(True, False), (False, True)])
def test_single_tower_keeps_embedding_size(pix, flow):
    c = ModelConfig.tiny(use_pixels=pix, use_flow=flow)
    assert c.embedding_size == ModelConfig.tiny().embedding_size
    m = Model(c)
    p, f = tiny_inputs(c, 2)
    emb = m.encoder_forward(p if pix else None, f if flow else None)
    assert emb.shape == (2, c.embedding_size)


def test_block_shapes_follow_schedule(tiny):
    c = tiny.config
    h, w = c.H, c.W
    x = ad.constant(np.zeros((1, c.K, c.H, c.W)))
    _, fmap = tiny.tower_forward("pix", x, "infer")
    for s in c.block_strides:
        h, w = -(-h // s), -(-w // s)
    assert fmap.shape == (1, c.tower_widths()[-1], h, w)


def test_both_towers_disabled_is_config_error():
    with pytest.raises(ValueError):
        ModelConfig(use_pixels=False, use_flow=False)


def test_disabled_tower_input_ignored_with_warning(caplog):
    c = ModelConfig.tiny(use_flow=False)
    m = Model(c)
    p, f = tiny_inputs(ModelConfig.tiny(), 1)
    with caplog.at_level(logging.WARNING):
        a = m.encoder_forward(p, f)
    assert "disabled" in caplog.text
    np.testing.assert_array_equal(a.value, m.encoder_forward(p, None).value)


def test_missing_enabled_input_raises(tiny):
    p, _ = tiny_inputs(tiny.config, 1)
    with pytest.raises(ValueError):
        tiny.encoder_forward(p, None)


def test_decoder_rejects_wrong_embedding(tiny):
    with pytest.raises(ad.ShapeError):
        tiny.decoder_forward(ad.constant(np.zeros((1, 5))))


# ---------------------------------------------------------------- init


def test_same_seed_bit_identical():
    a, b = Model(ModelConfig.tiny(), seed=5), Model(ModelConfig.tiny(), seed=5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].value, b.params[k].value)
    c = Model(ModelConfig.tiny(), seed=6)
    assert not np.array_equal(a.params["pix/stem/kernel"].value, c.params["pix/stem/kernel"].value)


@pytest.mark.parametrize("name", ["pix/block4/conv2/kernel", "flow/block9/conv3/kernel", "dec/fc1/W"])
def test_he_initialization_std(default_model, name):
    w = default_model.params[name].value
    fan_in = int(np.prod(w.shape[1:])) if w.ndim == 4 else w.shape[0]
    assert w.size >= 1e4
    assert abs(w.std() / np.sqrt(2.0 / fan_in) - 1) < 0.1


def test_biases_and_bn_start_neutral(tiny):
    for k, v in tiny.params.items():
        if k.endswith("/b") or k.endswith("/beta"):
            assert not np.any(v.value)
        if k.endswith("/gamma"):
            np.testing.assert_array_equal(v.value, 1.0)


def test_no_postnet_params_when_disabled():
    m = Model(ModelConfig.tiny(use_postnet=False))
    assert m.postnet_names() == []
    assert not any(k.startswith("post/") for k in m.state_arrays())
    with pytest.raises(ValueError):
        m.postnet_forward(ad.constant(np.zeros((1, 8, 8))))


# --------------------------------------------------------------- forward


def test_infer_mode_batch_independent(tiny):
    p, f = tiny_inputs(tiny.config, 4, seed=1)
    batched = tiny.predict_frames(p, f).value
    for i in range(4):
        single = tiny.predict_frames(p[i : i + 1], f[i : i + 1]).value
        np.testing.assert_allclose(single[0], batched[i], atol=1e-5)
    order = [2, 0, 3, 1]
    np.testing.assert_allclose(tiny.predict_frames(p[order], f[order]).value, batched[order], atol=1e-5)


def test_infer_mode_ignores_dropout(tiny):
    p, f = tiny_inputs(tiny.config, 2)
    a = tiny.predict_frames(p, f, "infer", np.random.default_rng(0), (0.5, 0.5)).value
    b = tiny.predict_frames(p, f, "infer", np.random.default_rng(9), (0.5, 0.5)).value
    np.testing.assert_array_equal(a, b)


def test_train_mode_dropout_uses_rng():
    m = Model(ModelConfig.tiny())
    p, f = tiny_inputs(m.config, 4)
    a = m.predict_frames(p, f, "train", np.random.default_rng(0), (0.25, 0.5)).value
    b = m.predict_frames(p, f, "train", np.random.default_rng(0), (0.25, 0.5)).value
    c = m.predict_frames(p, f, "train", np.random.default_rng(1), (0.25, 0.5)).value
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_feature_space_outputs(tiny):
    # float32 tanh rounds to exactly ±1 once saturated; the open interval holds in float64
    p, f = tiny_inputs(tiny.config, 3)
    out = tiny.astype(np.float64).predict_frames(p, f).value
    assert out.shape == (3, 2, 8)
    assert np.all((out > 0) & (out < 1))
    np.testing.assert_allclose(to_feature(ad.constant(np.array([-1.0, 0.0, 1.0]))).value, [0, 0.5, 1])


def test_conv_bank_time_shift_equivariance(tiny):
    c = tiny.config
    x = np.random.default_rng(2).random((1, c.n_mels, 12))
    shifted = np.roll(x, 1, axis=2)
    a = tiny.conv_bank(ad.constant(x), "infer").value
    b = tiny.conv_bank(ad.constant(shifted), "infer").value
    reach = c.bank_size
    np.testing.assert_allclose(b[..., reach + 1 : -reach], a[..., reach : -reach - 1], atol=1e-6)


def test_postnet_shape_and_mel_check(tiny):
    c = tiny.config
    seq = ad.constant(np.random.default_rng(0).random((2, c.T * c.l, c.n_mels)))
    assert tiny.postnet_forward(seq).shape == (2, c.T * c.l, c.d_lin)
    with pytest.raises(ad.ShapeError):
        tiny.postnet_forward(ad.constant(np.zeros((1, 4, c.n_mels + 1))))


# ------------------------------------------------------- gradient checks


def test_decoder_and_postnet_gradients():
    res = gradcheck.network_checks(seed=1)
    assert res["decoder"] < 1e-4
    assert res["postnet"] < 1e-3
    assert res["model_end_to_end"] < 1e-3


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path):
    m = Model(ModelConfig.tiny(use_flow=False), seed=4)
    m.bn["pix/stem/bn"].mean[:] = 0.25
    path = tmp_path / "m.v2sm"
    save_checkpoint(path, m, "note=hello\n")
    back, text = load_checkpoint(path)
    assert back.config == m.config
    assert "note=hello" in text
    for k, v in m.state_arrays().items():
        np.testing.assert_array_equal(back.state_arrays()[k], v)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.v2sm"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "m.v2sm"
    save_checkpoint(p, Model(ModelConfig.tiny()))
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_load_state_shape_mismatch():
    a = Model(ModelConfig.tiny())
    b = Model(ModelConfig.tiny(decoder_widths=(16, 12)))
    with pytest.raises(ad.ShapeError):
        b.load_state_arrays(a.state_arrays())


def test_astype_preserves_values(tiny):
    m64 = tiny.astype(np.float64)
    p, f = tiny_inputs(tiny.config, 2)
    np.testing.assert_allclose(m64.predict_frames(p, f).value, tiny.predict_frames(p, f).value, atol=1e-5)
