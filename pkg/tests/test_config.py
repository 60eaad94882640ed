import pytest

from v2s.config import RunConfig


@pytest.mark.parametrize("name", ["default", "mini", "tiny"])
def test_round_trip(name, tmp_path):
    cfg = RunConfig.preset(name)
    path = tmp_path / "c.txt"
    cfg.save(path)
    assert RunConfig.load(path) == cfg


def test_derived_model_fields_follow_audio():
    c = RunConfig()
    assert (c.model.l, c.model.n_mels, c.model.d_lin) == (4, 80, 513)
    t = RunConfig.preset("tiny")
    assert (t.model.l, t.model.n_mels, t.model.d_lin) == (2, 8, 17)


def test_overrides_and_ablation_switches():
    c = RunConfig.from_text("preset=tiny\nuse_flow=false\nuse_postnet=no\nlearning_rate=0.01\nsynth=mel-exemplar\n")
    assert not c.model.use_flow and not c.model.use_postnet
    assert c.train.learning_rate == 0.01
    assert c.synth == "mel-exemplar"
    assert c.model.K == 3


def test_base_config_takes_precedence_over_default():
    c = RunConfig.from_text("max_epochs=7\n", RunConfig.preset("mini"))
    assert c.model.H == 40 and c.train.max_epochs == 7


def test_tuple_values():
    c = RunConfig.from_text("decoder_widths=32,16\nphases=1\n", RunConfig.preset("tiny"))
    assert c.model.decoder_widths == (32, 16)
    assert c.train.phases == (1,)


@pytest.mark.parametrize(
    "text, match",
    [
        ("bogus=1\n", "line 1: unknown config key"),
        ("# c\nK=three\n", "line 2: bad value for K"),
        ("use_flow=maybe\n", "boolean"),
        ("no equals sign\n", "line 1"),
        ("synth=wavenet\n", "synth"),
        ("use_pixels=false\nuse_flow=false\n", "at least one"),
        ("train_fraction=1.0\n", "train_fraction"),
        ("batch_size=0\n", "batch"),
    ],
)
def test_rejections(text, match):
    with pytest.raises(ValueError, match=match):
        RunConfig.from_text(text)


def test_unknown_preset():
    with pytest.raises(ValueError):
        RunConfig.preset("huge")


def test_every_key_documented_in_text():
    text = RunConfig().to_text()
    keys = {line.split("=")[0] for line in text.splitlines() if "=" in line}
    for k in ("use_pixels", "use_flow", "use_postnet", "synth", "learning_rate", "win_length", "T", "K"):
        assert k in keys
