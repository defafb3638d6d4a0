import pytest

from shiftfold.harness.config import DEFAULTS, format_config, load_config, parse_config_text


def test_defaults_mirror_full_budget():
    cfg = load_config()
    assert cfg["splitter.K"] == 5 and cfg["train.epochs"] == 100


def test_file_then_overrides(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nsplitter.K = 3\ntrain.lr=0.01\ntrain.test_every_epoch = false\n")
    cfg = load_config(tmp_path / "c.cfg", {"splitter.K": "4"})
    assert cfg["splitter.K"] == 4 and cfg["train.lr"] == 0.01 and cfg["train.test_every_epoch"] is False
    assert isinstance(cfg["dataset.separation"], float)


def test_format_roundtrip():
    cfg = load_config(overrides={"vae.lr": "0.002", "model.names": "lenet:bayes,mlp-small"})
    assert parse_config_text(format_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["nokey\n", "bogus.key = 1\n", "splitter.K = three\n",
                                  "train.test_every_epoch = maybe\n"])
def test_bad_config_lines(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_every_key_has_a_namespace():
    prefixes = {k.split(".")[0] for k in DEFAULTS}
    assert prefixes == {"dataset", "splitter", "vae", "vgmm", "model", "train", "report"}
