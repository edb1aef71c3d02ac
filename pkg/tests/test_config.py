import pytest

from pscr import config
from pscr.errors import ConfigurationError


def test_defaults():
    cfg = config.RunConfig.defaults()
    assert cfg["train.learning_rate"] == 1e-4
    assert cfg["train.weight_decay"] == 1e-5
    assert cfg["sampler.start_indices"] == (0, 16, 32)
    assert cfg["vote.num_exemplars"] == 10


def test_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nseed = 3\ntrain.epochs = 7  # trailing\nvote.shared = yes\n")
    cfg = config.build(str(f), {"seed": "11"})
    assert cfg["seed"] == 11
    assert cfg["train.epochs"] == 7
    assert cfg["vote.shared"] is True
    assert cfg["train.batch_size"] == 8


def test_dump_reloads_identically(tmp_path):
    cfg = config.build(overrides={
        "sampler.start_indices": "0,8", "ablate.preprocessors": "resize:32;overlap:0,16,32/32",
        "train.learning_rate": "0.001", "train.freeze_backbone": "true",
    })
    f = tmp_path / "dump.cfg"
    f.write_text(cfg.dump())
    assert config.build(str(f)) == cfg


def test_unknown_key_and_bad_value(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown config key 'trian.epochs'"):
        config.build(overrides={"trian.epochs": "3"})
    with pytest.raises(ConfigurationError, match="train.epochs"):
        config.build(overrides={"train.epochs": "many"})
    f = tmp_path / "bad.cfg"
    f.write_text("seed 3\n")
    with pytest.raises(ConfigurationError, match=":1:"):
        config.build(str(f))
    with pytest.raises(ConfigurationError, match="not found"):
        config.build(str(tmp_path / "missing.cfg"))
