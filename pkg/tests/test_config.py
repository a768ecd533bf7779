import pytest

from strm import config as cfgmod
from strm.config import ConfigError, RunConfig


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.lr == 0.01 and cfg.train.weight_decay == 5e-4 and cfg.train.momentum == 0.9
    assert cfg.train.nesterov and cfg.train.margin == 0.4


def test_dump_load_roundtrip(tiny_cfg):
    text = cfgmod.dumps(tiny_cfg)
    again = cfgmod.loads(text)
    assert again == tiny_cfg
    assert cfgmod.dumps(again) == text


def test_data_fields_reach_the_model(tiny_cfg):
    assert tiny_cfg.model.num_identities == 3
    assert (tiny_cfg.model.image_height, tiny_cfg.model.image_width) == (64, 32)


@pytest.mark.parametrize("text,match", [
    ("[train]\nbogus = 1\n", "unknown key"),
    ("[nope]\nx = 1\n", "unknown section"),
    ("[train]\nlr = fast\n", "bad value"),
    ("[train]\nuse_lc = maybe\n", "bad value"),
    ("[train]\nlr = -1\n", "non-negative"),
    ("[train]\nn_ids = 30\n", "exceeds"),
    ("[model]\nrru_variant = sideways\n", "sideways"),
    ("no section header\n", "malformed"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        cfgmod.loads(text)


def test_overrides_bare_and_qualified(tiny_text):
    cfg = cfgmod.loads(tiny_text, {"use_rru": "false", "train.seed": "9", "occlusion_prob": "0.4"})
    assert cfg.model.use_rru is False
    assert cfg.train.seed == 9
    assert cfg.data.corruption.occlusion_prob == 0.4


def test_unknown_override(tiny_text):
    with pytest.raises(ConfigError):
        cfgmod.loads(tiny_text, {"nonsense": "1"})


def test_parse_assignments():
    assert cfgmod.parse_assignments("a=1, b = x ,") == {"a": "1", "b": "x"}
    with pytest.raises(ConfigError):
        cfgmod.parse_assignments("a")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        cfgmod.load(tmp_path / "absent.ini")
