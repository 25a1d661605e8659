from dataclasses import fields

import pytest

from smrnet.config import ConfigError, RunConfig, default_config


def test_defaults_match_smoke_recipe():
    c = default_config()
    assert (c.preset, c.epochs, c.batch_size, c.image_size, c.lr) == ("tiny", 15, 4, 96, 0.005)
    assert c.cf == 64 and c.head_hidden == 256
    assert RunConfig(preset="full").cf == 256


def test_dumps_loads_roundtrip():
    c = RunConfig(attention_enabled=False, dilations=(3, 5), lr=0.0123, data=["a", "b"],
                  anchor_scales=(8.0, 24.0))
    assert RunConfig.loads(c.dumps()) == c


def test_comments_and_whitespace():
    text = "# smoke run\npreset = tiny   # inline\n\nrw_enabled = false\nseed=3\n"
    c = RunConfig.loads(text)
    assert c.rw_enabled is False and c.seed == 3


def test_one_line_per_field():
    lines = RunConfig().dumps().splitlines()
    assert [ln.split("=")[0].strip() for ln in lines] == [f.name for f in fields(RunConfig)]


@pytest.mark.parametrize("text", ["bogus = 1", "epochs = many", "attention_enabled = maybe",
                                  "preset = medium", "batch_size = 1", "image_size = 100",
                                  "lr = 0", "dilations = 2", "rpn_combine = max", "momentum = 1.0"])
def test_rejects_bad_values(text):
    with pytest.raises(ConfigError):
        RunConfig.loads(text)


def test_load_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("epochs = 2\n")
    assert RunConfig.load(str(p)).epochs == 2


def test_replace_validates():
    with pytest.raises(ConfigError):
        RunConfig().replace(batch_size=1)
