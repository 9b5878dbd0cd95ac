import json

import pytest

from stream_ssm.modules import configure
from stream_ssm.modules.errors import ConfigurationError

DEFAULTS = {"seed": 0, "model": {"n": 8, "m": 4}}


def test_default_config_is_created(tmp_path):
    path = tmp_path / "sub" / "config.json"
    config = configure.verify_default_config(str(path), DEFAULTS)
    assert config == DEFAULTS
    assert json.loads(path.read_text()) == DEFAULTS


def test_missing_keys_are_merged(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"model": {"n": 16}}))
    config = configure.verify_default_config(str(path), DEFAULTS)
    assert config == {"seed": 0, "model": {"n": 16, "m": 4}}
    assert json.loads(path.read_text()) == config


def test_corrupted_config_is_recreated(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    assert configure.verify_default_config(str(path), DEFAULTS) == DEFAULTS


def test_user_config_is_not_rewritten(tmp_path):
    path = tmp_path / "user.json"
    path.write_text('{"seed": 3}')
    config = configure.load_config(str(path), DEFAULTS)
    assert config["seed"] == 3 and config["model"] == {"n": 8, "m": 4}
    assert path.read_text() == '{"seed": 3}'


def test_user_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        configure.load_config(str(tmp_path / "missing.json"), DEFAULTS)
    path = tmp_path / "bad.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        configure.load_config(str(path), DEFAULTS)


def test_overrides_skip_unset_flags():
    config = {"seed": 0, "model": {"n": 8}}
    configure.apply_overrides(config, {"seed": None, "model.n": 2, "bench.m": 3})
    assert config == {"seed": 0, "model": {"n": 2}, "bench": {"m": 3}}


def test_defaults_are_copied():
    config = {}
    configure.merge_defaults(config, DEFAULTS)
    config["model"]["n"] = 99
    assert DEFAULTS["model"]["n"] == 8
