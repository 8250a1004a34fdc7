"""Configuration layering and validation."""

import json

import numpy as np
import pytest

from experiment_config import DEFAULT_SETTINGS, SEED_ENV_VAR, ExperimentConfig
from modules.autodiff import ExampleKind
from modules.errors import ConfigError
from modules.toy_corpus import Example
from utils.data_validators import ExampleValidator


def test_defaults_are_valid():
    config = ExperimentConfig()
    assert config.validate() == []
    assert config.model.variant == "delib-jatd-full"
    assert config.decoding.lambda_grid == (0.01, 0.025, 0.05)


def test_file_merges_over_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"training": {"steps": 7}, "decoding": {"lambda_grid": [0.2]}}))
    config = ExperimentConfig(str(path))
    assert config.training.steps == 7
    assert config.training.batch_size == DEFAULT_SETTINGS["training"]["batch_size"]
    assert config.decoding.lambda_grid == (0.2,)


def test_precedence_defaults_file_env_flags(tmp_path, monkeypatch):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"runtime": {"seed": 10}}))
    assert ExperimentConfig(str(path)).seed == 10
    monkeypatch.setenv(SEED_ENV_VAR, "20")
    assert ExperimentConfig(str(path)).seed == 20
    assert ExperimentConfig(str(path), {"runtime.seed": 30}).seed == 30


def test_bad_seed_environment_rejected(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "many")
    with pytest.raises(ConfigError):
        ExperimentConfig()


@pytest.mark.parametrize("content", ['{"trainer": {}}', "[1, 2]", "{not json"])
def test_malformed_files_rejected(tmp_path, content):
    path = tmp_path / "cfg.json"
    path.write_text(content)
    with pytest.raises(ConfigError):
        ExperimentConfig(str(path))


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(str(tmp_path / "absent.json"))


def test_unknown_section_key_rejected():
    config = ExperimentConfig(None, {"model.dropout": 0.1})
    with pytest.raises(ConfigError):
        config.model


def test_derive_leaves_original_untouched():
    config = ExperimentConfig()
    derived = config.derive({"runtime.seed": 99, "model.variant": "las"})
    assert derived.seed == 99 and derived.model.variant == "las"
    assert config.seed == DEFAULT_SETTINGS["runtime"]["seed"]
    assert config.model.variant == "delib-jatd-full"


def test_save_config_writes_resolved_settings(tmp_path):
    config = ExperimentConfig(None, {"training.steps": 3})
    path = tmp_path / "out" / "resolved.json"
    assert config.save_config(str(path))
    assert json.loads(path.read_text())["training"]["steps"] == 3


@pytest.mark.parametrize("key,value", [
    ("training.lambda_train", 1.5),
    ("model.variant", "transformer"),
    ("model.num_heads", 3),
    ("decoding.lambda_grid", []),
    ("decoding.second_beam", 0),
    ("corpus.min_length", 9),
    ("runtime.threads", 0),
])
def test_validation_reports_bad_values(key, value):
    errors = ExperimentConfig(None, {key: value}).validate()
    assert errors
    assert any(key.split(".")[0] in e for e in errors)


def test_example_validator_flags_problems():
    ok, errors = ExampleValidator.validate_example(
        Example("x", (0, 9), ExampleKind.PAIRED, np.full((2, 3), np.nan)), vocab_size=5, feature_dim=3)
    assert not ok
    assert len(errors) == 3
    good = Example("y", (2,), ExampleKind.PAIRED, np.zeros((2, 3)))
    assert ExampleValidator.validate_split([good], 5, 3) == (True, [])
