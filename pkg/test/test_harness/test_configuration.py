import json
from pathlib import Path

import pytest

from switch_attention.exceptions import ConfigurationError
from switch_attention.harness.configuration import (
    SEED_ENVIRONMENT_VARIABLE,
    ExperimentConfig,
    load_experiment,
    resolve_seed,
)
from switch_attention.model.config import AttentionMode, ModelConfig


@pytest.fixture(autouse=True)
def no_seed_environment(monkeypatch):
    monkeypatch.delenv(SEED_ENVIRONMENT_VARIABLE, raising=False)


def write_config(tmp_path, content) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(content) if not isinstance(content, str) else content)
    return str(path)


def test_seed_precedence(monkeypatch):
    assert resolve_seed(None, 3) == 3
    monkeypatch.setenv(SEED_ENVIRONMENT_VARIABLE, "11")
    assert resolve_seed(None, 3) == 11
    assert resolve_seed(5, 3) == 5
    monkeypatch.setenv(SEED_ENVIRONMENT_VARIABLE, "eleven")
    with pytest.raises(ConfigurationError):
        resolve_seed(None, 3)


def test_seed_reaches_both_training_stages(tmp_path):
    config = load_experiment(write_config(tmp_path, {"seed": 4}))
    assert config.seed == config.pretrain.seed == config.cpt.seed == 4
    assert load_experiment(write_config(tmp_path, {"seed": 4}), seed_flag=9).cpt.seed == 9


def test_defaults_without_a_file():
    config = load_experiment(None)
    assert config.model == ModelConfig()
    assert config.donor_model.attention_mode is AttentionMode.FULL_ONLY
    assert config.cpt.total_steps == 1500 and config.cpt.peak_lr == 1e-3


def test_partial_sections_keep_their_defaults(tmp_path):
    content = {"model": {"n_layers": 2, "attention": {"window": 8}}, "cpt": {"total_steps": 20, "warmup_steps": 2}}
    config = load_experiment(write_config(tmp_path, content))
    assert config.model.n_layers == 2 and config.model.attention.window == 8
    assert config.cpt.total_steps == 20 and config.cpt.peak_lr == 1e-3
    assert config.model.attention_mode is AttentionMode.SWIATTN


def test_round_trip(tmp_path):
    config = ExperimentConfig(model=ModelConfig.toy(window=16), seed=2)
    assert load_experiment(write_config(tmp_path, config.to_json())) == config.with_seed(2)


@pytest.mark.parametrize("content", [{"optimizer": {}}, "{not json", {"model": {"layers": 3}}])
def test_invalid_files(tmp_path, content):
    with pytest.raises(ConfigurationError):
        load_experiment(write_config(tmp_path, content))


CONFIG_DIRECTORY = Path(__file__).parents[2] / "resources" / "configs"


@pytest.mark.parametrize("name", ["toy.json", "desk.json"])
def test_shipped_configs_load(name):
    config = load_experiment(CONFIG_DIRECTORY / name)
    assert config.model.attention_mode is AttentionMode.SWIATTN
    assert config.model.attention.window == 16


def test_desk_config_is_the_default_model():
    assert load_experiment(CONFIG_DIRECTORY / "desk.json").model == ModelConfig()
