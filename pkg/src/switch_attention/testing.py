import numpy as np
import pytest
from typing_extensions import Tuple

from .harness.schedule import TrainConfig
from .harness.synthetic_data import DataConfig, TaskKind
from .model.config import AttentionMode, ModelConfig
from .model.transformer import SwiAttnModel


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig.toy()


@pytest.fixture
def toy_model(toy_config) -> SwiAttnModel:
    return SwiAttnModel.initialize(toy_config, seed=0, init_std=0.5)


@pytest.fixture
def toy_donor() -> SwiAttnModel:
    return SwiAttnModel.initialize(ModelConfig.toy(AttentionMode.FULL_ONLY), seed=0, init_std=0.5)


@pytest.fixture
def toy_tokens(toy_config) -> np.ndarray:
    return np.random.default_rng(0).integers(0, toy_config.vocab_size, size=(2, 9))


@pytest.fixture
def mixed_gate_model() -> Tuple[SwiAttnModel, np.ndarray]:
    """
    A routed toy model whose routers send roughly half of the tokens to each branch,
    together with tokens of a sequence longer than the window.
    """
    config = ModelConfig.toy(window=3, n_layers=2)
    model = SwiAttnModel.initialize(config, seed=3, init_std=0.5)
    rng = np.random.default_rng(4)
    for layer in model.layers:
        layer.router.weight.data[:] = rng.normal(scale=2.0, size=config.d_model)
        layer.router.bias.data[...] = 0.0
    tokens = rng.integers(0, config.vocab_size, size=(1, 12))
    return model, tokens


@pytest.fixture
def tiny_training() -> Tuple[ModelConfig, TrainConfig, DataConfig]:
    """
    A few optimizer steps on short sequences; enough to exercise the whole training path.
    """
    model_config = ModelConfig.toy(AttentionMode.FULL_ONLY, window=4)
    train_config = TrainConfig(total_steps=6, batch_size=2, seq_len=16, warmup_steps=2, log_every=2)
    data_config = DataConfig(task=TaskKind.LM_CORPUS, max_period=4, niah_context_lengths=[12], niah_samples=1)
    return model_config, train_config, data_config
