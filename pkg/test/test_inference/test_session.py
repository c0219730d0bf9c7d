from dataclasses import dataclass

import numpy as np
import pytest
from scipy.special import expit

from switch_attention.exceptions import (
    ConfigurationError,
    ContractViolationError,
    SequenceTooLongError,
    SessionNotPrefilledError,
)
from switch_attention.harness.schedule import TrainConfig
from switch_attention.harness.synthetic_data import BOS, SPECIAL_TOKEN_COUNT, SyntheticBatch
from switch_attention.harness.training import Trainer
from switch_attention.inference.session import InferenceSession, generate
from switch_attention.model.config import AttentionMode, Branch, ModelConfig
from switch_attention.model.transformer import SwiAttnModel
from switch_attention.numerics.tensor import no_grad
from switch_attention.testing import mixed_gate_model, toy_config, toy_model

PROMPT_LENGTH = 4


def decode_logits(session: InferenceSession, tokens: np.ndarray) -> np.ndarray:
    logits = [session.prefill(tokens[:PROMPT_LENGTH])]
    logits.extend(session.decode_step(int(token)) for token in tokens[PROMPT_LENGTH:])
    return np.stack(logits)


def test_decoding_reproduces_the_training_forward_pass(mixed_gate_model):
    model, tokens = mixed_gate_model
    with no_grad():
        result = model.forward_train(tokens)
    session = InferenceSession(model)
    logits = decode_logits(session, tokens[0])
    assert np.allclose(logits, result.logits.data[0, PROMPT_LENGTH - 1 :], rtol=0.0, atol=1e-9)
    assert session.tokens == tokens[0].tolist()
    assert len(session.caches[0]) == tokens.shape[1]


@pytest.mark.parametrize("seed", range(20))
def test_decoding_random_sequences_matches_the_forward_pass(mixed_gate_model, seed):
    model, _ = mixed_gate_model
    tokens = np.random.default_rng(100 + seed).integers(0, model.config.vocab_size, size=32)
    with no_grad():
        result = model.forward_train(tokens[None])
    session = InferenceSession(model)
    logits = [session.prefill(tokens[:1])]
    for position, token in enumerate(tokens[1:], start=1):
        logits.append(session.decode_step(int(token)))
        assert all(len(cache) == position + 1 for cache in session.caches)
    assert np.max(np.abs(np.stack(logits) - result.logits.data[0])) < 1e-6
    decoded_gates = np.array([record.hard_gate for record in session.gate_log]).reshape(31, -1).T
    assert np.array_equal(decoded_gates, result.hard_gates[:, 0, 1:])


def test_decode_runs_only_the_selected_kernel(mixed_gate_model):
    model, tokens = mixed_gate_model
    with no_grad():
        gates = model.forward_train(tokens).hard_gates[:, 0]
    session = InferenceSession(model)
    decode_logits(session, tokens[0])
    assert len(session.decode_kernel_log) == tokens.shape[1] - PROMPT_LENGTH
    for step, kernels in enumerate(session.decode_kernel_log):
        position = PROMPT_LENGTH + step
        assert [kernel.gate for kernel in kernels] == gates[:, position].tolist()


def test_gate_log_matches_the_kernels(mixed_gate_model):
    model, tokens = mixed_gate_model
    session = InferenceSession(model)
    decode_logits(session, tokens[0])
    n_layers = model.config.n_layers
    assert len(session.gate_log) == n_layers * len(session.decode_kernel_log)
    assert len(session.prefill_gate_log) == n_layers * PROMPT_LENGTH
    for index, record in enumerate(session.gate_log):
        step, layer = divmod(index, n_layers)
        assert record.layer == layer
        assert record.token_index == PROMPT_LENGTH + step
        assert record.hard_gate == int(session.decode_kernel_log[step][layer].gate)
        assert record.logit is not None


@pytest.mark.parametrize("mode, kernel", [(AttentionMode.FULL_ONLY, Branch.FULL), (AttentionMode.SWA_ONLY, Branch.SWA)])
def test_fixed_modes_decode_with_their_kernel(mode, kernel):
    config = ModelConfig.toy(mode, window=3)
    model = SwiAttnModel.initialize(config, seed=5, init_std=0.5)
    tokens = np.random.default_rng(5).integers(0, config.vocab_size, size=10)
    with no_grad():
        expected = model.forward_train(tokens).logits.data[0, PROMPT_LENGTH - 1 :]
    session = InferenceSession(model)
    assert np.allclose(decode_logits(session, tokens), expected, rtol=0.0, atol=1e-9)
    assert all(kernels == [kernel] * config.n_layers for kernels in session.decode_kernel_log)
    assert all(expit(record.logit) == record.soft_gate == record.hard_gate for record in session.gate_log)


def test_forced_gates_pin_every_step(mixed_gate_model):
    model, tokens = mixed_gate_model
    session = InferenceSession(model, forced_gates=0.0)
    decode_logits(session, tokens[0])
    assert all(record.hard_gate == 0 for record in session.gate_log + session.prefill_gate_log)


def test_session_contract(toy_model):
    session = InferenceSession(toy_model)
    with pytest.raises(SessionNotPrefilledError):
        session.decode_step(1)
    session.prefill([1, 2, 3])
    with pytest.raises(ContractViolationError):
        session.prefill([4])
    with pytest.raises(ConfigurationError):
        InferenceSession(toy_model, temperature=-1.0)


def test_decoding_stops_at_the_maximum_length():
    model = SwiAttnModel.initialize(ModelConfig.toy(max_seq_len=6), init_std=0.5)
    session = InferenceSession(model)
    session.prefill([1, 2, 3, 4, 5])
    session.decode_step(6)
    with pytest.raises(SequenceTooLongError):
        session.decode_step(7)
    with pytest.raises(SequenceTooLongError):
        generate(model, [1, 2, 3, 4], max_new=4)


def test_greedy_generation(toy_model):
    result = generate(toy_model, [1, 2, 3], max_new=5)
    assert len(result.tokens) == 5
    assert not result.stopped
    assert result.tokens == generate(toy_model, [1, 2, 3], max_new=5).tokens
    assert len(result.gate_log) == 4 * toy_model.config.n_layers
    assert [step.position for step in result.cost_report.decode_steps] == [4, 5, 6, 7]
    assert len(result.cost_report.prefill_flops_by_position) == 3


def test_generation_stops_on_the_stop_token(toy_model):
    first = generate(toy_model, [1, 2, 3], max_new=1).tokens[0]
    result = generate(toy_model, [1, 2, 3], max_new=10, stop_token=first)
    assert result.tokens == [first]
    assert result.stopped
    assert result.gate_log == []


def test_sampling_is_reproducible(toy_model):
    first = generate(toy_model, [1, 2], max_new=6, temperature=1.5, seed=7).tokens
    assert first == generate(toy_model, [1, 2], max_new=6, temperature=1.5, seed=7).tokens
    assert all(0 <= token < toy_model.config.vocab_size for token in first)


def test_at_least_one_new_token(toy_model):
    with pytest.raises(ConfigurationError):
        generate(toy_model, [1, 2], max_new=0)


@dataclass
class RepeatedBatch:
    """
    Serves the same batch at every training step.
    """

    batch_: SyntheticBatch

    def batch(self, index: int) -> SyntheticBatch:
        return self.batch_


def test_generation_continues_a_memorized_periodic_pattern():
    config = ModelConfig.toy(AttentionMode.FULL_ONLY, window=16, d_model=16, ffn_hidden=32)
    model = SwiAttnModel.initialize(config, seed=0)
    a, b, c = SPECIAL_TOKEN_COUNT, SPECIAL_TOKEN_COUNT + 1, SPECIAL_TOKEN_COUNT + 2
    row = [BOS] + [a, b, c] * 5
    batch = SyntheticBatch(np.array([row, row]))
    train_config = TrainConfig(total_steps=200, batch_size=2, seq_len=len(row), peak_lr=2e-2, warmup_steps=10, log_every=50)
    history = Trainer(model, train_config, RepeatedBatch(batch)).train()
    assert history[-1].lm_loss < 0.1 * history[0].lm_loss

    result = generate(model, [BOS, a, b, c, a], max_new=4)
    assert result.tokens == [b, c, a, b]
