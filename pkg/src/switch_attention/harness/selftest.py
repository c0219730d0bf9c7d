"""
A compact battery of invariant checks that runs in seconds on a toy model.
"""

from __future__ import annotations

import logging
import os
import tempfile
import traceback
from dataclasses import dataclass

import numpy as np
from typing_extensions import Callable, List

from ..inference.cost_accounting import CostReport, decode_mem_access_summary, gate_trace
from ..inference.session import InferenceSession
from ..layers.attention import QKVProjection, apply_rope, full_attention, project_qkv, sliding_window_attention
from ..layers.routing import hard_gate
from ..model.checkpoint import load_checkpoint, save_checkpoint
from ..model.config import AttentionConfig, AttentionMode, ModelConfig, RegularizerConfig
from ..model.transformer import SwiAttnModel
from ..numerics.finite_differences import numerical_gradient, relative_error
from ..numerics.functional import sigmoid
from ..numerics.tensor import Tensor, backward, no_grad, parameter
from ..objective import adaptive_weight, compute_training_loss

logger = logging.getLogger(__name__)


class SelfTestFailure(AssertionError):
    pass


def check(condition: bool, detail: str) -> None:
    if not condition:
        raise SelfTestFailure(detail)


@dataclass
class SelfTestResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"check={self.name} status={status}" + (f' detail="{self.detail}"' if self.detail else "")


def _tokens(config: ModelConfig, length: int, seed: int, batch: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, config.vocab_size, size=(batch, length))


def gradient_check() -> str:
    """
    Gates are pinned to their current values: finite differences see a piecewise-constant function of the
    gates, the straight-through path is covered by `straight_through_check`. The adaptive weight is a
    constant of the objective, so the check uses the constant weight that finite differences agree with.
    """
    config = ModelConfig.toy(regularizer=RegularizerConfig(gamma_base=1e-2, adaptive=False))
    model = SwiAttnModel.initialize(config, seed=1, init_std=0.5)
    tokens = _tokens(config, 5, seed=2)
    with no_grad():
        baseline_gates = model.forward_train(tokens).hard_gates
    pinned = list(baseline_gates)
    backward(compute_training_loss(model.forward_train(tokens, pinned), config.regularizer).total)

    def loss() -> float:
        with no_grad():
            return compute_training_loss(model.forward_train(tokens, pinned), config.regularizer).total.item()

    worst = 0.0
    for name in ("layers.0.attention.query", "layers.1.router.weight", "layers.0.ffn.down"):
        tensor = model.named_parameters()[name]
        error = relative_error(tensor.grad, numerical_gradient(loss, tensor.data))
        check(error < 1e-4, f"{name} relative error {error:.2e}")
        worst = max(worst, error)
    with no_grad():
        check(np.array_equal(model.forward_train(tokens).hard_gates, baseline_gates), "gates flipped")
    return f"worst relative error {worst:.2e}"


def branch_equivalence_check() -> str:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        length = int(rng.integers(1, 7))
        config = AttentionConfig(d_model=8, n_heads=2, n_kv_heads=1, head_dim=4, window=length)
        projection = QKVProjection.initialize(config, rng, std=0.5)
        hidden = Tensor(rng.normal(size=(1, length, 8)))
        positions = np.arange(length)
        q, k, v = project_qkv(hidden, projection)
        q, k = apply_rope(q, positions), apply_rope(k, positions)
        full = full_attention(q, k, v, positions, projection)
        swa = sliding_window_attention(q, k, v, positions, length + int(rng.integers(0, 3)), projection)
        worst = max(worst, float(np.max(np.abs(full.data - swa.data))))
    check(worst < 1e-12, f"max abs diff {worst:.2e}")
    return f"max abs diff {worst:.2e}"


def mode_lattice_check() -> str:
    config = ModelConfig.toy()
    model = SwiAttnModel.initialize(config, seed=4)
    tokens = _tokens(config, 8, seed=5)
    with no_grad():
        full = model.with_attention_mode(AttentionMode.FULL_ONLY).forward_train(tokens).logits.data
        swa = model.with_attention_mode(AttentionMode.SWA_ONLY).forward_train(tokens).logits.data
        forced_full = model.forward_train(tokens, forced_gates=1.0).logits.data
        forced_swa = model.forward_train(tokens, forced_gates=0.0).logits.data
    differences = [np.max(np.abs(full - forced_full)), np.max(np.abs(swa - forced_swa))]
    check(max(differences) < 1e-10, f"max abs diff {max(differences):.2e}")
    return f"max abs diff {max(differences):.2e}"


def straight_through_check() -> str:
    for soft in (0.3, 0.5, 0.7):
        logit = parameter(np.array([np.log(soft / (1.0 - soft))]))
        gate = hard_gate(sigmoid(logit), 0.5)
        check(gate.data[0] == float(soft > 0.5), f"forward gate {gate.data[0]} at {soft}")
        backward(gate.sum())
        check(abs(logit.grad[0] - soft * (1.0 - soft)) < 1e-12, f"gradient {logit.grad[0]} at {soft}")
    return "gates exact, gradients match sigmoid derivative"


def weight_bound_check() -> str:
    config = RegularizerConfig()
    rng = np.random.default_rng(6)
    nll, mse = rng.exponential(1.0, 10_000), rng.exponential(0.01, 10_000)
    check(bool(np.all(adaptive_weight(nll, mse, config) <= config.upper_bound)), "bound exceeded")
    check(adaptive_weight(0.0, 0.0, config) == config.gamma_base / config.epsilon, "bound not attained at 0")
    return f"bound {config.upper_bound}"


def prefill_decode_check() -> str:
    config = ModelConfig.toy()
    model = SwiAttnModel.initialize(config, seed=7, init_std=0.5)
    worst = 0.0
    for sequence in range(20):
        tokens = _tokens(config, 32, seed=8 + sequence)[0]
        with no_grad():
            result = model.forward_train(tokens[None])
        session = InferenceSession(model)
        logits = [session.prefill(tokens[:1])]
        for position, token in enumerate(tokens[1:], start=1):
            logits.append(session.decode_step(int(token)))
            check(all(len(cache) == position + 1 for cache in session.caches), f"cache length at {position}")
        worst = max(worst, float(np.max(np.abs(np.array(logits) - result.logits.data[0]))))
        decoded = np.array([record.hard_gate for record in session.gate_log]).reshape(len(tokens) - 1, -1).T
        check(np.array_equal(decoded, result.hard_gates[:, 0, 1:]), f"gate decisions of sequence {sequence}")
    check(worst < 1e-6, f"max abs diff {worst:.2e}")
    return f"20 sequences, max abs diff {worst:.2e}"


def cost_accounting_check() -> str:
    config = ModelConfig.toy(window=16)
    summary = {}
    for pattern in ("all_full", "all_swa"):
        report = CostReport.from_gate_trace(config, gate_trace(config, pattern, 32))
        summary[pattern] = decode_mem_access_summary(report, [32])[32]
    check(summary == {"all_full": 32.0, "all_swa": 16.0}, f"memory access {summary}")
    return f"memory access at 32: {summary}"


def persistence_check() -> str:
    config = ModelConfig.toy()
    model = SwiAttnModel.initialize(config, seed=9)
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "model.ckpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
    for name, tensor in model.named_parameters().items():
        check(np.array_equal(tensor.data, loaded.named_parameters()[name].data), f"{name} differs")
    return f"{len(model.named_parameters())} tensors bit-exact"


CHECKS: List[Callable[[], str]] = [
    gradient_check,
    branch_equivalence_check,
    mode_lattice_check,
    straight_through_check,
    weight_bound_check,
    prefill_decode_check,
    cost_accounting_check,
    persistence_check,
]


def run_selftest() -> List[SelfTestResult]:
    results = []
    for function in CHECKS:
        name = function.__name__.removesuffix("_check")
        try:
            results.append(SelfTestResult(name, True, function()))
        except Exception as e:
            logger.debug(traceback.format_exc())
            results.append(SelfTestResult(name, False, f"{e.__class__.__name__}: {e}"))
    return results
