from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax
from typing_extensions import List, Optional, Sequence

from ..exceptions import (
    ConfigurationError,
    ContractViolationError,
    SequenceTooLongError,
    SessionNotPrefilledError,
)
from ..layers.attention import full_attention, sliding_window_attention
from ..layers.routing import GateRecord, fixed_gate_logit
from ..model.config import Branch
from ..model.transformer import ForcedGates, SwiAttnModel
from ..numerics.tensor import Tensor, no_grad
from .cost_accounting import CostReport, count_prefill_flops
from .kv_cache import LayerKVCache

logger = logging.getLogger(__name__)


@dataclass
class GenerationResult:
    tokens: List[int]
    """
    The generated tokens, the prompt excluded.
    """

    gate_log: List[GateRecord]
    """
    Gate decisions of the decode steps.
    """

    cost_report: CostReport
    stopped: bool
    """
    True if generation ended on the stop token.
    """


@dataclass
class InferenceSession:
    """
    One generation stream over an immutable model: prefill a prompt, then decode token by token.
    Every layer owns exactly one key/value cache that both branches read.
    """

    model: SwiAttnModel
    forced_gates: Optional[ForcedGates] = None
    """
    Pins the gates of every step without touching the routers.
    """

    temperature: float = 0.0
    """
    0 selects the argmax, larger values sample from softmax(logits / temperature).
    """

    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)
    caches: List[LayerKVCache] = field(init=False)
    tokens: List[int] = field(init=False, default_factory=list)
    prefill_gate_log: List[GateRecord] = field(init=False, default_factory=list)
    gate_log: List[GateRecord] = field(init=False, default_factory=list)
    cost_report: CostReport = field(init=False)
    decode_kernel_log: List[List[Branch]] = field(init=False, default_factory=list)
    """
    The attention kernels that ran at every decode step, one entry per layer.
    """

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigurationError("temperature", f"must be >= 0, got {self.temperature}")
        attention = self.model.config.attention
        self.caches = [
            LayerKVCache(attention.n_kv_heads, attention.head_dim) for _ in range(self.model.config.n_layers)
        ]
        self.cost_report = CostReport(attention.window)
        self.rng = np.random.default_rng(self.seed)

    @property
    def length(self) -> int:
        return len(self.caches[0])

    def prefill(self, prompt: Sequence[int]) -> np.ndarray:
        """
        Runs the training forward pass on the prompt and fills every layer cache with its keys and values.

        :return: Logits of the last prompt position.
        """
        if self.length > 0:
            raise ContractViolationError("prefill", "the session already holds tokens")
        prompt = np.asarray(prompt, dtype=np.int64)
        with no_grad():
            result = self.model.forward_train(prompt[None, :], self.forced_gates)
        for cache, trace in zip(self.caches, result.layers):
            cache.append(trace.keys[0], trace.values[0])
        self.tokens.extend(int(t) for t in prompt)
        self.prefill_gate_log.extend(result.gate_records())
        self.cost_report.prefill_flops_by_position = count_prefill_flops(
            self.model.config, len(prompt), result.hard_gates[:, 0, :]
        ).tolist()
        logger.debug(f"Prefilled {len(prompt)} tokens")
        return result.logits.data[0, -1]

    def decode_step(self, token: int) -> np.ndarray:
        """
        Appends one token: every layer adds its key and value to the cache, decides its gate and runs
        only the selected branch.

        :return: Logits predicting the next token.
        """
        if self.length == 0:
            raise SessionNotPrefilledError()
        config = self.model.config
        position = self.length
        if position + 1 > config.max_seq_len:
            raise SequenceTooLongError(position + 1, config.max_seq_len)
        positions = np.array([position])
        fixed = config.fixed_gates() or [None] * config.n_layers
        forced = self.model.layer_forced_gates(self.forced_gates)

        kernels, gates = [], []
        with no_grad():
            hidden = self.model.embed(np.array([[token]]))
            for index, (layer, cache) in enumerate(zip(self.model.layers, self.caches)):
                normalized, queries, keys, values = layer.attention_inputs(hidden, positions)
                cache.append(keys.data[0], values.data[0])
                layer_gates = layer.route(normalized, config.router.threshold, fixed[index], forced[index])
                gate = int(layer_gates.hard[0, 0])
                if gate == 1:
                    cached_keys, cached_values, key_positions = cache.full_view()
                    output = full_attention(
                        queries,
                        Tensor(cached_keys[None]),
                        Tensor(cached_values[None]),
                        positions,
                        layer.projection,
                        key_positions,
                    )
                    kernels.append(Branch.FULL)
                else:
                    cached_keys, cached_values, key_positions = cache.window_view(config.attention.window)
                    output = sliding_window_attention(
                        queries,
                        Tensor(cached_keys[None]),
                        Tensor(cached_values[None]),
                        positions,
                        config.attention.window,
                        layer.projection,
                        key_positions,
                    )
                    kernels.append(Branch.SWA)
                hidden = layer.feed_forward_block(hidden + output)
                gates.append(gate)
                logit = layer_gates.router_logits
                self.gate_log.append(
                    GateRecord(
                        layer=index,
                        token_index=position,
                        logit=fixed_gate_logit(gate) if logit is None else float(logit.data[0, 0]),
                        soft_gate=float(layer_gates.soft[0, 0]),
                        hard_gate=gate,
                    )
                )
            logits = self.model.head(hidden).data[0, 0]
        self.tokens.append(int(token))
        self.decode_kernel_log.append(kernels)
        self.cost_report.record_decode(position + 1, gates)
        return logits

    def next_token(self, logits: np.ndarray) -> int:
        if self.temperature == 0.0:
            return int(np.argmax(logits))
        probabilities = softmax(logits / self.temperature)
        return int(self.rng.choice(len(probabilities), p=probabilities))

    def generate(
        self, prompt: Sequence[int], max_new: int, stop_token: Optional[int] = None
    ) -> GenerationResult:
        """
        Prefills the prompt and decodes until `stop_token` is produced or `max_new` tokens exist.
        """
        if max_new < 1:
            raise ConfigurationError("max_new", f"must be >= 1, got {max_new}")
        if len(prompt) + max_new - 1 > self.model.config.max_seq_len:
            raise SequenceTooLongError(len(prompt) + max_new - 1, self.model.config.max_seq_len)
        first_decode = len(self.gate_log)
        logits = self.prefill(prompt)
        generated: List[int] = []
        stopped = False
        while True:
            token = self.next_token(logits)
            generated.append(token)
            if stop_token is not None and token == stop_token:
                stopped = True
                break
            if len(generated) == max_new:
                break
            logits = self.decode_step(token)
        return GenerationResult(generated, self.gate_log[first_decode:], self.cost_report, stopped)


def generate(
    model: SwiAttnModel,
    prompt: Sequence[int],
    max_new: int,
    stop_token: Optional[int] = None,
    temperature: float = 0.0,
    seed: int = 0,
) -> GenerationResult:
    return InferenceSession(model, temperature=temperature, seed=seed).generate(prompt, max_new, stop_token)
