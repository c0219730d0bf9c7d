from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from typing_extensions import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from ..exceptions import (
    ContractViolationError,
    IncompatibleDonorError,
    SequenceTooLongError,
)
from ..layers.attention import (
    QKVProjection,
    apply_rope,
    full_attention,
    project_qkv,
    sliding_window_attention,
)
from ..layers.feed_forward import FeedForward
from ..layers.routing import GateRecord, Router, fixed_gate_logit, hard_gate, mix_outputs
from ..numerics.functional import rms_norm, sigmoid, take_rows
from ..numerics.tensor import Tensor, parameter
from .config import AttentionMode, Branch, ModelConfig

logger = logging.getLogger(__name__)

INIT_STD = 0.02

ForcedGates = Union[float, Sequence[Optional[Union[float, np.ndarray]]]]
"""
Either one gate for every layer and token, or one entry per layer that is a scalar, an array broadcastable to
(batch, T), or None to let the layer decide on its own.
"""


@dataclass
class LayerTrace:
    """
    Everything one layer of a training forward pass exposes to the objective and to the routing telemetry.
    """

    router_logits: Optional[Tensor]
    """
    Differentiable router logits of shape (batch, T), None for layers without a router.
    """

    soft_gates: np.ndarray
    hard_gates: np.ndarray
    full_output: Optional[Tensor]
    """
    Output of the full branch after the output projection, None if the branch was skipped.
    """

    swa_output: Optional[Tensor]
    keys: np.ndarray
    """
    Rotated keys of shape (batch, T, n_kv_heads, head_dim).
    """

    values: np.ndarray

    @property
    def full_ratio(self) -> float:
        return float(self.hard_gates.mean())


@dataclass
class ForwardResult:
    logits: Tensor
    """
    Shape (batch, T, vocab_size). Position t predicts token t + 1.
    """

    layers: List[LayerTrace]
    tokens: np.ndarray

    def gate_records(self, batch_index: int = 0) -> List[GateRecord]:
        records = []
        for layer_index, trace in enumerate(self.layers):
            logits = None if trace.router_logits is None else trace.router_logits.data[batch_index]
            for token_index in range(self.tokens.shape[1]):
                gate = trace.hard_gates[batch_index, token_index]
                records.append(
                    GateRecord(
                        layer=layer_index,
                        token_index=token_index,
                        logit=fixed_gate_logit(gate) if logits is None else float(logits[token_index]),
                        soft_gate=float(trace.soft_gates[batch_index, token_index]),
                        hard_gate=int(gate),
                    )
                )
        return records

    @property
    def hard_gates(self) -> np.ndarray:
        """
        Shape (n_layers, batch, T).
        """
        return np.stack([trace.hard_gates for trace in self.layers])


@dataclass
class LayerGates:
    """
    The gate decision of one layer for a block of tokens.
    """

    gate: Tensor
    """
    Hard gate as used in the forward pass, shape (batch, T).
    """

    soft: np.ndarray
    router_logits: Optional[Tensor] = None

    @property
    def hard(self) -> np.ndarray:
        return self.gate.data

    @property
    def constant_branch(self) -> Optional[Branch]:
        """
        The branch every token uses in a layer without a router, None if both branches are needed.
        Layers with a router always compute both branches, the objective compares them.
        """
        if self.router_logits is not None:
            return None
        if np.all(self.gate.data == 1.0):
            return Branch.FULL
        if np.all(self.gate.data == 0.0):
            return Branch.SWA
        return None


@dataclass
class TransformerLayer:
    """
    Pre-norm residual block: routed dual-branch attention followed by the feed-forward network.
    """

    attention_norm: Tensor
    projection: QKVProjection
    ffn_norm: Tensor
    feed_forward: FeedForward
    router: Optional[Router] = None

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "attention_norm", self.attention_norm
        for name, tensor in self.projection.parameters().items():
            yield f"attention.{name}", tensor
        if self.router is not None:
            for name, tensor in self.router.parameters().items():
                yield f"router.{name}", tensor
        yield "ffn_norm", self.ffn_norm
        for name, tensor in self.feed_forward.parameters().items():
            yield f"ffn.{name}", tensor

    def attention_inputs(
        self, hidden: Tensor, positions: np.ndarray
    ) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """
        :return: The normalized hidden state and the rotated queries, rotated keys and values.
        """
        base = self.projection.config.rope_base
        normalized = rms_norm(hidden, self.attention_norm)
        queries, keys, values = project_qkv(normalized, self.projection)
        return normalized, apply_rope(queries, positions, base), apply_rope(keys, positions, base), values

    def route(
        self,
        normalized: Tensor,
        threshold: float,
        fixed_gate: Optional[float],
        forced_gate: Optional[Union[float, np.ndarray]] = None,
    ) -> LayerGates:
        """
        Decides the branch of every token.

        :param normalized: Normalized hidden state of shape (batch, T, d_model).
        :param threshold: Threshold of the hard gate.
        :param fixed_gate: The constant gate of layers without a router.
        :param forced_gate: Overrides the decision without touching the router.
        """
        shape = normalized.shape[:-1]
        router_logits = None
        soft = None
        gate = None
        if self.router is not None:
            router_logits = self.router.logits(normalized)
            soft_tensor = sigmoid(router_logits)
            soft = soft_tensor.data
            gate = hard_gate(soft_tensor, threshold)
        if forced_gate is not None or fixed_gate is not None:
            value = forced_gate if forced_gate is not None else fixed_gate
            constant = np.broadcast_to(np.asarray(value, dtype=np.float64), shape).copy()
            if not np.all((constant == 0.0) | (constant == 1.0)):
                raise ContractViolationError("route", "forced gates must be 0 or 1")
            gate = Tensor(constant)
            if soft is None:
                soft = constant
        return LayerGates(gate=gate, soft=soft, router_logits=router_logits)

    def attend(
        self,
        gates: LayerGates,
        queries: Tensor,
        keys: Tensor,
        values: Tensor,
        positions: np.ndarray,
        key_positions: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
        """
        Computes the branches the gates need and mixes them.

        :return: The mixed output, the full branch output and the sliding-window branch output.
        """
        window = self.projection.config.window
        branch = gates.constant_branch
        full = swa = None
        if branch is not Branch.SWA:
            full = full_attention(queries, keys, values, positions, self.projection, key_positions)
        if branch is not Branch.FULL:
            swa = sliding_window_attention(
                queries, keys, values, positions, window, self.projection, key_positions
            )
        if branch is Branch.FULL:
            return full, full, None
        if branch is Branch.SWA:
            return swa, None, swa
        return mix_outputs(gates.gate, full, swa), full, swa

    def feed_forward_block(self, hidden: Tensor) -> Tensor:
        return hidden + self.feed_forward(rms_norm(hidden, self.ffn_norm))


@dataclass
class SwiAttnModel:
    """
    Decoder-only transformer whose layers route every token either to full causal attention
    or to sliding-window attention. Input and output embeddings are tied.
    """

    config: ModelConfig
    embedding: Tensor
    """
    Shape (vocab_size, d_model).
    """

    layers: List[TransformerLayer]
    final_norm: Tensor

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, init_std: float = INIT_STD) -> SwiAttnModel:
        rng = np.random.default_rng(seed)
        d = config.d_model
        embedding = parameter(rng.normal(0.0, init_std, (config.vocab_size, d)))
        layers = []
        for _ in range(config.n_layers):
            layers.append(
                TransformerLayer(
                    attention_norm=parameter(np.ones(d)),
                    projection=QKVProjection.initialize(config.attention, rng, init_std),
                    ffn_norm=parameter(np.ones(d)),
                    feed_forward=FeedForward.initialize(d, config.ffn_hidden, rng, init_std),
                    router=(
                        Router.initialize(d, config.router.init_bias) if config.has_router else None
                    ),
                )
            )
        return cls(config, embedding, layers, parameter(np.ones(d)))

    def named_parameters(self) -> Dict[str, Tensor]:
        result = {"embedding.weight": self.embedding}
        for index, layer in enumerate(self.layers):
            for name, tensor in layer.parameters():
                result[f"layers.{index}.{name}"] = tensor
        result["final_norm"] = self.final_norm
        return result

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()

    def with_attention_mode(
        self,
        attention_mode: AttentionMode,
        static_hybrid_pattern: Optional[List[Branch]] = None,
    ) -> SwiAttnModel:
        """
        A model that shares every attention, feed-forward and embedding tensor with this one but
        chooses branches according to another mode. Routers are kept if present and created if needed.
        """
        config = self.config.with_attention_mode(attention_mode, static_hybrid_pattern)
        layers = []
        for layer in self.layers:
            router = layer.router
            if config.has_router and router is None:
                router = Router.initialize(config.d_model, config.router.init_bias)
            layers.append(
                TransformerLayer(
                    attention_norm=layer.attention_norm,
                    projection=layer.projection,
                    ffn_norm=layer.ffn_norm,
                    feed_forward=layer.feed_forward,
                    router=router if config.has_router else None,
                )
            )
        return SwiAttnModel(config, self.embedding, layers, self.final_norm)

    def layer_forced_gates(
        self, forced_gates: Optional[ForcedGates]
    ) -> List[Optional[Union[float, np.ndarray]]]:
        if forced_gates is None:
            return [None] * self.config.n_layers
        if np.isscalar(forced_gates):
            return [forced_gates] * self.config.n_layers
        if len(forced_gates) != self.config.n_layers:
            raise ContractViolationError(
                "forward_train", f"expected {self.config.n_layers} forced gate entries, got {len(forced_gates)}"
            )
        return list(forced_gates)

    def check_length(self, length: int) -> None:
        if length > self.config.max_seq_len:
            raise SequenceTooLongError(length, self.config.max_seq_len)
        if length < 1:
            raise ContractViolationError("forward_train", "need at least one token")

    def embed(self, tokens: np.ndarray) -> Tensor:
        return take_rows(self.embedding, tokens)

    def head(self, hidden: Tensor) -> Tensor:
        return rms_norm(hidden, self.final_norm) @ self.embedding.T

    def forward_train(
        self, tokens: np.ndarray, forced_gates: Optional[ForcedGates] = None
    ) -> ForwardResult:
        """
        Runs the whole stack on a batch, computing both branches wherever the gate is not a fixed constant.

        :param tokens: Token ids of shape (batch, T) or (T,).
        :param forced_gates: Pins gates without touching the routers, see `ForcedGates`.
        :return: Logits and the per-layer routing trace.
        """
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        self.check_length(tokens.shape[1])
        positions = np.arange(tokens.shape[1])
        fixed = self.config.fixed_gates() or [None] * self.config.n_layers
        forced = self.layer_forced_gates(forced_gates)

        hidden = self.embed(tokens)
        traces = []
        for layer, fixed_gate, forced_gate in zip(self.layers, fixed, forced):
            normalized, queries, keys, values = layer.attention_inputs(hidden, positions)
            gates = layer.route(normalized, self.config.router.threshold, fixed_gate, forced_gate)
            attention_output, full, swa = layer.attend(gates, queries, keys, values, positions)
            hidden = layer.feed_forward_block(hidden + attention_output)
            traces.append(
                LayerTrace(
                    router_logits=gates.router_logits,
                    soft_gates=gates.soft,
                    hard_gates=gates.hard,
                    full_output=full,
                    swa_output=swa,
                    keys=keys.data,
                    values=values.data,
                )
            )
        return ForwardResult(self.head(hidden), traces, tokens)


def init_from_full(donor: SwiAttnModel, config: ModelConfig) -> SwiAttnModel:
    """
    Builds a model for continual pretraining from a trained full attention model.
    Every embedding, attention, normalization and feed-forward tensor is copied from the donor;
    routers (if the target mode has any) start with zero weights and the configured bias.

    :param donor: A model trained in full_only mode.
    :param config: The configuration of the new model.
    :return: A model that owns copies of the donor's tensors.
    """
    if donor.config.attention_mode is not AttentionMode.FULL_ONLY:
        logger.error(f"Refusing donor in mode {donor.config.attention_mode.value}")
        raise IncompatibleDonorError(
            f"donor must be a full_only model, got {donor.config.attention_mode.value}"
        )
    donor_shapes, target_shapes = donor.config.shape_signature(), config.shape_signature()
    for key, value in target_shapes.items():
        if donor_shapes[key] != value:
            logger.error(f"Donor {key}={donor_shapes[key]} does not match {value}")
            raise IncompatibleDonorError(f"donor has {key}={donor_shapes[key]}, expected {value}", key)

    model = SwiAttnModel.initialize(config)
    donor_parameters = donor.named_parameters()
    for name, tensor in model.named_parameters().items():
        if name not in donor_parameters:
            continue
        source = donor_parameters[name]
        if source.shape != tensor.shape:
            raise IncompatibleDonorError(f"shape {source.shape} vs {tensor.shape}", name)
        tensor.data = source.data.copy()
    logger.info(
        f"Initialized {config.attention_mode.value} model from donor "
        f"({len(donor_parameters)} tensors copied)"
    )
    return model
