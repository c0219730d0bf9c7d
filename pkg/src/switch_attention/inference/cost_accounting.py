"""
Analytic cost model of routed attention.

FLOPs count one multiply-add as 2 FLOPs and cover the query/key/value and output projections,
the router, attention scores and weighted values, the feed-forward network and the LM head.
Normalization, rotary encoding, softmax and other elementwise work are not counted.
Prefill is accounted with the gate-selected branch only, even though the prefill implementation
evaluates both branches.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from typing_extensions import Dict, Iterable, List, Sequence

from ..exceptions import ConfigurationError, ContractViolationError, EmptyCostReportError
from ..model.config import ModelConfig, default_static_hybrid_pattern


def attention_span(position: int, gate: float, window: int) -> int:
    """
    Number of cached key/value rows read at 1-based `position`: all of them under full attention,
    the most recent min(position, window) under sliding-window attention.
    """
    return position if gate >= 0.5 else min(position, window)


def position_independent_flops(config: ModelConfig) -> int:
    """
    FLOPs of one token that do not depend on the gates: projections, router, FFN per layer plus the LM head.
    """
    d, a = config.d_model, config.attention
    projections = 2 * d * (a.n_heads + 2 * a.n_kv_heads) * a.head_dim + 2 * a.n_heads * a.head_dim * d
    router = 2 * d if config.has_router else 0
    feed_forward = 3 * 2 * d * config.ffn_hidden
    return config.n_layers * (projections + router + feed_forward) + 2 * d * config.vocab_size


def attention_flops(config: ModelConfig, span: int) -> int:
    """
    Scores plus weighted values of all query heads over `span` keys.
    """
    a = config.attention
    return 4 * a.n_heads * a.head_dim * span


def count_prefill_flops(config: ModelConfig, length: int, gates: np.ndarray) -> np.ndarray:
    """
    :param config: The model configuration.
    :param length: Prompt length T.
    :param gates: Hard gates of shape (n_layers, T).
    :return: FLOPs of every prompt position, shape (T,).
    """
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (config.n_layers, length):
        raise ContractViolationError(
            "count_prefill_flops", f"expected gates of shape {(config.n_layers, length)}, got {gates.shape}"
        )
    positions = np.arange(1, length + 1)
    spans = np.where(gates >= 0.5, positions[None, :], np.minimum(positions, config.attention.window)[None, :])
    attention = attention_flops(config, spans.sum(axis=0))
    return (position_independent_flops(config) + attention).astype(np.float64)


def total_prefill_flops(config: ModelConfig, length: int, gates: np.ndarray) -> float:
    return float(count_prefill_flops(config, length, gates).sum())


@dataclass
class DecodeAccess:
    """
    Key/value rows read by every layer at one decode step.
    """

    position: int
    """
    1-based position of the decoded token, equal to the cache length after its keys were appended.
    """

    tokens_read: List[int]


@dataclass
class CostReport:
    window: int
    prefill_flops_by_position: List[float] = field(default_factory=list)
    decode_steps: List[DecodeAccess] = field(default_factory=list)

    @classmethod
    def from_gate_trace(
        cls, config: ModelConfig, gates: np.ndarray, start_position: int = 1
    ) -> CostReport:
        """
        Accounts a synthetic gate trace as if every column were decoded, and as if the whole trace were a prompt.

        :param gates: Hard gates of shape (n_layers, steps); column i belongs to position start_position + i.
        """
        gates = np.asarray(gates, dtype=np.float64)
        report = cls(config.attention.window)
        if start_position == 1:
            report.prefill_flops_by_position = count_prefill_flops(config, gates.shape[1], gates).tolist()
        for offset in range(gates.shape[1]):
            report.record_decode(start_position + offset, gates[:, offset])
        return report

    def record_decode(self, position: int, gates: Iterable[float]) -> DecodeAccess:
        access = DecodeAccess(position, [attention_span(position, g, self.window) for g in gates])
        self.decode_steps.append(access)
        return access

    def mean_access_by_position(self) -> Dict[int, float]:
        """
        Mean over layers, and over every recorded step at the same position, of the rows read.
        """
        reads = defaultdict(list)
        for step in self.decode_steps:
            reads[step.position].extend(step.tokens_read)
        return {position: float(np.mean(values)) for position, values in reads.items()}

    @property
    def average_decode_access(self) -> float:
        if not self.decode_steps:
            raise EmptyCostReportError()
        return float(np.mean([np.mean(step.tokens_read) for step in self.decode_steps]))

    @property
    def total_prefill_flops(self) -> float:
        return float(np.sum(self.prefill_flops_by_position))

    def rows(self) -> List[tuple]:
        """
        (position, flops, mem_tokens) per position, empty cells where a stage did not cover the position.
        """
        access = self.mean_access_by_position()
        positions = sorted(set(range(1, len(self.prefill_flops_by_position) + 1)) | set(access))
        result = []
        for position in positions:
            flops = (
                self.prefill_flops_by_position[position - 1]
                if position <= len(self.prefill_flops_by_position)
                else None
            )
            result.append((position, flops, access.get(position)))
        return result


def decode_mem_access_summary(report: CostReport, positions: Sequence[int]) -> Dict[int, float]:
    """
    Mean over layers of the key/value rows read at each requested decode position.
    """
    if not report.decode_steps:
        raise EmptyCostReportError()
    access = report.mean_access_by_position()
    missing = [p for p in positions if p not in access]
    if missing:
        raise EmptyCostReportError(missing)
    return {p: access[p] for p in positions}


def gate_trace(config: ModelConfig, pattern: str, steps: int, seed: int = 0) -> np.ndarray:
    """
    Builds a named synthetic gate trace of shape (n_layers, steps).

    :param pattern: all_full, all_swa, alternating (layers 0, 2, ... full), static_hybrid
        or random:<p> with full probability p.
    """
    shape = (config.n_layers, steps)
    if pattern == "all_full":
        return np.ones(shape)
    if pattern == "all_swa":
        return np.zeros(shape)
    if pattern == "alternating":
        return np.repeat((np.arange(config.n_layers) % 2 == 0).astype(np.float64)[:, None], steps, axis=1)
    if pattern == "static_hybrid":
        layer_gates = np.array([b.gate for b in default_static_hybrid_pattern(config.n_layers)])
        return np.repeat(layer_gates[:, None], steps, axis=1)
    if pattern.startswith("random:"):
        probability = float(pattern.split(":", 1)[1])
        return (np.random.default_rng(seed).random(shape) < probability).astype(np.float64)
    raise ConfigurationError("gates", f"unknown pattern '{pattern}'")
