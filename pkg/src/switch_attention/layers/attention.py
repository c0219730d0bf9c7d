"""
The two attention branches of a routed layer. Both read the same queries, keys and values,
they only differ in the mask that limits which keys a query may see.

Tensors use the layout (..., sequence, heads, head_dim).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from typing_extensions import Dict, Optional, Tuple

from ..exceptions import ConfigurationError, ContractViolationError, DimensionMismatchError
from ..model.config import AttentionConfig
from ..numerics.functional import softmax_rows
from ..numerics.tensor import Tensor, parameter, record, repeat_interleave

logger = logging.getLogger(__name__)


@dataclass
class QKVProjection:
    """
    The shared linear map from normalized hidden states to queries, keys and values,
    plus the output projection back to the model width.
    """

    query: Tensor
    """
    Shape (d_model, n_heads * head_dim).
    """

    key: Tensor
    """
    Shape (d_model, n_kv_heads * head_dim).
    """

    value: Tensor
    """
    Shape (d_model, n_kv_heads * head_dim).
    """

    output: Tensor
    """
    Shape (n_heads * head_dim, d_model).
    """

    config: AttentionConfig

    def __post_init__(self):
        c = self.config
        expected = {
            "query": (c.d_model, c.n_heads * c.head_dim),
            "key": (c.d_model, c.n_kv_heads * c.head_dim),
            "value": (c.d_model, c.n_kv_heads * c.head_dim),
            "output": (c.n_heads * c.head_dim, c.d_model),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(
                    f"projection.{name}", f"expected shape {shape}, got {getattr(self, name).shape}"
                )

    @classmethod
    def initialize(
        cls, config: AttentionConfig, rng: np.random.Generator, std: float = 0.02
    ) -> QKVProjection:
        q_width = config.n_heads * config.head_dim
        kv_width = config.n_kv_heads * config.head_dim
        return cls(
            query=parameter(rng.normal(0.0, std, (config.d_model, q_width))),
            key=parameter(rng.normal(0.0, std, (config.d_model, kv_width))),
            value=parameter(rng.normal(0.0, std, (config.d_model, kv_width))),
            output=parameter(rng.normal(0.0, std, (q_width, config.d_model))),
            config=config,
        )

    def parameters(self) -> Dict[str, Tensor]:
        return {"query": self.query, "key": self.key, "value": self.value, "output": self.output}


def project_qkv(hidden: Tensor, projection: QKVProjection) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Computes the queries, keys and values that both branches consume.

    :param hidden: Normalized hidden states of shape (..., T, d_model).
    :param projection: The layer's projection.
    :return: Q of shape (..., T, n_heads, head_dim), K and V of shape (..., T, n_kv_heads, head_dim).
    """
    c = projection.config
    if hidden.shape[-1] != c.d_model:
        raise ConfigurationError("d_model", f"hidden width {hidden.shape[-1]} differs from {c.d_model}")
    if hidden.ndim < 2 or hidden.shape[-2] < 1:
        raise ContractViolationError("project_qkv", "need at least one token")
    leading = hidden.shape[:-1]
    queries = (hidden @ projection.query).reshape(leading + (c.n_heads, c.head_dim))
    keys = (hidden @ projection.key).reshape(leading + (c.n_kv_heads, c.head_dim))
    values = (hidden @ projection.value).reshape(leading + (c.n_kv_heads, c.head_dim))
    return queries, keys, values


def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """
    :return: pos * base^(-2i/head_dim) of shape (len(positions), head_dim // 2).
    """
    frequencies = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * frequencies[None, :]


def apply_rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """
    Rotates every (even, odd) pair of features of every head by the angle of its absolute position.

    :param x: Tensor of shape (..., T, heads, head_dim).
    :param positions: Absolute positions of the T tokens.
    :param base: Base of the rotation frequencies.
    """
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ConfigurationError("head_dim", f"rotary encoding needs an even head_dim, got {head_dim}")
    positions = np.asarray(positions)
    if x.ndim < 3 or x.shape[-3] != len(positions):
        raise DimensionMismatchError("apply_rope", (len(positions),), x.shape[:-2])
    angles = rope_angles(positions, head_dim, base)[:, None, :]
    cos, sin = np.cos(angles), np.sin(angles)

    def rotate(data: np.ndarray, sin: np.ndarray) -> np.ndarray:
        even, odd = data[..., 0::2], data[..., 1::2]
        rotated = np.empty_like(data)
        rotated[..., 0::2] = even * cos - odd * sin
        rotated[..., 1::2] = even * sin + odd * cos
        return rotated

    return record("apply_rope", (x,), rotate(x.data, sin), lambda g: (rotate(g, -sin),))


def causal_window_mask(
    query_positions: np.ndarray, key_positions: np.ndarray, window: Optional[int] = None
) -> np.ndarray:
    """
    :return: Boolean (Tq, Tk) array. Query q may read key k iff k <= q and, with a window, q - k < window.
    """
    distance = np.asarray(query_positions)[:, None] - np.asarray(key_positions)[None, :]
    allowed = distance >= 0
    if window is not None:
        allowed &= distance < window
    return allowed


def _swap_sequence_and_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(*axes)


def masked_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    mask: np.ndarray,
    projection: QKVProjection,
) -> Tensor:
    """
    softmax(QKᵀ/√head_dim, mask)·V per head, key/value heads repeated across their query group,
    followed by the output projection.

    :return: Tensor of shape (..., Tq, d_model).
    """
    if queries.shape[-3] == 0 or keys.shape[-3] == 0:
        raise ContractViolationError("attention", "empty sequence")
    c = projection.config
    keys = repeat_interleave(keys, c.group_size, axis=-2)
    values = repeat_interleave(values, c.group_size, axis=-2)
    q = _swap_sequence_and_heads(queries)
    k = _swap_sequence_and_heads(keys)
    v = _swap_sequence_and_heads(values)
    k_axes = list(range(k.ndim))
    k_axes[-2], k_axes[-1] = k_axes[-1], k_axes[-2]
    scores = (q @ k.transpose(*k_axes)) * (1.0 / np.sqrt(c.head_dim))
    weights = softmax_rows(scores, mask)
    heads = _swap_sequence_and_heads(weights @ v)
    merged = heads.reshape(heads.shape[:-2] + (c.n_heads * c.head_dim,))
    return merged @ projection.output


def full_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    positions: np.ndarray,
    projection: QKVProjection,
    key_positions: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Causal attention over every earlier key.

    :param positions: Absolute positions of the queries.
    :param key_positions: Absolute positions of the keys, defaults to `positions`.
    """
    key_positions = positions if key_positions is None else key_positions
    mask = causal_window_mask(positions, key_positions)
    return masked_attention(queries, keys, values, mask, projection)


def sliding_window_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    positions: np.ndarray,
    window: int,
    projection: QKVProjection,
    key_positions: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Causal attention restricted to the `window` most recent keys, the query's own position included.
    """
    if window < 1:
        raise ConfigurationError("window", f"must be >= 1, got {window}")
    key_positions = positions if key_positions is None else key_positions
    mask = causal_window_mask(positions, key_positions, window)
    return masked_attention(queries, keys, values, mask, projection)
