"""
Differentiable nonlinearities, normalization and loss primitives on top of `Tensor`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_softmax
from typing_extensions import Optional, Tuple, Union

from ..exceptions import ContractViolationError, DegenerateRowError, DimensionMismatchError
from .tensor import Tensor, as_tensor, record

RMS_NORM_EPSILON = 1e-6


def sigmoid(x: Tensor) -> Tensor:
    """
    Elementwise logistic function. Saturates to exactly 0 or 1 far in the tails instead of overflowing.
    """
    x = as_tensor(x)
    s = expit(x.data)
    return record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    """
    Elementwise ln(1+e^x), evaluated as max(x,0)+ln(1+e^(-|x|)).
    """
    x = as_tensor(x)
    value = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return record("softplus", (x,), value, lambda g: (g * expit(x.data),))


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return record(
        "silu",
        (x,),
        x.data * s,
        lambda g: (g * (s + x.data * s * (1.0 - s)),),
    )


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis.

    :param x: The logits.
    :param mask: Boolean array broadcastable to `x`; True marks admissible entries.
        Inadmissible entries get an additive -inf and therefore probability exactly 0.
    :return: Row-stochastic tensor of the same shape as `x`.
    """
    x = as_tensor(x)
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        empty_rows = ~mask.any(axis=-1)
        if empty_rows.any():
            raise DegenerateRowError(int(empty_rows.sum()))
        with np.errstate(invalid="ignore"):
            logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exponentials = np.exp(shifted)
    p = exponentials / exponentials.sum(axis=-1, keepdims=True)

    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray]:
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax_rows", (x,), p, backward_rule)


def rms_norm(x: Tensor, scale: Tensor, epsilon: float = RMS_NORM_EPSILON) -> Tensor:
    """
    x / sqrt(mean(x²) + epsilon) * scale over the last axis.
    """
    x, scale = as_tensor(x), as_tensor(scale)
    if x.shape[-1] == 0 or scale.shape != (x.shape[-1],):
        raise DimensionMismatchError("rms_norm", (x.shape[-1],), scale.shape)
    d = x.shape[-1]
    inverse_rms = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + epsilon)
    normalized = x.data * inverse_rms

    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g_normalized = g * scale.data
        projection = (g_normalized * normalized).sum(axis=-1, keepdims=True) / d
        grad_x = inverse_rms * (g_normalized - normalized * projection)
        grad_scale = (g * normalized).reshape(-1, d).sum(axis=0)
        return grad_x, grad_scale

    return record("rms_norm", (x, scale), normalized * scale.data, backward_rule)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """
    Gathers rows of a 2-D table, e.g. token embeddings. The result has shape indices.shape + (table.shape[1],).
    """
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionMismatchError("take_rows", "2", table.shape)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ContractViolationError(
            "take_rows", f"indices must lie in [0, {table.shape[0]}), got [{indices.min()}, {indices.max()}]"
        )

    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return record("take_rows", (table,), table.data[indices], backward_rule)


def nll_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Negative log-likelihood of `targets` under softmax(`logits`) for every row.

    :param logits: Tensor of shape (..., V).
    :param targets: Integer array of shape (...) with values in [0, V).
    :return: Tensor of shape (...).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocabulary = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionMismatchError("nll_rows", logits.shape[:-1], targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= vocabulary):
        raise ContractViolationError(
            "nll_rows", f"target ids must lie in [0, {vocabulary}), got max {targets.max()}"
        )
    log_probabilities = log_softmax(logits.data, axis=-1)
    picked = np.take_along_axis(log_probabilities, targets[..., None], axis=-1)[..., 0]

    def backward_rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.exp(log_probabilities)
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (grad * g[..., None],)

    return record("nll_rows", (logits,), -picked, backward_rule)


def straight_through_threshold(soft: Union[Tensor, np.ndarray], threshold: float) -> Tensor:
    """
    Forward: exactly 1 where `soft` > `threshold`, else exactly 0.
    Backward: the upstream gradient passes to `soft` unchanged.
    """
    soft = as_tensor(soft)
    hard = (soft.data > threshold).astype(soft.data.dtype)
    return record("straight_through_threshold", (soft,), hard, lambda g: (g,))
