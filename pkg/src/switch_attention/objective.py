"""
Training objective of the routed model: next-token loss plus a softplus penalty on every router logit,
weighted per token by how hard the token is and how much the two branches disagree on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from typing_extensions import List, Optional, Union

from .exceptions import ContractViolationError, DimensionMismatchError
from .model.config import RegularizerConfig
from .model.transformer import ForwardResult
from .numerics.functional import nll_rows, softplus
from .numerics.tensor import Tensor, as_tensor

FloatOrArray = Union[float, np.ndarray]


@dataclass
class LanguageModelingLoss:
    loss: Tensor
    """
    Mean NLL over all valid target positions, a scalar.
    """

    token_nll: np.ndarray
    """
    NLL of predicting token t + 1 from position t, shape (batch, T - 1).
    """

    target_mask: np.ndarray
    """
    True where the target token counts, shape (batch, T - 1).
    """

    def nll_per_position(self) -> np.ndarray:
        """
        The NLL attributed to the gate at each position, shape (batch, T).
        The last position predicts nothing and gets the mean NLL of its sequence.
        """
        counts = np.maximum(self.target_mask.sum(axis=1, keepdims=True), 1)
        sequence_mean = (self.token_nll * self.target_mask).sum(axis=1, keepdims=True) / counts
        return np.concatenate([self.token_nll, sequence_mean], axis=1)


def lm_loss(
    logits: Tensor, tokens: np.ndarray, token_mask: Optional[np.ndarray] = None
) -> LanguageModelingLoss:
    """
    Next-token negative log-likelihood.

    :param logits: Shape (batch, T, V) or (T, V).
    :param tokens: Token ids of shape (batch, T) or (T,); logits at t are scored against token t + 1.
    :param token_mask: True for real tokens, False for padding; padded targets are ignored.
    """
    if logits.ndim == 2:
        logits = logits.reshape((1,) + logits.shape)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape != logits.shape[:-1]:
        raise DimensionMismatchError("lm_loss", logits.shape[:-1], tokens.shape)
    if tokens.shape[1] < 2:
        raise ContractViolationError("lm_loss", "need at least two tokens to score a next-token prediction")
    token_nll = nll_rows(logits[:, :-1], tokens[:, 1:])
    mask = np.ones(token_nll.shape, dtype=bool)
    if token_mask is not None:
        mask = np.atleast_2d(np.asarray(token_mask, dtype=bool))[:, 1:]
    if not mask.any():
        raise ContractViolationError("lm_loss", "every target is masked")
    loss = (token_nll * mask.astype(np.float64)).sum() * (1.0 / mask.sum())
    return LanguageModelingLoss(loss, token_nll.data.copy(), mask)


def branch_mse(full_output: Union[Tensor, np.ndarray], swa_output: Union[Tensor, np.ndarray]) -> FloatOrArray:
    """
    Squared L2 distance between the branch outputs over the feature axis, without gradient.
    """
    full = full_output.data if isinstance(full_output, Tensor) else np.asarray(full_output)
    swa = swa_output.data if isinstance(swa_output, Tensor) else np.asarray(swa_output)
    if full.shape != swa.shape:
        raise DimensionMismatchError("branch_mse", full.shape, swa.shape)
    difference = full - swa
    result = np.sum(difference * difference, axis=-1)
    return float(result) if result.ndim == 0 else result


def adaptive_weight(nll: FloatOrArray, mse: FloatOrArray, cfg: RegularizerConfig) -> FloatOrArray:
    """
    γ = γ_base / (ε + nll + α·mse), a constant of the loss. Bounded above by γ_base / ε.
    """
    nll, mse = np.asarray(nll, dtype=np.float64), np.asarray(mse, dtype=np.float64)
    if np.any(nll < 0) or np.any(mse < 0):
        raise ContractViolationError("adaptive_weight", "nll and mse must be non-negative")
    if cfg.adaptive:
        denominator = cfg.epsilon + (nll if cfg.use_nll else 0.0) + cfg.alpha * mse
        result = cfg.gamma_base / denominator
    else:
        result = np.full(np.broadcast(nll, mse).shape, cfg.gamma_base)
    return float(result) if np.ndim(result) == 0 else result


def token_regularizer(router_logit: Tensor, gamma: FloatOrArray) -> Tensor:
    """
    γ · softplus(logit). Only the logit carries gradient.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0):
        raise ContractViolationError("token_regularizer", "gamma must be non-negative")
    return softplus(as_tensor(router_logit)) * gamma


def total_loss(
    language_modeling_loss: Tensor,
    regularizers: List[Tensor],
    token_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    L_LM plus the mean of the per-token regularizers over all routed layers and valid tokens.

    :param language_modeling_loss: Scalar L_LM.
    :param regularizers: One tensor of shape (batch, T) (or (T,)) per routed layer.
    :param token_mask: True for tokens that count, padding is excluded from the mean.
    """
    if not regularizers:
        return language_modeling_loss
    shape = regularizers[0].shape
    mask = np.ones(shape) if token_mask is None else np.asarray(token_mask, dtype=np.float64).reshape(shape)
    count = mask.sum() * len(regularizers)
    summed = regularizers[0] * mask
    for regularizer in regularizers[1:]:
        summed = summed + regularizer * mask
    return language_modeling_loss + summed.sum() * (1.0 / count)


@dataclass
class TokenLossBreakdown:
    """
    Per-token terms of the objective, arrays of shape (routed layers, batch, T) unless noted.
    """

    nll: np.ndarray
    """
    Shape (batch, T).
    """

    mse: np.ndarray
    gamma: np.ndarray
    reg: np.ndarray

    def gamma_statistics(self, token_mask: Optional[np.ndarray] = None) -> tuple:
        """
        :return: Mean and max of the adaptive weight over valid tokens, (0, 0) without routed layers.
        """
        if self.gamma.size == 0:
            return 0.0, 0.0
        values = self.gamma if token_mask is None else self.gamma[:, np.asarray(token_mask, dtype=bool)]
        return float(values.mean()), float(values.max())


@dataclass
class TrainingLoss:
    total: Tensor
    language_modeling: LanguageModelingLoss
    regularizer_mean: float
    breakdown: TokenLossBreakdown


def compute_training_loss(
    result: ForwardResult,
    cfg: RegularizerConfig,
    token_mask: Optional[np.ndarray] = None,
) -> TrainingLoss:
    """
    Assembles the full objective from a forward pass. Layers without a router contribute no regularizer.
    """
    lm = lm_loss(result.logits, result.tokens, token_mask)
    nll = lm.nll_per_position()
    regularizers, mses, gammas = [], [], []
    for trace in result.layers:
        if trace.router_logits is None:
            continue
        mse = branch_mse(trace.full_output, trace.swa_output)
        gamma = adaptive_weight(nll, mse, cfg)
        mses.append(mse)
        gammas.append(gamma)
        regularizers.append(token_regularizer(trace.router_logits, gamma))
    total = total_loss(lm.loss, regularizers, token_mask)
    batch_shape = nll.shape
    reg_values = np.array([r.data for r in regularizers]).reshape((-1,) + batch_shape)
    if token_mask is None:
        regularizer_mean = float(reg_values.mean()) if reg_values.size else 0.0
    else:
        valid = np.asarray(token_mask, dtype=bool)
        regularizer_mean = float(reg_values[:, valid].mean()) if reg_values.size else 0.0
    breakdown = TokenLossBreakdown(
        nll=nll,
        mse=np.array(mses).reshape((-1,) + batch_shape),
        gamma=np.array(gammas).reshape((-1,) + batch_shape),
        reg=reg_values,
    )
    return TrainingLoss(total, lm, regularizer_mean, breakdown)
