from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from typing_extensions import Dict

from ..exceptions import DimensionMismatchError
from ..numerics.functional import sigmoid, straight_through_threshold
from ..numerics.tensor import Tensor, as_tensor, parameter


@dataclass
class Router:
    """
    Linear map from a normalized hidden state to one scalar logit per token.
    """

    weight: Tensor
    """
    Shape (d_model,).
    """

    bias: Tensor
    """
    Shape ().
    """

    @classmethod
    def initialize(cls, d_model: int, init_bias: float) -> Router:
        return cls(weight=parameter(np.zeros(d_model)), bias=parameter(np.array(init_bias)))

    def logits(self, hidden: Tensor) -> Tensor:
        """
        :param hidden: Normalized hidden states of shape (..., T, d_model).
        :return: Logits of shape (..., T).
        """
        if hidden.shape[-1] != self.weight.shape[0]:
            raise DimensionMismatchError("router", self.weight.shape, hidden.shape[-1:])
        return (hidden * self.weight).sum(axis=-1) + self.bias

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class GateRecord:
    """
    The routing decision of one token in one layer.
    """

    layer: int
    token_index: int
    logit: float
    """
    The router logit. Layers with a fixed gate report +inf or -inf, so soft_gate == sigmoid(logit) holds everywhere.
    """

    soft_gate: float
    hard_gate: int

    @property
    def is_full(self) -> bool:
        return self.hard_gate == 1

    def as_row(self) -> tuple:
        return self.layer, self.token_index, self.logit, self.soft_gate, self.hard_gate


GATE_RECORD_COLUMNS = ("layer", "token_index", "logit", "soft_gate", "hard_gate")


def fixed_gate_logit(gate: float) -> float:
    return np.inf if gate == 1.0 else -np.inf


def soft_gate(normalized_hidden: Tensor, router: Router) -> Tensor:
    return sigmoid(router.logits(normalized_hidden))


def hard_gate(soft: Tensor, threshold: float = 0.5) -> Tensor:
    """
    1 where the soft gate is strictly above the threshold, else 0.
    The gradient w.r.t. the soft gate is the identity (straight-through).
    """
    return straight_through_threshold(soft, threshold)


def mix_outputs(gate: Tensor, full_output: Tensor, swa_output: Tensor) -> Tensor:
    """
    gate ⊙ full_output + (1 - gate) ⊙ swa_output with the per-token gate broadcast over features.
    With a hard gate the forward value of every row is exactly one branch's row.
    """
    gate = as_tensor(gate)
    if full_output.shape != swa_output.shape or gate.shape != full_output.shape[:-1]:
        raise DimensionMismatchError("mix_outputs", full_output.shape, swa_output.shape + gate.shape)
    g = gate.reshape(gate.shape + (1,))
    return g * full_output + (1.0 - g) * swa_output
