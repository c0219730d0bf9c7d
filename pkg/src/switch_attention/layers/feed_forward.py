from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from typing_extensions import Dict

from ..numerics.functional import silu
from ..numerics.tensor import Tensor, parameter


@dataclass
class FeedForward:
    """
    Gated two-projection MLP: down(silu(x·gate) ⊙ x·up).
    """

    gate: Tensor
    """
    Shape (d_model, ffn_hidden).
    """

    up: Tensor
    """
    Shape (d_model, ffn_hidden).
    """

    down: Tensor
    """
    Shape (ffn_hidden, d_model).
    """

    @classmethod
    def initialize(
        cls, d_model: int, hidden: int, rng: np.random.Generator, std: float = 0.02
    ) -> FeedForward:
        return cls(
            gate=parameter(rng.normal(0.0, std, (d_model, hidden))),
            up=parameter(rng.normal(0.0, std, (d_model, hidden))),
            down=parameter(rng.normal(0.0, std, (hidden, d_model))),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return (silu(x @ self.gate) * (x @ self.up)) @ self.down

    def parameters(self) -> Dict[str, Tensor]:
        return {"gate": self.gate, "up": self.up, "down": self.down}
