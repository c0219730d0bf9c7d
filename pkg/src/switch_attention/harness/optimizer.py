from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from typing_extensions import Dict

from ..exceptions import CheckpointManifestError
from ..numerics.tensor import Tensor


@dataclass
class AdamOptimizer:
    """
    Adam with bias correction and global gradient-norm clipping.
    """

    parameters: Dict[str, Tensor]
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    grad_clip: float = 1.0
    step_count: int = 0
    first_moments: Dict[str, np.ndarray] = field(init=False)
    second_moments: Dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.first_moments = {name: np.zeros_like(t.data) for name, t in self.parameters.items()}
        self.second_moments = {name: np.zeros_like(t.data) for name, t in self.parameters.items()}

    def gradient_norm(self) -> float:
        return float(
            np.sqrt(sum(np.sum(t.grad * t.grad) for t in self.parameters.values() if t.grad is not None))
        )

    def step(self, lr: float) -> float:
        """
        Updates every parameter that has a gradient and clears the gradients.

        :return: The global gradient norm before clipping.
        """
        norm = self.gradient_norm()
        scale = min(1.0, self.grad_clip / (norm + 1e-12)) if self.grad_clip > 0 else 1.0
        self.step_count += 1
        first_correction = 1.0 - self.beta1**self.step_count
        second_correction = 1.0 - self.beta2**self.step_count
        for name, tensor in self.parameters.items():
            if tensor.grad is None:
                continue
            grad = tensor.grad * scale
            m = self.first_moments[name]
            v = self.second_moments[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            tensor.data = tensor.data - lr * (m / first_correction) / (
                np.sqrt(v / second_correction) + self.epsilon
            )
            tensor.zero_grad()
        return norm

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step_count": np.array(float(self.step_count))}
        for name in self.parameters:
            state[f"m.{name}"] = self.first_moments[name]
            state[f"v.{name}"] = self.second_moments[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        try:
            self.step_count = int(state["step_count"])
            for name in self.parameters:
                self.first_moments[name] = np.array(state[f"m.{name}"])
                self.second_moments[name] = np.array(state[f"v.{name}"])
        except KeyError as e:
            raise CheckpointManifestError("<optimizer state>", f"missing entry {e}")
