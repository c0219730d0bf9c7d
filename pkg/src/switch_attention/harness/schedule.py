from __future__ import annotations

import math
from dataclasses import dataclass

from random_events.utils import SubclassJSONSerializer
from typing_extensions import Any, Dict, Optional, Self

from ..exceptions import ConfigurationError, StepOutOfRangeError


@dataclass
class TrainConfig(SubclassJSONSerializer):
    """
    Optimization settings of one training run.
    """

    total_steps: int = 1000
    batch_size: int = 8
    seq_len: int = 64
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    decay_steps: Optional[int] = None
    """
    Length of the cosine decay at the end of the run. The rate is held at its peak between warmup and decay.
    None decays over every step after warmup.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    optimizer_epsilon: float = 1e-8
    grad_clip: float = 1.0
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError("total_steps", f"must be >= 1, got {self.total_steps}")
        if not 1 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError(
                "warmup_steps", f"must lie in [1, total_steps={self.total_steps}), got {self.warmup_steps}"
            )
        if self.decay_steps is not None and not 1 <= self.decay_steps <= self.total_steps - self.warmup_steps:
            raise ConfigurationError(
                "decay_steps", f"must lie in [1, {self.total_steps - self.warmup_steps}], got {self.decay_steps}"
            )
        if self.batch_size < 1 or self.seq_len < 2:
            raise ConfigurationError("batch_size/seq_len", "need at least one row of two tokens")
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr", f"must be > 0, got {self.peak_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1/beta2", "must lie in [0, 1)")

    @property
    def decay_start(self) -> int:
        if self.decay_steps is None:
            return self.warmup_steps
        return self.total_steps - self.decay_steps

    def to_json(self) -> Dict[str, Any]:
        return {
            **super().to_json(),
            **{name: getattr(self, name) for name in self.__dataclass_fields__},
        }

    @classmethod
    def _from_json(cls, data: Dict[str, Any], **kwargs) -> Self:
        data = {k: v for k, v in data.items() if k != "type"}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError("train", f"unknown keys {sorted(unknown)}")
        return cls(**data)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """
    Learning rate at `step`: linear warmup from 0 to the peak, an optional hold at the peak,
    then a cosine decay that reaches 0 at `total_steps`.
    """
    if not 0 <= step <= cfg.total_steps:
        raise StepOutOfRangeError(step, cfg.total_steps)
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step <= cfg.decay_start:
        return cfg.peak_lr
    progress = (step - cfg.decay_start) / (cfg.total_steps - cfg.decay_start)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
