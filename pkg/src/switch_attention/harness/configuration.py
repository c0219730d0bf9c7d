from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

from random_events.utils import SubclassJSONSerializer
from typing_extensions import Any, Dict, Optional, Self, Union

from ..exceptions import ConfigurationError
from ..model.config import AttentionMode, ModelConfig
from .schedule import TrainConfig
from .synthetic_data import DataConfig

logger = logging.getLogger(__name__)

SEED_ENVIRONMENT_VARIABLE = "SWIATTN_SEED"


def default_cpt_config() -> TrainConfig:
    return TrainConfig(total_steps=1500, warmup_steps=100, peak_lr=1e-3)


@dataclass
class ExperimentConfig(SubclassJSONSerializer):
    """
    Everything one experiment needs: the routed model, the two training stages, the data and the seed.
    The donor uses `model` with its attention mode replaced by full_only.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    cpt: TrainConfig = field(default_factory=default_cpt_config)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    @property
    def donor_model(self) -> ModelConfig:
        return self.model.with_attention_mode(AttentionMode.FULL_ONLY)

    def with_seed(self, seed: int) -> ExperimentConfig:
        """
        Propagates one seed to both training stages.
        """
        pretrain = TrainConfig._from_json({**self.pretrain.to_json(), "seed": seed})
        cpt = TrainConfig._from_json({**self.cpt.to_json(), "seed": seed})
        return ExperimentConfig(self.model, pretrain, cpt, self.data, seed)

    def to_json(self) -> Dict[str, Any]:
        return {
            **super().to_json(),
            "model": self.model.to_json(),
            "pretrain": self.pretrain.to_json(),
            "cpt": self.cpt.to_json(),
            "data": self.data.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def _from_json(cls, data: Dict[str, Any], **kwargs) -> Self:
        unknown = set(data) - {"type", "model", "pretrain", "cpt", "data", "seed"}
        if unknown:
            raise ConfigurationError("config", f"unknown sections {sorted(unknown)}")
        return cls(
            model=ModelConfig._from_json(data.get("model", {})),
            pretrain=TrainConfig._from_json(data.get("pretrain", {})),
            cpt=TrainConfig._from_json({**default_cpt_config().to_json(), **data.get("cpt", {})}),
            data=DataConfig._from_json(data.get("data", {})),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def from_file(cls, path: Union[str, os.PathLike]) -> ExperimentConfig:
        with open(path) as file:
            try:
                content = json.load(file)
            except json.JSONDecodeError as e:
                raise ConfigurationError(str(path), f"not valid JSON ({e})")
        logger.debug(f"Loaded experiment config from {path}")
        return cls._from_json(content)


def resolve_seed(flag: Optional[int], config_seed: int) -> int:
    """
    Seed precedence: command line flag, then the SWIATTN_SEED environment variable, then the config file.
    """
    if flag is not None:
        return flag
    environment = os.environ.get(SEED_ENVIRONMENT_VARIABLE)
    if environment is not None:
        try:
            return int(environment)
        except ValueError:
            raise ConfigurationError(SEED_ENVIRONMENT_VARIABLE, f"not an integer: '{environment}'")
    return config_seed


def load_experiment(path: Optional[Union[str, os.PathLike]], seed_flag: Optional[int] = None) -> ExperimentConfig:
    config = ExperimentConfig() if path is None else ExperimentConfig.from_file(path)
    return config.with_seed(resolve_seed(seed_flag, config.seed))
