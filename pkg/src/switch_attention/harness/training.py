from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from typing_extensions import List, Optional, Sequence, Union

from ..callbacks.callback import Callback, StepHistoryCallback
from ..exceptions import ConfigurationError, NumericsError, TrainingDivergedError
from ..model.checkpoint import Checkpoint, save_checkpoint
from ..model.config import AttentionMode, ModelConfig
from ..model.transformer import SwiAttnModel, init_from_full
from ..numerics.tensor import backward, no_grad
from ..objective import compute_training_loss, lm_loss
from .optimizer import AdamOptimizer
from .schedule import TrainConfig, lr_at
from .synthetic_data import BatchStream, DataConfig, SyntheticBatch, Vocabulary
from .telemetry import telemetry_callbacks

logger = logging.getLogger(__name__)


@dataclass
class StepRecord:
    """
    Telemetry of one optimizer step.
    """

    step: int
    lm_loss: float
    reg_mean: float
    lr: float
    gamma_mean: float
    gamma_max: float
    full_ratio: float
    """
    Share of (token, layer) decisions that selected the full branch.
    """

    layer_full_ratios: List[float]
    grad_norm: float
    total_loss: float


@dataclass
class Trainer:
    """
    Runs optimizer steps of the combined objective on a batch stream and reports every step to its callbacks.
    """

    model: SwiAttnModel
    train_config: TrainConfig
    batches: BatchStream
    callbacks: List[Callback] = field(default_factory=list)
    history: StepHistoryCallback = field(default_factory=StepHistoryCallback)
    optimizer: AdamOptimizer = field(init=False)

    def __post_init__(self):
        self.optimizer = AdamOptimizer(
            self.model.named_parameters(),
            beta1=self.train_config.beta1,
            beta2=self.train_config.beta2,
            epsilon=self.train_config.optimizer_epsilon,
            grad_clip=self.train_config.grad_clip,
        )
        self.callbacks = [self.history, *self.callbacks]

    def train_step(self, step: int) -> StepRecord:
        batch = self.batches.batch(step)
        lr = lr_at(step, self.train_config)
        try:
            result = self.model.forward_train(batch.tokens)
            loss = compute_training_loss(result, self.model.config.regularizer)
            self.model.zero_grad()
            backward(loss.total)
            grad_norm = self.optimizer.step(lr)
        except NumericsError as e:
            logger.error(f"Step {step} failed: {e}")
            raise TrainingDivergedError(step, e)

        gamma_mean, gamma_max = loss.breakdown.gamma_statistics()
        layer_ratios = [trace.full_ratio for trace in result.layers]
        record = StepRecord(
            step=step,
            lm_loss=loss.language_modeling.loss.item(),
            reg_mean=loss.regularizer_mean,
            lr=lr,
            gamma_mean=gamma_mean,
            gamma_max=gamma_max,
            full_ratio=float(np.mean(layer_ratios)),
            layer_full_ratios=layer_ratios,
            grad_norm=grad_norm,
            total_loss=loss.total.item(),
        )
        if step % self.train_config.log_every == 0 or step == self.train_config.total_steps - 1:
            logger.info(
                f"step={step} L_LM={record.lm_loss:.4f} reg_mean={record.reg_mean:.3e} "
                f"lr={lr:.3e} full_ratio={record.full_ratio:.3f}"
            )
        return record

    def train(self) -> List[StepRecord]:
        """
        Runs every step of the schedule and stops all callbacks afterwards.
        """
        try:
            for step in range(self.train_config.total_steps):
                record = self.train_step(step)
                for callback in self.callbacks:
                    callback.notify(record)
        finally:
            for callback in self.callbacks:
                callback.stop()
        return self.history.records

    def checkpoint(self, metadata: Optional[dict] = None) -> Checkpoint:
        return Checkpoint.from_model(
            self.model,
            step=self.optimizer.step_count,
            optimizer_state=self.optimizer.state_dict(),
            metadata=metadata,
        )


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    history: List[StepRecord]
    model: SwiAttnModel


def evaluate_lm_loss(
    model: SwiAttnModel, batches: Sequence[SyntheticBatch], scored_only: bool = False
) -> float:
    """
    Mean next-token NLL over the batches, without recording a tape.

    :param scored_only: Score only the tokens the task marks as predictable.
    """
    losses = []
    with no_grad():
        for batch in batches:
            result = model.forward_train(batch.tokens)
            mask = batch.score_mask if scored_only else None
            losses.append(lm_loss(result.logits, batch.tokens, mask).loss.item())
    return float(np.mean(losses))


def _run(
    model: SwiAttnModel,
    train_config: TrainConfig,
    data_config: DataConfig,
    out_dir: Optional[Union[str, os.PathLike]],
    checkpoint_name: str,
    callbacks: Optional[List[Callback]],
    metadata: dict,
) -> TrainingResult:
    batches = BatchStream(
        Vocabulary(model.config.vocab_size),
        data_config,
        train_config.batch_size,
        train_config.seq_len,
        train_config.seed,
    )
    all_callbacks = list(callbacks or [])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        all_callbacks.extend(telemetry_callbacks(out_dir, train_config))
    trainer = Trainer(model, train_config, batches, all_callbacks)
    history = trainer.train()
    checkpoint = trainer.checkpoint(metadata)
    if out_dir is not None:
        save_checkpoint(checkpoint, os.path.join(out_dir, checkpoint_name))
    return TrainingResult(checkpoint, history, model)


def pretrain_full(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data_config: DataConfig,
    out_dir: Optional[Union[str, os.PathLike]] = None,
    callbacks: Optional[List[Callback]] = None,
) -> TrainingResult:
    """
    Trains the full attention donor from scratch. Writes loss.csv and donor.ckpt if `out_dir` is given.
    """
    if model_config.attention_mode is not AttentionMode.FULL_ONLY:
        raise ConfigurationError(
            "attention_mode", f"the donor must be full_only, got {model_config.attention_mode.value}"
        )
    model = SwiAttnModel.initialize(model_config, train_config.seed)
    logger.info(f"Pretraining full attention donor with {model.parameter_count()} parameters")
    return _run(model, train_config, data_config, out_dir, "donor.ckpt", callbacks, {"stage": "pretrain"})


def cpt_swiattn(
    donor: Union[SwiAttnModel, Checkpoint],
    model_config: ModelConfig,
    train_config: TrainConfig,
    data_config: DataConfig,
    out_dir: Optional[Union[str, os.PathLike]] = None,
    callbacks: Optional[List[Callback]] = None,
) -> TrainingResult:
    """
    Continual pretraining: copies the donor into a model of `model_config`'s attention mode, then trains
    with a fresh optimizer. Writes loss.csv, ratios.csv and <mode>.ckpt if `out_dir` is given.
    """
    if isinstance(donor, Checkpoint):
        donor = donor.to_model()
    model = init_from_full(donor, model_config)
    name = f"{model_config.attention_mode.value}.ckpt"
    return _run(model, train_config, data_config, out_dir, name, callbacks, {"stage": "cpt"})
