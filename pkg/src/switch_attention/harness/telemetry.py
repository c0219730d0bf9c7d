"""
CSV telemetry: loss and ratio curves written as training callbacks, plus gate logs and cost reports.
"""

from __future__ import annotations

import csv
import logging
import os
import sys
from dataclasses import dataclass, field

from tqdm import tqdm
from typing_extensions import TYPE_CHECKING, Any, Iterable, List, Optional, Sequence, TextIO, Union

from ..callbacks.callback import Callback
from ..inference.cost_accounting import CostReport
from ..layers.routing import GATE_RECORD_COLUMNS, GateRecord
from .schedule import TrainConfig

if TYPE_CHECKING:
    from .training import StepRecord

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "L_LM", "reg_mean", "lr", "gamma_mean", "gamma_max", "full_ratio", "grad_norm")
RATIO_COLUMNS = ("step", "layer", "full_ratio")
COST_COLUMNS = ("position", "flops", "mem_tokens")

PathLike = Union[str, os.PathLike]


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_rows(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(columns)
        writer.writerows([_cell(v) for v in row] for row in rows)


@dataclass
class CsvCallback(Callback):
    """
    Appends rows to a CSV file after every step. The header is written on creation.
    """

    path: PathLike = None
    columns: Sequence[str] = ()
    _file: Optional[TextIO] = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self._file = open(self.path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(self.columns)

    def write(self, rows: Iterable[Sequence[Any]]) -> None:
        self._writer.writerows([_cell(v) for v in row] for row in rows)
        self._file.flush()

    def stop(self):
        if self._file is not None and not self._file.closed:
            self._file.close()


@dataclass
class LossCurveWriter(CsvCallback):
    columns: Sequence[str] = LOSS_COLUMNS

    def _notify(self, record: StepRecord):
        self.write(
            [
                (
                    record.step,
                    record.lm_loss,
                    record.reg_mean,
                    record.lr,
                    record.gamma_mean,
                    record.gamma_max,
                    record.full_ratio,
                    record.grad_norm,
                )
            ]
        )


@dataclass
class RatioCurveWriter(CsvCallback):
    """
    One row per step and layer with the share of tokens that used the full branch.
    """

    columns: Sequence[str] = RATIO_COLUMNS

    def _notify(self, record: StepRecord):
        self.write([(record.step, layer, ratio) for layer, ratio in enumerate(record.layer_full_ratios)])


@dataclass
class ProgressBarCallback(Callback):
    total_steps: int = 0
    _bar: Optional[tqdm] = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self._bar = tqdm(total=self.total_steps, disable=not sys.stderr.isatty(), unit="step")

    def _notify(self, record: StepRecord):
        self._bar.set_postfix(L_LM=f"{record.lm_loss:.3f}", full=f"{record.full_ratio:.2f}")
        self._bar.update(1)

    def stop(self):
        self._bar.close()


def telemetry_callbacks(out_dir: PathLike, train_config: TrainConfig) -> List[Callback]:
    return [
        LossCurveWriter(path=os.path.join(out_dir, "loss.csv")),
        RatioCurveWriter(path=os.path.join(out_dir, "ratios.csv")),
        ProgressBarCallback(total_steps=train_config.total_steps),
    ]


def write_gate_records(path: PathLike, records: Iterable[GateRecord]) -> None:
    write_rows(path, GATE_RECORD_COLUMNS, (record.as_row() for record in records))


def read_gate_records(path: PathLike) -> List[GateRecord]:
    with open(path, newline="") as file:
        return [
            GateRecord(
                layer=int(row["layer"]),
                token_index=int(row["token_index"]),
                logit=float(row["logit"]),
                soft_gate=float(row["soft_gate"]),
                hard_gate=int(row["hard_gate"]),
            )
            for row in csv.DictReader(file)
        ]


def write_cost_report(path: PathLike, report: CostReport) -> None:
    write_rows(path, COST_COLUMNS, report.rows())
