import csv

import numpy as np

from switch_attention.harness.telemetry import (
    COST_COLUMNS,
    LOSS_COLUMNS,
    LossCurveWriter,
    RatioCurveWriter,
    read_gate_records,
    write_cost_report,
    write_gate_records,
)
from switch_attention.harness.training import StepRecord
from switch_attention.inference.cost_accounting import CostReport
from switch_attention.layers.routing import GateRecord


def step_record(step: int) -> StepRecord:
    return StepRecord(
        step=step,
        lm_loss=3.25,
        reg_mean=1e-4,
        lr=0.1 * step,
        gamma_mean=2e-3,
        gamma_max=5e-3,
        full_ratio=0.75,
        layer_full_ratios=[1.0, 0.5],
        grad_norm=0.3,
        total_loss=3.2501,
    )


def read_rows(path):
    with open(path, newline="") as file:
        return list(csv.reader(file))


def test_gate_records_survive_a_round_trip(tmp_path):
    records = [
        GateRecord(layer=0, token_index=3, logit=0.1 + 0.2, soft_gate=0.574442516811659, hard_gate=1),
        GateRecord(layer=1, token_index=3, logit=-np.inf, soft_gate=0.0, hard_gate=0),
    ]
    path = tmp_path / "gates.csv"
    write_gate_records(path, records)
    assert read_rows(path)[0] == ["layer", "token_index", "logit", "soft_gate", "hard_gate"]
    assert read_gate_records(path) == records


def test_curve_writers(tmp_path):
    losses = LossCurveWriter(path=tmp_path / "loss.csv")
    ratios = RatioCurveWriter(path=tmp_path / "ratios.csv")
    for step in range(3):
        losses.notify(step_record(step))
        ratios.notify(step_record(step))
    ratios.pause()
    ratios.notify(step_record(3))
    losses.stop()
    ratios.stop()

    loss_rows = read_rows(tmp_path / "loss.csv")
    assert tuple(loss_rows[0]) == LOSS_COLUMNS
    assert len(loss_rows) == 4
    assert loss_rows[2] == ["1", "3.25", "0.0001", "0.1", "0.002", "0.005", "0.75", "0.3"]
    ratio_rows = read_rows(tmp_path / "ratios.csv")
    assert ratio_rows[1:3] == [["0", "0", "1.0"], ["0", "1", "0.5"]]
    assert len(ratio_rows) == 1 + 3 * 2


def test_cost_report_rows(tmp_path):
    report = CostReport(window=2, prefill_flops_by_position=[10.0, 20.0])
    report.record_decode(3, [1.0, 0.0])
    path = tmp_path / "cost.csv"
    write_cost_report(path, report)
    assert read_rows(path) == [list(COST_COLUMNS), ["1", "10.0", ""], ["2", "20.0", ""], ["3", "", "2.5"]]
