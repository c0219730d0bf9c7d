from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from typing_extensions import Dict, List, Optional, Sequence, Tuple, Union

from ..exceptions import ConfigurationError, EmptyCostReportError
from ..inference.cost_accounting import CostReport
from ..inference.session import InferenceSession
from ..layers.routing import GateRecord
from ..model.transformer import SwiAttnModel
from ..numerics.tensor import no_grad
from .synthetic_data import NiahInstance
from .training import StepRecord

logger = logging.getLogger(__name__)


def per_layer_ratios(records: Sequence[GateRecord], n_layers: int) -> Tuple[List[float], List[int]]:
    """
    :return: The full-branch share of every layer and the number of decisions it is based on.
    """
    full, counts = np.zeros(n_layers), np.zeros(n_layers, dtype=int)
    for record in records:
        full[record.layer] += record.hard_gate
        counts[record.layer] += 1
    ratios = np.divide(full, counts, out=np.zeros(n_layers), where=counts > 0)
    return ratios.tolist(), counts.tolist()


@dataclass
class NiahOutcome:
    instance: NiahInstance
    answer_gates: np.ndarray
    """
    Hard gates of the answer-generating decode steps, shape (answer length, n_layers).
    """

    prefill_gates: np.ndarray
    """
    Hard gates of the prompt, shape (n_layers, prompt length - 1).
    """

    predicted: np.ndarray
    """
    Greedy prediction at every answer step, with the true answer tokens fed back.
    """

    gate_records: List[GateRecord] = field(default_factory=list, repr=False)

    @property
    def retrieved(self) -> bool:
        return bool(np.array_equal(self.predicted, self.instance.answer))

    @property
    def full_ratio(self) -> float:
        return float(self.answer_gates.mean())


@dataclass
class RouteStats:
    """
    How often the full branch was chosen, per layer and overall, plus the optional training and NIAH series.
    """

    layer_ratios: List[float]
    layer_token_counts: List[int]
    ratio_by_iteration: List[Tuple[int, List[float]]] = field(default_factory=list)
    ratio_by_depth: Dict[Tuple[int, float], float] = field(default_factory=dict)
    """
    Answer-step full ratio per (context length, depth percent).
    """

    niah_outcomes: List[NiahOutcome] = field(default_factory=list)
    records: List[GateRecord] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if any(not 0.0 <= r <= 1.0 for r in self.layer_ratios):
            raise ConfigurationError("layer_ratios", "ratios must lie in [0, 1]")

    @property
    def overall_ratio(self) -> float:
        """
        Token-weighted mean of the per-layer ratios.
        """
        counts = np.asarray(self.layer_token_counts, dtype=np.float64)
        if counts.sum() == 0:
            return 0.0
        return float(np.dot(self.layer_ratios, counts) / counts.sum())

    def _niah_mean(self, inside: bool, attribute: str) -> Optional[float]:
        selected = [getattr(o, attribute) for o in self.niah_outcomes if o.instance.inside_window == inside]
        return float(np.mean(selected)) if selected else None

    @property
    def ratio_inside_window(self) -> Optional[float]:
        return self._niah_mean(True, "full_ratio")

    @property
    def ratio_outside_window(self) -> Optional[float]:
        return self._niah_mean(False, "full_ratio")

    @property
    def accuracy_inside_window(self) -> Optional[float]:
        return self._niah_mean(True, "retrieved")

    @property
    def accuracy_outside_window(self) -> Optional[float]:
        return self._niah_mean(False, "retrieved")


def run_niah_instance(model: SwiAttnModel, instance: NiahInstance) -> NiahOutcome:
    """
    Prefills the prompt without its final ANSWER marker, then decodes the marker and the true answer
    tokens one by one, so every answer token is produced by a decode step.
    """
    session = InferenceSession(model)
    session.prefill(instance.prompt[:-1])
    fed = np.concatenate([instance.prompt[-1:], instance.answer[:-1]])
    predictions = []
    for token in fed:
        predictions.append(int(np.argmax(session.decode_step(int(token)))))
    n_layers = model.config.n_layers
    answer_gates = np.array([r.hard_gate for r in session.gate_log], dtype=np.float64).reshape(len(fed), n_layers)
    prefill_gates = np.array([r.hard_gate for r in session.prefill_gate_log], dtype=np.float64).reshape(n_layers, -1)
    return NiahOutcome(instance, answer_gates, prefill_gates, np.array(predictions), list(session.gate_log))


def route_stats(
    model: SwiAttnModel,
    dataset: Union[np.ndarray, Sequence[NiahInstance]],
    history: Optional[Sequence[StepRecord]] = None,
) -> RouteStats:
    """
    Aggregates routing decisions of a model.

    :param dataset: Either token rows of shape (rows, T), whose every gate counts, or NIAH instances,
        whose answer-generation decode steps count.
    :param history: Training steps whose per-layer ratios become the ratio-vs-iteration series.
    """
    if not model.config.has_router:
        raise ConfigurationError(
            "attention_mode", f"routing statistics need a swiattn model, got {model.config.attention_mode.value}"
        )
    n_layers = model.config.n_layers
    outcomes: List[NiahOutcome] = []
    records: List[GateRecord] = []
    ratio_by_depth: Dict[Tuple[int, float], float] = {}

    if isinstance(dataset, np.ndarray):
        with no_grad():
            result = model.forward_train(dataset)
        for row in range(dataset.shape[0]):
            records.extend(result.gate_records(row))
    else:
        cells = defaultdict(list)
        for instance in dataset:
            outcome = run_niah_instance(model, instance)
            outcomes.append(outcome)
            cells[(instance.prompt_length, instance.depth_percent)].append(outcome.full_ratio)
            records.extend(outcome.gate_records)
        ratio_by_depth = {cell: float(np.mean(values)) for cell, values in cells.items()}

    ratios, counts = per_layer_ratios(records, n_layers)
    stats = RouteStats(
        layer_ratios=ratios,
        layer_token_counts=counts,
        ratio_by_iteration=[(r.step, list(r.layer_full_ratios)) for r in history or []],
        ratio_by_depth=ratio_by_depth,
        niah_outcomes=outcomes,
        records=records,
    )
    logger.info(f"Overall full attention ratio {stats.overall_ratio:.3f} over {sum(counts)} decisions")
    return stats


def measured_cost_report(model: SwiAttnModel, sequences: Sequence[np.ndarray]) -> CostReport:
    """
    Decode memory access under the gates the model actually chooses, as if every sequence were generated
    token by token. Steps at the same position are averaged over sequences and layers.
    Prefill and decode choose identical gates, so one forward pass per sequence gives the trace.

    :param sequences: Token rows, possibly of different lengths.
    """
    if len(sequences) == 0:
        raise EmptyCostReportError()
    report = CostReport(model.config.attention.window)
    with no_grad():
        for sequence in sequences:
            gates = model.forward_train(np.asarray(sequence)[None, :]).hard_gates[:, 0, :]
            for index in range(gates.shape[1]):
                report.record_decode(index + 1, gates[:, index])
    return report
