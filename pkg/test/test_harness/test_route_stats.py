import numpy as np
import pytest

from switch_attention.exceptions import ConfigurationError, EmptyCostReportError
from switch_attention.harness.route_stats import (
    RouteStats,
    measured_cost_report,
    per_layer_ratios,
    route_stats,
    run_niah_instance,
)
from switch_attention.harness.synthetic_data import DataConfig, Vocabulary, niah_sweep
from switch_attention.harness.training import StepRecord
from switch_attention.layers.routing import GateRecord
from switch_attention.numerics.tensor import no_grad
from switch_attention.testing import mixed_gate_model, toy_donor


def record(layer: int, gate: int) -> GateRecord:
    return GateRecord(layer=layer, token_index=0, logit=0.0, soft_gate=float(gate), hard_gate=gate)


def test_per_layer_ratios():
    ratios, counts = per_layer_ratios([record(0, 1), record(0, 0), record(2, 1)], n_layers=3)
    assert ratios == [0.5, 0.0, 1.0]
    assert counts == [2, 0, 1]


def test_overall_ratio_is_token_weighted():
    stats = RouteStats(layer_ratios=[0.5, 1.0], layer_token_counts=[2, 6])
    assert stats.overall_ratio == pytest.approx(7 / 8)
    assert RouteStats([0.0], [0]).overall_ratio == 0.0
    with pytest.raises(ConfigurationError):
        RouteStats([1.5], [1])


def test_corpus_statistics_count_every_gate(mixed_gate_model):
    model, tokens = mixed_gate_model
    rows = np.concatenate([tokens, tokens[:, ::-1]])
    stats = route_stats(model, rows)
    with no_grad():
        gates = model.forward_train(rows).hard_gates
    assert stats.layer_token_counts == [rows.size] * model.config.n_layers
    assert np.allclose(stats.layer_ratios, gates.mean(axis=(1, 2)))
    assert stats.overall_ratio == pytest.approx(gates.mean())
    assert stats.niah_outcomes == []


def niah_instances(model):
    config = DataConfig(niah_context_lengths=[12], niah_depths=[0.0, 100.0], niah_samples=2)
    return niah_sweep(Vocabulary(model.config.vocab_size), config, model.config.attention.window, seed=0)


def test_niah_outcome_uses_decode_steps(mixed_gate_model):
    model, _ = mixed_gate_model
    instance = niah_instances(model)[0]
    outcome = run_niah_instance(model, instance)
    n_layers = model.config.n_layers
    assert outcome.answer_gates.shape == (len(instance.answer), n_layers)
    assert outcome.prefill_gates.shape == (n_layers, instance.prompt_length - 1)
    assert outcome.predicted.shape == instance.answer.shape
    assert [r.token_index for r in outcome.gate_records[::n_layers]] == list(
        range(instance.prompt_length - 1, instance.prompt_length - 1 + len(instance.answer))
    )
    assert outcome.full_ratio == pytest.approx(outcome.answer_gates.mean())
    assert outcome.retrieved == bool(np.array_equal(outcome.predicted, instance.answer))


def test_niah_statistics(mixed_gate_model):
    model, _ = mixed_gate_model
    instances = niah_instances(model)
    stats = route_stats(model, instances)
    assert len(stats.niah_outcomes) == 4
    assert set(stats.ratio_by_depth) == {(12, 0.0), (12, 100.0)}
    assert stats.layer_token_counts == [4 * 2] * model.config.n_layers
    assert not any(o.instance.inside_window for o in stats.niah_outcomes)
    assert stats.ratio_inside_window is None
    assert stats.ratio_outside_window == pytest.approx(np.mean([o.full_ratio for o in stats.niah_outcomes]))
    assert stats.accuracy_outside_window == pytest.approx(np.mean([o.retrieved for o in stats.niah_outcomes]))


def test_training_history_becomes_a_series(mixed_gate_model):
    model, tokens = mixed_gate_model
    history = [
        StepRecord(step, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5, [1.0, 0.0], 0.0, 1.0) for step in range(3)
    ]
    stats = route_stats(model, tokens, history)
    assert stats.ratio_by_iteration == [(0, [1.0, 0.0]), (1, [1.0, 0.0]), (2, [1.0, 0.0])]


def test_fixed_models_have_no_routing_statistics(toy_donor):
    with pytest.raises(ConfigurationError):
        route_stats(toy_donor, np.zeros((1, 4), dtype=int))


def test_measured_costs_follow_the_chosen_gates(mixed_gate_model):
    model, tokens = mixed_gate_model
    window = model.config.attention.window
    report = measured_cost_report(model, [tokens[0], tokens[0][:5]])
    with no_grad():
        gates = model.forward_train(tokens).hard_gates[:, 0]
    access = report.mean_access_by_position()
    assert sorted(access) == list(range(1, tokens.shape[1] + 1))
    position = tokens.shape[1]
    expected = np.mean([position if g == 1.0 else window for g in gates[:, -1]])
    assert access[position] == pytest.approx(expected)
    assert access[2] == 2.0
    with pytest.raises(EmptyCostReportError):
        measured_cost_report(model, [])


def set_router_bias(model, bias: float):
    for layer in model.layers:
        layer.router.bias.data[...] = bias


@pytest.mark.parametrize("bias, ratio", [(100.0, 1.0), (-100.0, 0.0)])
def test_saturated_router_bias_fixes_every_ratio(mixed_gate_model, bias, ratio):
    model, tokens = mixed_gate_model
    set_router_bias(model, bias)
    stats = route_stats(model, tokens)
    assert stats.layer_ratios == [ratio] * model.config.n_layers
    assert stats.overall_ratio == ratio
    niah_stats = route_stats(model, niah_instances(model))
    assert niah_stats.layer_ratios == [ratio] * model.config.n_layers


def test_first_layer_ratio_grows_with_the_router_bias(mixed_gate_model):
    model, tokens = mixed_gate_model
    ratios = []
    for bias in np.linspace(-60.0, 60.0, 41):
        set_router_bias(model, bias)
        ratios.append(route_stats(model, tokens).layer_ratios[0])
    assert np.all(np.diff(ratios) >= 0)
    assert ratios[0] == 0.0 and ratios[-1] == 1.0
