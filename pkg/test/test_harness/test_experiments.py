"""
Desk-scale reproductions of the routing behaviour. Each run trains for minutes on a CPU and is deselected by default.
"""

from pathlib import Path

import numpy as np
import pytest

from switch_attention.harness.configuration import load_experiment
from switch_attention.harness.route_stats import route_stats
from switch_attention.harness.synthetic_data import BatchStream, Vocabulary, niah_sweep
from switch_attention.harness.training import cpt_swiattn, evaluate_lm_loss, pretrain_full
from switch_attention.model.config import AttentionMode

pytestmark = pytest.mark.slow

DESK_CONFIG = Path(__file__).parents[2] / "resources" / "configs" / "desk.json"


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    config = load_experiment(DESK_CONFIG)
    out = tmp_path_factory.mktemp("desk")
    donor = pretrain_full(config.donor_model, config.pretrain, config.data, out / "donor").model
    routed = cpt_swiattn(donor, config.model, config.cpt, config.data, out / "swiattn")
    control = cpt_swiattn(
        donor, config.model.with_attention_mode(AttentionMode.FULL_ONLY), config.cpt, config.data, out / "full"
    )
    return config, donor, routed, control


def test_continual_pretraining_keeps_quality_with_few_full_layers(desk_runs):
    config, donor, routed, control = desk_runs
    stream = BatchStream(Vocabulary(config.model.vocab_size), config.data, config.cpt.batch_size, config.cpt.seq_len)
    batches = stream.evaluation_batches(config.data.eval_batches)
    routed_loss = evaluate_lm_loss(routed.model, batches)
    control_loss = evaluate_lm_loss(control.model, batches)
    assert routed_loss <= 1.1 * control_loss

    ratios = np.array([record.full_ratio for record in routed.history])
    assert ratios[-1] < 0.6
    assert ratios[-500:].std() < 0.05


def test_far_needles_use_more_full_attention(desk_runs):
    config, _, routed, _ = desk_runs
    model = routed.model
    instances = niah_sweep(Vocabulary(model.config.vocab_size), config.data, model.config.attention.window, seed=1)
    stats = route_stats(model, instances)
    assert stats.ratio_outside_window > stats.ratio_inside_window
    assert stats.accuracy_inside_window >= 0.95
    assert stats.accuracy_outside_window >= 0.8
