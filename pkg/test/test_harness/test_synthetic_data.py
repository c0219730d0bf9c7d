import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from switch_attention.exceptions import ConfigurationError, NiahConstructionError
from switch_attention.harness.synthetic_data import (
    ANSWER,
    BOS,
    EOS,
    NEEDLE,
    QUERY,
    SEP,
    BatchStream,
    DataConfig,
    TaskKind,
    Vocabulary,
    make_niah,
    niah_sweep,
)

VOCABULARY = Vocabulary(32)


def test_vocabulary_ranges():
    assert VOCABULARY.keys == (7, 15)
    assert VOCABULARY.values == (15, 23)
    assert VOCABULARY.filler == (23, 32)
    with pytest.raises(ConfigurationError):
        Vocabulary(12)


@pytest.mark.parametrize("depth, needle_start", [(0.0, 1), (100.0, 10)])
def test_needle_placement(depth, needle_start):
    instance = make_niah(VOCABULARY, 20, depth, window=4, rng=np.random.default_rng(0))
    tokens = instance.tokens
    assert len(tokens) == 20 + 2 + 1
    assert tokens[0] == BOS and tokens[-1] == EOS
    assert instance.needle_start == needle_start
    assert tokens[needle_start] == NEEDLE
    assert instance.prompt[-1] == ANSWER
    assert instance.prompt[-4] == QUERY
    assert np.array_equal(instance.prompt[-3:-1], tokens[needle_start + 1 : needle_start + 3])
    assert np.array_equal(instance.planted_value(2), instance.answer)
    assert np.array_equal(tokens[slice(*instance.answer_span)], instance.answer)


def test_window_classification():
    rng = np.random.default_rng(1)
    late = make_niah(VOCABULARY, 20, 100.0, window=10, rng=rng)
    early = make_niah(VOCABULARY, 20, 0.0, window=10, rng=rng)
    assert late.needle_distance == 9 and late.inside_window
    assert early.needle_distance == 18 and not early.inside_window


@given(st.integers(11, 64), st.floats(0.0, 100.0), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_needle_always_fits_in_the_prompt(context_length, depth, seed):
    instance = make_niah(VOCABULARY, context_length, depth, window=8, rng=np.random.default_rng(seed))
    assert instance.prompt_length == context_length
    assert 1 <= instance.needle_start <= context_length - 4 - 6
    low, high = VOCABULARY.filler
    haystack = np.delete(instance.tokens[1 : context_length - 4], np.arange(instance.needle_start - 1, instance.needle_start + 5))
    assert np.all((haystack >= low) & (haystack < high))


def test_invalid_needles():
    rng = np.random.default_rng(2)
    with pytest.raises(NiahConstructionError):
        make_niah(VOCABULARY, 20, 101.0, window=4, rng=rng)
    with pytest.raises(NiahConstructionError):
        make_niah(VOCABULARY, 10, 50.0, window=4, rng=rng)


def test_niah_sweep_covers_every_cell():
    config = DataConfig(niah_context_lengths=[16, 24], niah_depths=[0.0, 50.0, 100.0], niah_samples=2)
    instances = niah_sweep(VOCABULARY, config, window=8, seed=3)
    assert len(instances) == 12
    assert [i.prompt_length for i in instances[:6]] == [16] * 6
    assert [i.depth_percent for i in instances[:6]] == [0.0, 0.0, 50.0, 50.0, 100.0, 100.0]
    again = niah_sweep(VOCABULARY, config, window=8, seed=3)
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(instances, again))


def test_batches_depend_only_on_seed_and_index():
    stream = BatchStream(VOCABULARY, DataConfig(), batch_size=4, seq_len=32, seed=5)
    first = stream.batch(3)
    assert first.tokens.shape == first.score_mask.shape == (4, 32)
    assert np.array_equal(first.tokens, BatchStream(VOCABULARY, DataConfig(), 4, 32, seed=5).batch(3).tokens)
    assert not np.array_equal(first.tokens, stream.batch(4).tokens)
    assert np.all((first.tokens >= 0) & (first.tokens < VOCABULARY.size))
    assert np.all(first.tokens[:, 0] == BOS)


def test_periodic_rows_repeat_their_pattern():
    config = DataConfig(recall_fraction=0.0, min_period=2, max_period=5)
    batch = BatchStream(VOCABULARY, config, batch_size=6, seq_len=24, seed=6).batch(0)
    for row, mask in zip(batch.tokens, batch.score_mask):
        assert any(np.array_equal(row[1 + p :], row[1:-p]) for p in range(2, 6))
        assert not mask[:11].any() and mask[11:].all()


def test_recall_rows_score_the_answer():
    config = DataConfig(task=TaskKind.NIAH)
    batch = BatchStream(VOCABULARY, config, batch_size=3, seq_len=24, seed=7).batch(0)
    assert np.all(batch.score_mask.sum(axis=1) == config.value_length + 1)
    assert np.all(batch.tokens[:, -1] == EOS)
    assert np.all(batch.score_mask[:, -1])


def test_copy_rows_repeat_their_segment():
    batch = BatchStream(VOCABULARY, DataConfig(task=TaskKind.COPY), batch_size=3, seq_len=20, seed=8).batch(0)
    segment = (20 - 2) // 2
    assert np.all(batch.tokens[:, segment + 1] == SEP)
    assert np.array_equal(batch.tokens[:, segment + 2 :], batch.tokens[:, 1 : segment + 1])
    assert np.array_equal(batch.score_mask, np.broadcast_to(np.arange(20) >= segment + 2, (3, 20)))


def test_induction_rows_repeat_their_prefix():
    batch = BatchStream(VOCABULARY, DataConfig(task=TaskKind.INDUCTION), batch_size=2, seq_len=17, seed=9).batch(0)
    half = 8
    assert np.array_equal(batch.tokens[:, 1 + half : 1 + 2 * half], batch.tokens[:, 1 : 1 + half])
    assert batch.score_mask[:, 1 + half + 1 : 1 + 2 * half].all()
    assert batch.score_mask.sum() == 2 * (half - 1)


def test_evaluation_batches_are_held_out():
    stream = BatchStream(VOCABULARY, DataConfig(), batch_size=2, seq_len=32, seed=10)
    held_out = stream.evaluation_batches(2)
    assert len(held_out) == 2
    assert not any(np.array_equal(held_out[0].tokens, stream.batch(i).tokens) for i in range(5))


def test_data_config_json():
    config = DataConfig(task=TaskKind.COPY, niah_depths=[0.0, 100.0])
    assert DataConfig.from_json(config.to_json()) == config
    assert DataConfig(task="niah").task is TaskKind.NIAH
    with pytest.raises(ConfigurationError):
        DataConfig(recall_fraction=1.5)
