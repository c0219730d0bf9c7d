"""
Synthetic byte-level tasks.

The corpus mixes rows that only need local context (short periodic patterns) with rows that need
long-range recall (a key-value needle planted in random filler and queried at the end), so a router
is pushed towards both branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from random_events.utils import SubclassJSONSerializer
from typing_extensions import Any, Dict, List, Optional, Self, Tuple

from ..exceptions import ConfigurationError, NiahConstructionError

PAD, BOS, SEP, NEEDLE, QUERY, ANSWER, EOS = range(7)
SPECIAL_TOKEN_COUNT = 7


class TaskKind(Enum):
    LM_CORPUS = "lm_corpus"
    COPY = "copy"
    INDUCTION = "induction"
    NIAH = "niah"


@dataclass(frozen=True)
class Vocabulary:
    """
    Splits the ids after the special tokens into three equally sized ranges: needle keys, needle values and filler.
    """

    size: int

    def __post_init__(self):
        if self.size < SPECIAL_TOKEN_COUNT + 6:
            raise ConfigurationError("vocab_size", f"synthetic tasks need at least 13 ids, got {self.size}")

    @property
    def range_width(self) -> int:
        return (self.size - SPECIAL_TOKEN_COUNT) // 3

    @property
    def keys(self) -> Tuple[int, int]:
        return SPECIAL_TOKEN_COUNT, SPECIAL_TOKEN_COUNT + self.range_width

    @property
    def values(self) -> Tuple[int, int]:
        start = SPECIAL_TOKEN_COUNT + self.range_width
        return start, start + self.range_width

    @property
    def filler(self) -> Tuple[int, int]:
        return SPECIAL_TOKEN_COUNT + 2 * self.range_width, self.size


@dataclass
class DataConfig(SubclassJSONSerializer):
    task: TaskKind = TaskKind.LM_CORPUS
    recall_fraction: float = 0.5
    """
    Share of key-value recall rows in the lm_corpus mixture, the rest are periodic rows.
    """

    min_period: int = 2
    max_period: int = 6
    key_length: int = 2
    value_length: int = 2
    copy_pool_size: int = 16
    """
    Number of distinct sequences of the copy task.
    """

    niah_context_lengths: List[int] = field(default_factory=lambda: [32, 48, 64])
    niah_depths: List[float] = field(default_factory=lambda: [0.0, 25.0, 50.0, 75.0, 100.0])
    niah_samples: int = 4
    """
    Instances per (context length, depth) cell of the sweep.
    """

    eval_batches: int = 4

    def __post_init__(self):
        if isinstance(self.task, str):
            self.task = TaskKind(self.task)
        if not 0.0 <= self.recall_fraction <= 1.0:
            raise ConfigurationError("recall_fraction", f"must lie in [0, 1], got {self.recall_fraction}")
        if not 1 <= self.min_period <= self.max_period:
            raise ConfigurationError("min_period/max_period", "need 1 <= min_period <= max_period")
        if self.key_length < 1 or self.value_length < 1:
            raise ConfigurationError("key_length/value_length", "must be >= 1")

    def to_json(self) -> Dict[str, Any]:
        result = {**super().to_json(), **{name: getattr(self, name) for name in self.__dataclass_fields__}}
        result["task"] = self.task.value
        return result

    @classmethod
    def _from_json(cls, data: Dict[str, Any], **kwargs) -> Self:
        data = {k: v for k, v in data.items() if k != "type"}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError("data", f"unknown keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class SyntheticBatch:
    tokens: np.ndarray
    """
    Shape (batch, T).
    """

    score_mask: Optional[np.ndarray] = None
    """
    True for tokens that are predictable by construction; evaluation scores only these. None scores all.
    """


@dataclass
class NiahInstance:
    """
    A needle-in-a-haystack retrieval task: BOS, filler with one planted needle, a query, then the answer and EOS.
    """

    tokens: np.ndarray
    """
    The whole sequence, prompt followed by answer and EOS.
    """

    prompt_length: int
    """
    Length of the prompt, which ends with the ANSWER marker of the query.
    """

    answer: np.ndarray
    needle_start: int
    depth_percent: float
    window: int

    @property
    def prompt(self) -> np.ndarray:
        return self.tokens[: self.prompt_length]

    @property
    def answer_span(self) -> Tuple[int, int]:
        return self.prompt_length, self.prompt_length + len(self.answer)

    @property
    def needle_distance(self) -> int:
        """
        Distance from the first answer-generating position back to the needle's first token.
        """
        return self.prompt_length - 1 - self.needle_start

    @property
    def inside_window(self) -> bool:
        return self.needle_distance < self.window

    def planted_value(self, key_length: int) -> np.ndarray:
        """
        The value tokens as they appear inside the needle.
        """
        start = self.needle_start + 2 + key_length
        return self.tokens[start : start + len(self.answer)]


def make_niah(
    vocabulary: Vocabulary,
    context_length: int,
    depth_percent: float,
    window: int,
    rng: np.random.Generator,
    key_length: int = 2,
    value_length: int = 2,
) -> NiahInstance:
    """
    :param context_length: Length of the prompt, BOS and query included.
    :param depth_percent: 0 puts the needle right after BOS, 100 puts it right before the query.
    :param window: Sliding window of the evaluated model, recorded to classify the instance.
    """
    if not 0.0 <= depth_percent <= 100.0:
        raise NiahConstructionError(f"depth {depth_percent}% is outside [0, 100]")
    key = rng.integers(*vocabulary.keys, size=key_length)
    value = rng.integers(*vocabulary.values, size=value_length)
    needle = np.concatenate([[NEEDLE], key, [ANSWER], value])
    query = np.concatenate([[QUERY], key, [ANSWER]])
    haystack_length = context_length - 1 - len(query)
    if haystack_length < len(needle):
        raise NiahConstructionError(
            f"context of {context_length} tokens cannot hold a {len(needle)}-token needle and a {len(query)}-token query"
        )
    haystack = rng.integers(*vocabulary.filler, size=haystack_length)
    offset = int(round(depth_percent / 100.0 * (haystack_length - len(needle))))
    haystack[offset : offset + len(needle)] = needle
    tokens = np.concatenate([[BOS], haystack, query, value, [EOS]]).astype(np.int64)
    return NiahInstance(
        tokens=tokens,
        prompt_length=context_length,
        answer=value.astype(np.int64),
        needle_start=1 + offset,
        depth_percent=depth_percent,
        window=window,
    )


def niah_sweep(
    vocabulary: Vocabulary, data_config: DataConfig, window: int, seed: int
) -> List[NiahInstance]:
    """
    Instances for every (context length, depth) cell, ordered by cell and then by sample index.
    """
    rng = np.random.default_rng(seed)
    return [
        make_niah(vocabulary, length, depth, window, rng, data_config.key_length, data_config.value_length)
        for length in data_config.niah_context_lengths
        for depth in data_config.niah_depths
        for _ in range(data_config.niah_samples)
    ]


def periodic_row(vocabulary: Vocabulary, length: int, data_config: DataConfig, rng: np.random.Generator) -> np.ndarray:
    period = int(rng.integers(data_config.min_period, data_config.max_period + 1))
    pattern = rng.integers(*vocabulary.filler, size=period)
    return np.concatenate([[BOS], np.resize(pattern, length - 1)]).astype(np.int64)


def recall_row(
    vocabulary: Vocabulary, length: int, data_config: DataConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    :return: A NIAH sequence of exactly `length` tokens at a random depth, and its score mask (answer and EOS).
    """
    context_length = length - data_config.value_length - 1
    instance = make_niah(
        vocabulary,
        context_length,
        float(rng.uniform(0.0, 100.0)),
        window=0,
        rng=rng,
        key_length=data_config.key_length,
        value_length=data_config.value_length,
    )
    mask = np.zeros(length, dtype=bool)
    mask[instance.prompt_length :] = True
    return instance.tokens, mask


def copy_pool(vocabulary: Vocabulary, length: int, data_config: DataConfig, seed: int) -> np.ndarray:
    """
    The fixed set of copy-task rows: BOS, a random segment, SEP and the same segment again.
    """
    rng = np.random.default_rng(seed)
    segment_length = (length - 2) // 2
    rows = []
    for _ in range(data_config.copy_pool_size):
        segment = rng.integers(*vocabulary.filler, size=segment_length)
        row = np.concatenate([[BOS], segment, [SEP], segment])
        rows.append(np.concatenate([row, np.full(length - len(row), EOS)]))
    return np.array(rows, dtype=np.int64)


@dataclass
class BatchStream:
    """
    Deterministic source of training and evaluation batches. Batch i depends only on the seed and i.
    """

    vocabulary: Vocabulary
    data_config: DataConfig
    batch_size: int
    seq_len: int
    seed: int = 0

    def batch(self, index: int) -> SyntheticBatch:
        rng = np.random.default_rng([self.seed, index])
        task = self.data_config.task
        if task is TaskKind.COPY:
            pool = copy_pool(self.vocabulary, self.seq_len, self.data_config, self.seed)
            tokens = pool[rng.integers(0, len(pool), size=self.batch_size)]
            segment_length = (self.seq_len - 2) // 2
            mask = np.zeros_like(tokens, dtype=bool)
            mask[:, segment_length + 2 : 2 * segment_length + 2] = True
            return SyntheticBatch(tokens, mask)
        if task is TaskKind.INDUCTION:
            half = (self.seq_len - 1) // 2
            prefix = rng.integers(*self.vocabulary.filler, size=(self.batch_size, half))
            tail = np.resize(prefix[:, :1], (self.batch_size, self.seq_len - 1 - 2 * half))
            tokens = np.concatenate(
                [np.full((self.batch_size, 1), BOS), prefix, prefix, tail], axis=1
            ).astype(np.int64)
            mask = np.zeros_like(tokens, dtype=bool)
            mask[:, 1 + half + 1 : 1 + 2 * half] = True
            return SyntheticBatch(tokens, mask)
        if task is TaskKind.NIAH:
            rows, masks = zip(*(recall_row(self.vocabulary, self.seq_len, self.data_config, rng) for _ in range(self.batch_size)))
            return SyntheticBatch(np.array(rows), np.array(masks))
        rows, masks = [], []
        for _ in range(self.batch_size):
            if rng.random() < self.data_config.recall_fraction:
                row, mask = recall_row(self.vocabulary, self.seq_len, self.data_config, rng)
            else:
                row = periodic_row(self.vocabulary, self.seq_len, self.data_config, rng)
                mask = np.zeros(self.seq_len, dtype=bool)
                mask[1 + 2 * self.data_config.max_period :] = True
            rows.append(row)
            masks.append(mask)
        return SyntheticBatch(np.array(rows), np.array(masks))

    def evaluation_batches(self, count: int) -> List[SyntheticBatch]:
        """
        Held-out batches, drawn from indices no training run reaches.
        """
        offset = 2**31
        return [self.batch(offset + i) for i in range(count)]
