from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from typing_extensions import Tuple

from ..exceptions import DimensionMismatchError

INITIAL_CAPACITY = 64


@dataclass
class LayerKVCache:
    """
    The one key/value store of a layer. The full branch reads all of it,
    the sliding-window branch reads its most recent rows.
    Rows are only ever appended.
    """

    n_kv_heads: int
    head_dim: int
    _keys: np.ndarray = field(init=False, repr=False)
    _values: np.ndarray = field(init=False, repr=False)
    _length: int = field(init=False, default=0)

    def __post_init__(self):
        self._keys = np.zeros((INITIAL_CAPACITY, self.n_kv_heads, self.head_dim))
        self._values = np.zeros_like(self._keys)

    def __len__(self) -> int:
        return self._length

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        """
        :param keys: Rotated keys of shape (n, n_kv_heads, head_dim).
        :param values: Values of the same shape.
        """
        expected = (self.n_kv_heads, self.head_dim)
        if keys.shape[1:] != expected or values.shape != keys.shape:
            raise DimensionMismatchError("LayerKVCache.append", expected, keys.shape[1:] + values.shape)
        needed = self._length + keys.shape[0]
        if needed > self._keys.shape[0]:
            capacity = max(needed, 2 * self._keys.shape[0])
            for name in ("_keys", "_values"):
                grown = np.zeros((capacity, self.n_kv_heads, self.head_dim))
                grown[: self._length] = getattr(self, name)[: self._length]
                setattr(self, name, grown)
        self._keys[self._length : needed] = keys
        self._values[self._length : needed] = values
        self._length = needed

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._length]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self._length]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self._length)

    def window_start(self, window: int) -> int:
        return max(0, self._length - window)

    def window_view(self, window: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        :return: Keys, values and positions of the last min(length, window) rows,
            a suffix of the full view of the same store.
        """
        start = self.window_start(window)
        return self.keys[start:], self.values[start:], self.positions[start:]

    def full_view(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.keys, self.values, self.positions
