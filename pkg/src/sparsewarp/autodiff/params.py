"""Named trainable tensors with seeded initialization and flat (de)serialization."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .engine import Node, leaf


class ParameterStore:
    """Ordered name -> float32 array map shared by training and inference.

    Arrays are the single source of truth; `leaves` wraps them as graph inputs
    (fresh Node objects per call, graphs are single-use).
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._arrays: dict[str, np.ndarray] = {}

    def create(self, name: str, shape, init: str = "kaiming", fan_in: int | None = None) -> np.ndarray:
        if name in self._arrays:
            raise InvalidInputError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "kaiming":
            fan = int(fan_in) if fan_in is not None else shape[0]
            limit = float(np.sqrt(6.0 / max(fan, 1)))
            arr = self._rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif init == "zeros":
            arr = np.zeros(shape, np.float32)
        else:
            raise InvalidInputError(f"unknown init {init!r}")
        self._arrays[name] = arr
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def count(self) -> int:
        """Total scalar parameter count."""
        return int(sum(a.size for a in self._arrays.values()))

    def leaves(self, dtype=np.float32) -> dict:
        """Fresh trainable leaf nodes over the current arrays."""
        return {k: leaf(v, requires_grad=True, dtype=dtype) for k, v in self._arrays.items()}

    def flat(self) -> np.ndarray:
        """All parameters concatenated in creation order, float32."""
        if not self._arrays:
            return np.zeros(0, np.float32)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, np.float32).ravel()
        if vec.size != self.count():
            raise InvalidInputError(f"flat vector has {vec.size} values, store holds {self.count()}")
        off = 0
        for name, arr in self._arrays.items():
            n = arr.size
            self._arrays[name] = vec[off:off + n].reshape(arr.shape).copy()
            off += n

    def copy(self) -> "ParameterStore":
        dup = ParameterStore(self.seed)
        dup._arrays = {k: v.copy() for k, v in self._arrays.items()}
        return dup
