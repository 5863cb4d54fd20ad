"""Adam with bias correction, updating ParameterStore arrays in place."""

from __future__ import annotations

import numpy as np

from .params import ParameterStore


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = float(lr)
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, grads: dict) -> None:
        """Apply one update from a name -> gradient array dict; absent names are skipped."""
        self.t += 1
        for name, arr in self.store.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, np.float32).reshape(arr.shape)
            m = self._m.setdefault(name, np.zeros_like(arr))
            v = self._v.setdefault(name, np.zeros_like(arr))
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
