"""Named parameter containers with paired gradient and Adam moment buffers."""

from __future__ import annotations

import numpy as np


class StaleCacheError(RuntimeError):
    """Backward called with a cache that does not belong to the current parameters."""


class ParamSet:
    """Ordered name -> array mapping plus ``grads``, ``m`` and ``v`` of matching shapes."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.ascontiguousarray(v) for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0
        self.version = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def reset_optimizer(self) -> None:
        for k in self.params:
            self.m[k].fill(0)
            self.v[k].fill(0)
        self.step = 0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            np.copyto(self.params[k], v)
        self.version += 1

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])
