"""Surrogate that wraps a known SCM: exact abduction, optional posterior spread.

Used as a reference model when checking the decision layer in isolation.
"""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from ..graph import descendants
from ..scm import Scm


class ExactSurrogate:
    def __init__(self, scm: Scm, posterior_std=0.0, label_width: int = 1,
                 normal_mean: Optional[np.ndarray] = None, normal_std=None,
                 y_std: float = 1.0):
        self.scm = scm
        self.graph = scm.graph
        self.label_width = label_width
        N = self.graph.node_count
        self.posterior_std = np.broadcast_to(np.asarray(posterior_std, float), (N,)).copy()
        self.normal_mean = np.zeros(N) if normal_mean is None else np.asarray(normal_mean, float)
        self.normal_std = np.ones(N) if normal_std is None else np.asarray(normal_std, float)
        self._y_std = float(y_std)

    @property
    def y_std(self) -> float:
        return self._y_std

    def abduct(self, full, u=None):
        full = np.atleast_2d(np.asarray(full, dtype=float))
        z = self.scm.abduct(full)
        with np.errstate(divide="ignore"):
            lv = np.broadcast_to(np.log(self.posterior_std ** 2), z.shape).copy()
        return z, lv

    def reconstruct(self, full, u=None, z=None):
        full = np.atleast_2d(np.asarray(full, dtype=float))
        if z is None:
            z, _ = self.abduct(full)
        return self.scm.propagate(z)

    def propagate(self, full, z, u, clamp: Mapping[int, float]):
        full = np.atleast_2d(np.asarray(full, dtype=float))
        out = np.broadcast_to(full, z.shape).copy()
        down = descendants(self.graph, clamp.keys())
        for i, v in clamp.items():
            out[:, i] = v
        for j in self.graph.order:
            if j in down:
                out[:, j] = self.scm.mechanism(j, out) + z[:, j]
        return out
