"""Small float64 MLPs with hand-written backprop, plus Adam.

Parameters of an :class:`Mlp` live in one flat vector so that many networks
can share a single buffer and a single optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatch

LEAK = 0.01


def leaky_relu(x):
    return np.where(x > 0, x, LEAK * x)


def param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class Mlp:
    """Fully connected net; leaky-ReLU hidden layers, identity output."""

    def __init__(self, sizes: Sequence[int], params: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ShapeMismatch(f"bad layer sizes {self.sizes}")
        n = param_count(self.sizes)
        if params is None:
            params = np.zeros(n)
        elif params.shape != (n,):
            raise ShapeMismatch(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self.weights, self.biases = [], []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(params[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(params[off:off + b])
            off += b
        if rng is not None:
            self.init(rng)

    def init(self, rng: np.random.Generator) -> None:
        # Glorot-uniform weights, zero biases
        for W, b in zip(self.weights, self.biases):
            a = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-a, a, size=W.shape)
            b[...] = 0.0

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cache(x)[0]

    def forward_cache(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"input width {x.shape[-1]} != {self.n_in}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            pre.append(a)
            h = a if k == last else leaky_relu(a)
            acts.append(h)
        return h, (acts, pre)

    def backward(self, cache, adjoint: np.ndarray):
        """Gradients of ``sum(adjoint * output)`` w.r.t. the flat parameters and the input."""
        acts, pre = cache
        adjoint = np.asarray(adjoint, dtype=float)
        if adjoint.shape != acts[-1].shape:
            raise ShapeMismatch(f"adjoint shape {adjoint.shape} != output {acts[-1].shape}")
        grads_W, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        delta = adjoint
        for k in range(len(self.weights) - 1, -1, -1):
            if k != len(self.weights) - 1:
                delta = delta * np.where(pre[k] > 0, 1.0, LEAK)
            inp = acts[k]
            if inp.ndim == 1:
                grads_W[k] = np.outer(inp, delta)
                grads_b[k] = delta.copy()
            else:
                grads_W[k] = inp.T @ delta
                grads_b[k] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
        flat = np.concatenate([np.concatenate([gw.ravel(), gb])
                               for gw, gb in zip(grads_W, grads_b)])
        return flat, delta

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes),
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    def load_dict(self, d: dict) -> None:
        if tuple(d["sizes"]) != self.sizes:
            raise ShapeMismatch(f"checkpoint sizes {d['sizes']} != {list(self.sizes)}")
        for W, b, w_src, b_src in zip(self.weights, self.biases, d["weights"], d["biases"]):
            W[...] = np.asarray(w_src, dtype=float)
            b[...] = np.asarray(b_src, dtype=float)

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls(d["sizes"])
        net.load_dict(d)
        return net


def mlp_forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def mlp_gradients(net: Mlp, x, adjoint):
    """Return ``(param_grad, input_grad)`` for output adjoint ``adjoint``."""
    _, cache = net.forward_cache(x)
    return net.backward(cache, adjoint)


@dataclass
class Adam:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def update(self, params: np.ndarray, grads: np.ndarray) -> None:
        """In-place bias-corrected Adam step."""
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise ShapeMismatch("parameter/gradient shape does not match optimizer state")
        self.step += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grads * grads
        mhat = self.m / (1 - self.beta1 ** self.step)
        vhat = self.v / (1 - self.beta2 ** self.step)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(state: Adam, params: np.ndarray, grads: np.ndarray) -> None:
    state.update(params, grads)
