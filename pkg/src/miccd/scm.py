"""Ground-truth additive-noise SCMs: graph generation, anomaly injection,
ancestral sampling and the exact counterfactual oracle."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (GenerationFailed, InterventionOnTarget, LengthMismatch,
                     ThresholdUnset)
from .graph import CausalGraph, ancestors, build_graph, graph_from_dict

STRENGTH_RANGES = {
    "weak": (0.1, 0.5),
    "medium": (0.5, 1.0),
    "strong": (1.0, 2.0),
}
NONLINEARITIES = ("identity", "tanh")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) stream derived from ``seed`` and string/int keys.

    Distinct keys give statistically independent streams, so each stochastic
    step can be re-run in isolation.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little"))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class NoiseSpec:
    mu: np.ndarray
    sigma: np.ndarray
    mu_anom: np.ndarray
    sigma_anom: np.ndarray

    def __post_init__(self):
        if np.any(self.sigma <= 0) or np.any(self.sigma_anom <= 0):
            raise ValueError("noise standard deviations must be positive")


@dataclass(frozen=True)
class AnomalyPattern:
    pattern_id: int
    variable: int
    mu: float
    sigma: float


@dataclass(frozen=True)
class Scm:
    """Additive-noise SCM: ``X_j = sum_k w_jk * phi(PA_jk) + Z_j``."""

    graph: CausalGraph
    weights: tuple  # one np.ndarray per node, aligned with graph.parents[j]
    noise: NoiseSpec
    nonlinearity: str = "identity"
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.graph.target != self.graph.node_count - 1:
            raise ValueError("SCMs expect the target to be the last node")
        if len(self.weights) != self.graph.node_count:
            raise ValueError("one weight vector per node required")
        for j, w in enumerate(self.weights):
            if len(w) != len(self.graph.parents[j]):
                raise ValueError(f"node {j}: weight count != parent count")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def d(self) -> int:
        return self.graph.d

    def with_threshold(self, t: float) -> "Scm":
        if not np.isfinite(t):
            raise ValueError("threshold must be finite")
        return replace(self, threshold=float(t))

    def phi(self, v):
        return np.tanh(v) if self.nonlinearity == "tanh" else v

    def mechanism(self, j: int, full: np.ndarray) -> np.ndarray:
        """Noise-free part of node ``j`` evaluated on rows of ``full``."""
        pa = self.graph.parents[j]
        if not pa:
            return np.zeros(full.shape[:-1])
        return self.phi(full[..., list(pa)]) @ self.weights[j]

    def propagate(self, z: np.ndarray, clamp: Optional[Mapping[int, float]] = None
                  ) -> np.ndarray:
        """Ancestral pass over noise rows ``z`` (shape (..., N)); clamped nodes
        ignore their parents and noise."""
        clamp = clamp or {}
        full = np.zeros_like(z, dtype=float)
        for j in self.graph.order:
            if j in clamp:
                full[..., j] = clamp[j]
            else:
                full[..., j] = self.mechanism(j, full) + z[..., j]
        return full

    def abduct(self, full: np.ndarray) -> np.ndarray:
        """Exact noise recovery for additive mechanisms."""
        z = np.empty_like(full, dtype=float)
        for j in range(self.graph.node_count):
            z[..., j] = full[..., j] - self.mechanism(j, full)
        return z

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.to_dict(),
            "weights": [[float(v) for v in w] for w in self.weights],
            "nonlinearity": self.nonlinearity,
            "noise": {
                "mu": [float(v) for v in self.noise.mu],
                "sigma": [float(v) for v in self.noise.sigma],
                "mu_anom": [float(v) for v in self.noise.mu_anom],
                "sigma_anom": [float(v) for v in self.noise.sigma_anom],
            },
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scm":
        nz = d["noise"]
        return cls(
            graph=graph_from_dict(d["graph"]),
            weights=tuple(np.asarray(w, dtype=float) for w in d["weights"]),
            noise=NoiseSpec(*(np.asarray(nz[k], dtype=float)
                              for k in ("mu", "sigma", "mu_anom", "sigma_anom"))),
            nonlinearity=d.get("nonlinearity", "identity"),
            threshold=d.get("threshold"),
        )


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    Z_true: np.ndarray
    pattern_id: np.ndarray
    root_cause: np.ndarray
    y_abnormal: np.ndarray

    def __post_init__(self):
        n = self.X.shape[0]
        for name in ("y", "Z_true", "pattern_id", "root_cause", "y_abnormal"):
            if getattr(self, name).shape[0] != n:
                raise LengthMismatch(f"{name} has {getattr(self, name).shape[0]} rows, X has {n}")

    def __len__(self):
        return self.X.shape[0]

    @property
    def full(self) -> np.ndarray:
        """Rows of ``[x_1..x_d, y]`` in node order."""
        return np.column_stack([self.X, self.y])

    def subset(self, rows) -> "LabeledDataset":
        return LabeledDataset(self.X[rows], self.y[rows], self.Z_true[rows],
                              self.pattern_id[rows], self.root_cause[rows],
                              self.y_abnormal[rows])


def chain_graph(n: int) -> CausalGraph:
    return build_graph(n + 1, [(i, i + 1) for i in range(n)], n)


def generate_random_graph(n: int, structure: str = "chain", sparsity: float = 0.2,
                          seed: int = 0, max_tries: int = 100,
                          min_ancestors: int = 1) -> CausalGraph:
    """``n`` variables plus a target at index ``n``.

    ``random`` draws a causal permutation of the variables (target last) and
    keeps each forward pair with probability ``sparsity``; draws where the
    target has fewer than ``min_ancestors`` ancestors are rejected.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 1 <= min_ancestors <= n:
        raise ValueError("min_ancestors must lie in [1, n]")
    if structure == "chain":
        return chain_graph(n)
    if structure != "random":
        raise ValueError(f"unknown structure {structure!r}")
    if not 0 < sparsity < 1:
        raise ValueError("sparsity must lie in (0, 1)")
    rng = make_rng(seed, "graph")
    for _ in range(max_tries):
        perm = list(rng.permutation(n)) + [n]
        edges = []
        for a in range(n + 1):
            for b in range(a + 1, n + 1):
                if rng.random() < sparsity:
                    edges.append((int(perm[a]), int(perm[b])))
        g = build_graph(n + 1, edges, n)
        if len(ancestors(g, [n])) >= min_ancestors:
            return g
    raise GenerationFailed(f"no graph with {min_ancestors} target ancestors "
                           f"after {max_tries} draws")


def sample_mechanisms(g: CausalGraph, strength: str = "medium",
                      nonlinearity: str = "identity", seed: int = 0,
                      shift: float = 4.0, scale: float = 1.0) -> Scm:
    lo, hi = STRENGTH_RANGES[strength]
    rng = make_rng(seed, "mechanisms")
    weights = []
    for j in range(g.node_count):
        k = len(g.parents[j])
        mag = rng.uniform(lo, hi, size=k)
        sign = rng.choice([-1.0, 1.0], size=k)
        weights.append(mag * sign)
    N = g.node_count
    mu = np.zeros(N)
    sigma = np.ones(N)
    noise = NoiseSpec(mu, sigma, mu + shift * sigma, scale * sigma)
    return Scm(g, tuple(weights), noise, nonlinearity)


def total_effect_sign(scm: Scm, i: int) -> float:
    """Sign of the change in Y when node ``i`` moves up by one, at zero noise."""
    z = np.zeros(scm.graph.node_count)
    base = scm.propagate(z, {i: 0.0})[scm.graph.target]
    up = scm.propagate(z, {i: 1.0})[scm.graph.target]
    return 1.0 if up >= base else -1.0


def make_patterns(scm: Scm, count: int, seed: int = 0) -> list:
    """Pick ``count`` distinct ancestors of Y and perturb their noise.

    The mean shift is oriented so the pattern raises Y, otherwise the pattern
    would never produce an abnormal target.
    """
    g = scm.graph
    pool = sorted(ancestors(g, [g.target]))
    if count > len(pool):
        raise ValueError(f"{count} patterns requested but Y has {len(pool)} ancestors")
    rng = make_rng(seed, "patterns")
    chosen = sorted(int(v) for v in rng.choice(pool, size=count, replace=False))
    out = []
    for pid, v in enumerate(chosen):
        shift = scm.noise.mu_anom[v] - scm.noise.mu[v]
        mu = scm.noise.mu[v] + total_effect_sign(scm, v) * shift
        out.append(AnomalyPattern(pid, v, float(mu), float(scm.noise.sigma_anom[v])))
    return out


def compute_threshold(scm: Scm, q: float = 0.95, n: int = 10000, seed: int = 0) -> float:
    """Empirical ``q``-quantile of Y under the normal noise regime."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    rng = make_rng(seed, "threshold")
    N = scm.graph.node_count
    z = rng.normal(scm.noise.mu, scm.noise.sigma, size=(n, N))
    y = scm.propagate(z)[:, scm.graph.target]
    return float(np.quantile(y, q))


def simulate_dataset(scm: Scm, patterns: Sequence[AnomalyPattern],
                     n_per_pattern: int, n_normal: int, seed: int = 0,
                     stream: str = "simulate") -> LabeledDataset:
    """Normal block first, then one block per pattern, in pattern order."""
    if scm.threshold is None:
        raise ThresholdUnset("call compute_threshold and with_threshold first")
    N = scm.graph.node_count
    rng = make_rng(seed, stream)
    blocks, pids, roots = [], [], []
    z = rng.normal(scm.noise.mu, scm.noise.sigma, size=(n_normal, N))
    blocks.append(z)
    pids.append(np.full(n_normal, -1))
    roots.append(np.full(n_normal, -1))
    for p in patterns:
        if p.variable == scm.graph.target:
            raise InterventionOnTarget("anomaly patterns may not perturb the target")
        z = rng.normal(scm.noise.mu, scm.noise.sigma, size=(n_per_pattern, N))
        z[:, p.variable] = rng.normal(p.mu, p.sigma, size=n_per_pattern)
        blocks.append(z)
        pids.append(np.full(n_per_pattern, p.pattern_id))
        roots.append(np.full(n_per_pattern, p.variable))
    Z = np.vstack(blocks)
    full = scm.propagate(Z)
    y = full[:, scm.graph.target]
    return LabeledDataset(
        X=full[:, :scm.d],
        y=y,
        Z_true=Z,
        pattern_id=np.concatenate(pids).astype(int),
        root_cause=np.concatenate(roots).astype(int),
        y_abnormal=(y > scm.threshold).astype(int),
    )


def oracle_counterfactual(scm: Scm, z_true: np.ndarray,
                          interventions: Mapping[int, float]) -> np.ndarray:
    """Counterfactual node vector under hard interventions, reusing ``z_true``."""
    z_true = np.asarray(z_true, dtype=float)
    if z_true.shape[-1] != scm.graph.node_count:
        raise LengthMismatch(f"noise vector needs {scm.graph.node_count} entries")
    if scm.graph.target in interventions:
        raise InterventionOnTarget("the target cannot be intervened on")
    return scm.propagate(z_true, {int(k): float(v) for k, v in interventions.items()})


# -- serialization ---------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def save_scm(scm: Scm, path) -> None:
    Path(path).write_text(json.dumps(scm.to_dict(), sort_keys=True, indent=1) + "\n")


def load_scm(path) -> Scm:
    return Scm.from_dict(json.loads(Path(path).read_text()))


def save_dataset(ds: LabeledDataset, path, noise_path=None, extra: Optional[dict] = None) -> None:
    d = ds.X.shape[1]
    header = [f"x_{i + 1}" for i in range(d)] + ["y", "pattern_id", "root_cause", "y_abnormal"]
    extra = extra or {}
    header += list(extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(len(ds)):
            row = [_fmt(v) for v in ds.X[r]] + [_fmt(ds.y[r]), int(ds.pattern_id[r]),
                                                 int(ds.root_cause[r]), int(ds.y_abnormal[r])]
            row += [int(col[r]) for col in extra.values()]
            w.writerow(row)
    if noise_path is not None:
        with open(noise_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"z_{i + 1}" for i in range(d + 1)])
            for r in range(len(ds)):
                w.writerow([_fmt(v) for v in ds.Z_true[r]])


def load_dataset(path, noise_path=None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x_"))
    arr = np.array(body, dtype=float).reshape(len(body), len(header))
    if noise_path is not None:
        with open(noise_path, newline="") as fh:
            zrows = list(csv.reader(fh))[1:]
        Z = np.array(zrows, dtype=float).reshape(len(zrows), d + 1)
    else:
        Z = np.full((len(body), d + 1), np.nan)
    return LabeledDataset(
        X=arr[:, :d], y=arr[:, d], Z_true=Z,
        pattern_id=arr[:, d + 1].astype(int), root_cause=arr[:, d + 2].astype(int),
        y_abnormal=arr[:, d + 3].astype(int))
