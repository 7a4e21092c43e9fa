"""Graph-structured conditional VAE: one encoder/prior/decoder triple per node.

Node ``j`` sees only its parents, itself and the pattern label ``u``:

* encoder  q(z_j | x_PA, x_j, u)  -> (mean, log-variance)
* prior    p(z_j | x_PA, u)       -> (mean, log-variance)
* decoder  p(x_j | z_j, x_PA, u)  -> mean, fixed observation variance

All arithmetic happens on standardized variables; public methods take and
return original units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ..errors import NonFiniteLoss, ShapeMismatch
from ..graph import CausalGraph, descendants, graph_from_dict
from ..nn import Adam, Mlp, param_count
from ..scm import make_rng

LOG2PI = float(np.log(2 * np.pi))
LOGVAR_BOUND = 10.0
STD_FLOOR = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    hidden: Optional[int] = None   # None -> 50 for d <= 5, else 30
    depth: int = 3
    lr: float = 1e-3
    kl_weight: float = 1.0
    obs_var: float = 0.01
    prior_parents: bool = False
    decoder_label: bool = True
    seed: int = 0

    def hidden_for(self, d: int) -> int:
        if self.hidden is not None:
            return int(self.hidden)
        return 50 if d <= 5 else 30

    def validate(self) -> None:
        for k in ("batch_size", "epochs", "depth", "lr", "obs_var"):
            if getattr(self, k) <= 0:
                raise ValueError(f"train config field {k} must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")


def bounded_logvar(raw):
    return LOGVAR_BOUND * np.tanh(raw / LOGVAR_BOUND)


def bounded_logvar_grad(raw):
    return 1.0 - np.tanh(raw / LOGVAR_BOUND) ** 2


def gaussian_kl(mq, lvq, mp, lvp):
    """KL(N(mq, e^lvq) || N(mp, e^lvp)), elementwise."""
    return 0.5 * (lvp - lvq + (np.exp(lvq) + (mq - mp) ** 2) / np.exp(lvp) - 1.0)


@dataclass
class NodeModel:
    index: int
    parents: tuple
    encoder: Mlp
    prior: Mlp
    decoder: Mlp
    slices: tuple = field(repr=False)  # (enc, prior, dec) slices of the shared buffer


def _hidden_sizes(depth: int, hidden: int) -> list:
    return [hidden] * (depth - 1)


class SurrogateModel:
    """Per-node variational surrogate of an additive SCM."""

    def __init__(self, graph: CausalGraph, label_width: int, cfg: TrainConfig,
                 mean: np.ndarray, std: np.ndarray, normal_mean: Optional[np.ndarray] = None,
                 normal_std: Optional[np.ndarray] = None, init: bool = True):
        self.graph = graph
        self.label_width = int(label_width)
        self.cfg = cfg
        N = graph.node_count
        self.mean = np.asarray(mean, dtype=float).copy()
        self.std = np.maximum(np.asarray(std, dtype=float), STD_FLOOR)
        self.normal_mean = self.mean.copy() if normal_mean is None else np.asarray(normal_mean, float)
        self.normal_std = self.std.copy() if normal_std is None else np.asarray(normal_std, float)
        if self.mean.shape != (N,):
            raise ShapeMismatch("standardization stats must have one entry per node")
        hidden = _hidden_sizes(cfg.depth, cfg.hidden_for(graph.d))
        Ku = self.label_width
        layouts = []
        for j in range(N):
            p = len(graph.parents[j])
            pp = p if cfg.prior_parents else 0
            du = Ku if cfg.decoder_label else 0
            layouts.append(([p + 1 + Ku] + hidden + [2],
                            [pp + Ku] + hidden + [2],
                            [1 + p + du] + hidden + [1]))
        total = sum(param_count(s) for lay in layouts for s in lay)
        self.params = np.zeros(total)
        rng = make_rng(cfg.seed, "surrogate-init") if init else None
        self.nodes = []
        off = 0
        for j, lay in enumerate(layouts):
            nets, slices = [], []
            for sizes in lay:
                n = param_count(sizes)
                sl = slice(off, off + n)
                nets.append(Mlp(sizes, self.params[sl], rng=rng))
                slices.append(sl)
                off += n
            self.nodes.append(NodeModel(j, graph.parents[j], *nets, slices=tuple(slices)))

    # -- helpers ----------------------------------------------------------
    @property
    def y_std(self) -> float:
        return float(self.std[self.graph.target])

    def standardize(self, full):
        return (np.asarray(full, dtype=float) - self.mean) / self.std

    def destandardize(self, s):
        return s * self.std + self.mean

    def _check(self, full, u):
        full = np.atleast_2d(np.asarray(full, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if full.shape[1] != self.graph.node_count:
            raise ShapeMismatch(f"expected {self.graph.node_count} columns, got {full.shape[1]}")
        if u.shape[1] != self.label_width:
            raise ShapeMismatch(f"expected label width {self.label_width}, got {u.shape[1]}")
        if u.shape[0] == 1 and full.shape[0] > 1:
            u = np.repeat(u, full.shape[0], axis=0)
        if u.shape[0] != full.shape[0]:
            raise ShapeMismatch("label rows do not match data rows")
        return full, u

    @staticmethod
    def _cat(*parts):
        return np.concatenate([p if p.ndim == 2 else p[:, None] for p in parts], axis=1)

    def _encode(self, node, s, u):
        pa = list(node.parents)
        out = node.encoder.forward(self._cat(s[:, pa], s[:, node.index], u))
        return out[:, 0], bounded_logvar(out[:, 1])

    def _dec_in(self, node, z, s, u):
        pa = list(node.parents)
        if self.cfg.decoder_label:
            return self._cat(z, s[:, pa], u)
        return self._cat(z, s[:, pa])

    def _decode(self, node, z, s, u):
        return node.decoder.forward(self._dec_in(node, z, s, u))[:, 0]

    # -- objective --------------------------------------------------------
    def node_terms(self, j: int, s: np.ndarray, u: np.ndarray, eps: np.ndarray,
                   grad: Optional[np.ndarray] = None, scale: float = 1.0):
        """Batch-mean reconstruction log-density and KL for node ``j``.

        ``s`` is standardized. When ``grad`` is given, ``scale`` times the
        gradient of ``-(rec - kl_weight * kl)`` is accumulated into it.
        """
        node = self.nodes[j]
        pa = list(node.parents)
        n = s.shape[0]
        cfg = self.cfg
        enc_in = self._cat(s[:, pa], s[:, j], u)
        pri_in = self._cat(s[:, pa], u) if self.cfg.prior_parents else u
        e_out, e_cache = node.encoder.forward_cache(enc_in)
        p_out, p_cache = node.prior.forward_cache(pri_in)
        mq, lvq = e_out[:, 0], bounded_logvar(e_out[:, 1])
        mp, lvp = p_out[:, 0], bounded_logvar(p_out[:, 1])
        sq = np.exp(0.5 * lvq)
        z = mq + sq * eps
        xhat, d_cache = node.decoder.forward_cache(self._dec_in(node, z, s, u))
        resid = s[:, j] - xhat[:, 0]
        rec = -0.5 * (resid ** 2 / cfg.obs_var + np.log(cfg.obs_var) + LOG2PI)
        kl = gaussian_kl(mq, lvq, mp, lvp)
        if grad is not None:
            c = scale / n
            beta = cfg.kl_weight
            d_xhat = (-resid / cfg.obs_var)[:, None] * c
            g_dec, d_dec_in = node.decoder.backward(d_cache, d_xhat)
            dz = d_dec_in[:, 0]
            inv_p = np.exp(-lvp)
            diff = mq - mp
            d_mq = dz + beta * c * diff * inv_p
            d_lvq = dz * 0.5 * sq * eps + beta * c * 0.5 * (np.exp(lvq) * inv_p - 1.0)
            d_mp = -beta * c * diff * inv_p
            d_lvp = beta * c * 0.5 * (1.0 - (np.exp(lvq) + diff ** 2) * inv_p)
            e_adj = np.column_stack([d_mq, d_lvq * bounded_logvar_grad(e_out[:, 1])])
            p_adj = np.column_stack([d_mp, d_lvp * bounded_logvar_grad(p_out[:, 1])])
            g_enc, _ = node.encoder.backward(e_cache, e_adj)
            g_pri, _ = node.prior.backward(p_cache, p_adj)
            se, sp, sd = node.slices
            grad[se] += g_enc
            grad[sp] += g_pri
            grad[sd] += g_dec
        return float(rec.mean()), float(kl.mean())

    def loss(self, s, u, eps, grad=None) -> float:
        """Negative ELBO (batch mean, summed over nodes) on standardized data."""
        total = 0.0
        for j in range(self.graph.node_count):
            rec, kl = self.node_terms(j, s, u, eps[:, j], grad)
            total += -(rec - self.cfg.kl_weight * kl)
        return total

    def elbo(self, full, u, seed: int = 0) -> float:
        full, u = self._check(full, u)
        s = self.standardize(full)
        eps = make_rng(seed, "elbo-eval").standard_normal(s.shape)
        return -self.loss(s, u, eps)

    # -- inference --------------------------------------------------------
    def abduct(self, full, u):
        """Posterior means and log-variances of the latent noise, per node."""
        full, u = self._check(full, u)
        s = self.standardize(full)
        N = self.graph.node_count
        mq = np.empty((s.shape[0], N))
        lvq = np.empty((s.shape[0], N))
        for node in self.nodes:
            mq[:, node.index], lvq[:, node.index] = self._encode(node, s, u)
        return mq, lvq

    def reconstruct(self, full, u, z: Optional[np.ndarray] = None) -> np.ndarray:
        """Abduct, then decode in causal order feeding reconstructed parents."""
        full, u = self._check(full, u)
        if z is None:
            z, _ = self.abduct(full, u)
        s_hat = np.zeros_like(full)
        for j in self.graph.order:
            s_hat[:, j] = self._decode(self.nodes[j], z[:, j], s_hat, u)
        return self.destandardize(s_hat)

    def teacher_forced(self, full, u, z: Optional[np.ndarray] = None) -> np.ndarray:
        full, u = self._check(full, u)
        if z is None:
            z, _ = self.abduct(full, u)
        s = self.standardize(full)
        out = np.empty_like(s)
        for node in self.nodes:
            out[:, node.index] = self._decode(node, z[:, node.index], s, u)
        return self.destandardize(out)

    def propagate(self, full, z, u, clamp: Mapping[int, float]) -> np.ndarray:
        """Clamp nodes, then recompute only their descendants from noise ``z``."""
        full, u = self._check(full, u)
        s = self.standardize(full).copy()
        if not clamp:
            return full.copy()
        for i, v in clamp.items():
            s[:, i] = (np.asarray(v, dtype=float) - self.mean[i]) / self.std[i]
        down = descendants(self.graph, clamp.keys())
        for j in self.graph.order:
            if j in down:
                s[:, j] = self._decode(self.nodes[j], z[:, j], s, u)
        # non-descendants keep their observed values bit for bit
        out = full.copy()
        for i, v in clamp.items():
            out[:, i] = v
        cols = sorted(down)
        out[:, cols] = s[:, cols] * self.std[cols] + self.mean[cols]
        return out

    # -- orientation ------------------------------------------------------
    def orient_latents(self, full, u) -> list:
        """Flip each latent whose decoder decreases in it (likelihood-invariant).

        Returns the indices that were flipped.
        """
        full, u = self._check(full, u)
        s = self.standardize(full)
        z, _ = self.abduct(full, u)
        flipped = []
        for node in self.nodes:
            _, cache = node.decoder.forward_cache(self._dec_in(node, z[:, node.index], s, u))
            _, d_in = node.decoder.backward(cache, np.ones((s.shape[0], 1)))
            if d_in[:, 0].mean() < 0:
                for net in (node.encoder, node.prior):
                    net.weights[-1][:, 0] *= -1
                    net.biases[-1][0] *= -1
                node.decoder.weights[0][0, :] *= -1
                flipped.append(node.index)
        return flipped

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "graph",
            "graph": self.graph.to_dict(),
            "label_width": self.label_width,
            "train_config": asdict(self.cfg),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "normal_mean": self.normal_mean.tolist(),
            "normal_std": self.normal_std.tolist(),
            "nodes": [{"index": nd.index,
                       "encoder": nd.encoder.to_dict(),
                       "prior": nd.prior.to_dict(),
                       "decoder": nd.decoder.to_dict()} for nd in self.nodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        model = cls(graph_from_dict(d["graph"]), d["label_width"], TrainConfig(**d["train_config"]),
                    np.asarray(d["mean"]), np.asarray(d["std"]), np.asarray(d["normal_mean"]),
                    np.asarray(d["normal_std"]), init=False)
        for nd, src in zip(model.nodes, d["nodes"]):
            nd.encoder.load_dict(src["encoder"])
            nd.prior.load_dict(src["prior"])
            nd.decoder.load_dict(src["decoder"])
        return model


def normal_stats(full, normal_mask):
    rows = full[normal_mask] if np.any(normal_mask) else full
    return rows.mean(axis=0), np.maximum(rows.std(axis=0), STD_FLOOR)


def run_training(model, s: np.ndarray, u: np.ndarray, cfg: TrainConfig,
                 latent_width: int, history: Optional[list] = None) -> list:
    """Minibatch Adam on the negative ELBO; shared by all surrogate variants."""
    rng = make_rng(cfg.seed, "train")
    opt = Adam(model.params.size, lr=cfg.lr)
    grad = np.zeros_like(model.params)
    n = s.shape[0]
    history = [] if history is None else history
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            eps = rng.standard_normal((rows.size, latent_width))
            grad[...] = 0.0
            loss = model.loss(s[rows], u[rows], eps, grad)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NonFiniteLoss(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            opt.update(model.params, grad)
            total += loss * rows.size
        history.append(-total / n)
    return history


def train_surrogate(full: np.ndarray, labels: np.ndarray, graph: CausalGraph,
                    cfg: TrainConfig, label_width: int,
                    normal_mask: Optional[np.ndarray] = None) -> SurrogateModel:
    """Fit a :class:`SurrogateModel` to node-ordered rows ``full``.

    ``labels`` holds integer pattern labels (one-hot encoded internally to
    ``label_width`` columns). Returns the model with ``history`` set to the
    per-epoch mean training ELBO.
    """
    cfg.validate()
    full = np.asarray(full, dtype=float)
    if full.shape[1] != graph.node_count:
        raise ShapeMismatch(f"data has {full.shape[1]} columns, graph has {graph.node_count} nodes")
    labels = np.asarray(labels, dtype=int)
    if labels.shape[0] != full.shape[0]:
        raise ShapeMismatch("one label per row required")
    from ..cluster import one_hot
    u = one_hot(labels, label_width)
    mask = np.ones(full.shape[0], bool) if normal_mask is None else np.asarray(normal_mask, bool)
    nm, ns = normal_stats(full, mask)
    model = SurrogateModel(graph, label_width, cfg, full.mean(axis=0), full.std(axis=0), nm, ns)
    s = model.standardize(full)
    eps0 = make_rng(cfg.seed, "elbo-initial").standard_normal(s.shape)
    model.initial_elbo = -model.loss(s, u, eps0)
    model.history = run_training(model, s, u, cfg, graph.node_count)
    model.final_elbo = -model.loss(s, u, eps0)
    model.orient_latents(full, u)
    return model


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_model(path):
    d = json.loads(Path(path).read_text())
    kind = d.get("kind", "graph")
    if kind == "graph":
        return SurrogateModel.from_dict(d)
    if kind == "flat":
        from .flat import FlatSurrogate
        return FlatSurrogate.from_dict(d)
    raise ValueError(f"unknown model kind {kind!r}")
