"""Graph-free ablation: one encoder, prior and decoder over the whole vector.

Counterfactuals cannot follow causal order here. An intervention edits the
observation, re-encodes it, decodes everything in one pass and then writes
the clamped coordinates back.
"""

from __future__ import annotations

from dataclasses import asdict
from typing import Mapping, Optional

import numpy as np

from ..errors import ShapeMismatch
from ..graph import CausalGraph, graph_from_dict
from ..nn import Mlp, param_count
from ..scm import make_rng
from .model import (LOG2PI, STD_FLOOR, TrainConfig, bounded_logvar, bounded_logvar_grad,
                    gaussian_kl, normal_stats, run_training)


class FlatSurrogate:
    def __init__(self, graph: CausalGraph, label_width: int, cfg: TrainConfig,
                 mean, std, normal_mean=None, normal_std=None, init: bool = True):
        self.graph = graph
        self.label_width = int(label_width)
        self.cfg = cfg
        self.mean = np.asarray(mean, dtype=float).copy()
        self.std = np.maximum(np.asarray(std, dtype=float), STD_FLOOR)
        self.normal_mean = self.mean.copy() if normal_mean is None else np.asarray(normal_mean, float)
        self.normal_std = self.std.copy() if normal_std is None else np.asarray(normal_std, float)
        N, Ku = graph.node_count, self.label_width
        h = [cfg.hidden_for(graph.d)] * (cfg.depth - 1)
        layout = ([N + Ku] + h + [2 * N], [Ku] + h + [2 * N], [N + Ku] + h + [N])
        self.params = np.zeros(sum(param_count(s) for s in layout))
        rng = make_rng(cfg.seed, "flat-init") if init else None
        nets, self.slices = [], []
        off = 0
        for sizes in layout:
            n = param_count(sizes)
            sl = slice(off, off + n)
            nets.append(Mlp(sizes, self.params[sl], rng=rng))
            self.slices.append(sl)
            off += n
        self.encoder, self.prior, self.decoder = nets

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
        if full.shape[1] != self.graph.node_count or u.shape[1] != self.label_width:
            raise ShapeMismatch("input widths do not match the model")
        if u.shape[0] == 1 and full.shape[0] > 1:
            u = np.repeat(u, full.shape[0], axis=0)
        return full, u

    def loss(self, s, u, eps, grad=None) -> float:
        N = self.graph.node_count
        n = s.shape[0]
        e_out, e_cache = self.encoder.forward_cache(np.hstack([s, u]))
        p_out, p_cache = self.prior.forward_cache(u)
        mq, lvq = e_out[:, :N], bounded_logvar(e_out[:, N:])
        mp, lvp = p_out[:, :N], bounded_logvar(p_out[:, N:])
        sq = np.exp(0.5 * lvq)
        z = mq + sq * eps
        xhat, d_cache = self.decoder.forward_cache(np.hstack([z, u]))
        ov = self.cfg.obs_var
        resid = s - xhat
        rec = -0.5 * (resid ** 2 / ov + np.log(ov) + LOG2PI)
        kl = gaussian_kl(mq, lvq, mp, lvp)
        beta = self.cfg.kl_weight
        if grad is not None:
            c = 1.0 / n
            g_dec, d_in = self.decoder.backward(d_cache, -resid / ov * c)
            dz = d_in[:, :N]
            inv_p = np.exp(-lvp)
            diff = mq - mp
            d_mq = dz + beta * c * diff * inv_p
            d_lvq = dz * 0.5 * sq * eps + beta * c * 0.5 * (np.exp(lvq) * inv_p - 1.0)
            d_mp = -beta * c * diff * inv_p
            d_lvp = beta * c * 0.5 * (1.0 - (np.exp(lvq) + diff ** 2) * inv_p)
            g_enc, _ = self.encoder.backward(
                e_cache, np.hstack([d_mq, d_lvq * bounded_logvar_grad(e_out[:, N:])]))
            g_pri, _ = self.prior.backward(
                p_cache, np.hstack([d_mp, d_lvp * bounded_logvar_grad(p_out[:, N:])]))
            grad[self.slices[0]] += g_enc
            grad[self.slices[1]] += g_pri
            grad[self.slices[2]] += g_dec
        return float(-(rec.sum(axis=1) - beta * kl.sum(axis=1)).mean())

    def abduct(self, full, u):
        full, u = self._check(full, u)
        N = self.graph.node_count
        out = self.encoder.forward(np.hstack([self.standardize(full), u]))
        return out[:, :N], bounded_logvar(out[:, N:])

    def reconstruct(self, full, u, z: Optional[np.ndarray] = None):
        full, u = self._check(full, u)
        if z is None:
            z, _ = self.abduct(full, u)
        return self.destandardize(self.decoder.forward(np.hstack([z, u])))

    def propagate(self, full, z, u, clamp: Mapping[int, float]):
        full, u = self._check(full, u)
        if not clamp:
            return full.copy()
        edited = full.copy()
        for i, v in clamp.items():
            edited[:, i] = v
        # the draw's offset from the factual posterior mean carries over
        z_fact, _ = self.abduct(full, u)
        z_new, _ = self.abduct(edited, u)
        out = self.reconstruct(edited, u, z_new + (z - z_fact))
        for i, v in clamp.items():
            out[:, i] = v
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "flat",
            "graph": self.graph.to_dict(),
            "label_width": self.label_width,
            "train_config": asdict(self.cfg),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "normal_mean": self.normal_mean.tolist(),
            "normal_std": self.normal_std.tolist(),
            "encoder": self.encoder.to_dict(),
            "prior": self.prior.to_dict(),
            "decoder": self.decoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlatSurrogate":
        m = cls(graph_from_dict(d["graph"]), d["label_width"], TrainConfig(**d["train_config"]),
                d["mean"], d["std"], d["normal_mean"], d["normal_std"], init=False)
        m.encoder.load_dict(d["encoder"])
        m.prior.load_dict(d["prior"])
        m.decoder.load_dict(d["decoder"])
        return m


def train_flat(full, labels, graph: CausalGraph, cfg: TrainConfig, label_width: int,
               normal_mask=None) -> FlatSurrogate:
    from ..cluster import one_hot
    cfg.validate()
    full = np.asarray(full, dtype=float)
    u = one_hot(labels, label_width)
    mask = np.ones(full.shape[0], bool) if normal_mask is None else np.asarray(normal_mask, bool)
    nm, ns = normal_stats(full, mask)
    model = FlatSurrogate(graph, label_width, cfg, full.mean(axis=0), full.std(axis=0), nm, ns)
    model.history = run_training(model, model.standardize(full), u, cfg, graph.node_count)
    return model
