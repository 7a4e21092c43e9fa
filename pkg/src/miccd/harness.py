"""Scenario construction, ablation training and the evaluation protocol.

The pipeline stages in :mod:`miccd.pipeline` call into these functions; they
can also be used directly from Python.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .cluster import one_hot
from .decision import CostModel, DecisionOpts, cost, solve_min_cost
from .errors import ZeroVariance
from .graph import CausalGraph, ancestors, descendants
from .metrics import f1_score, naive_rca_rank, ndcg_at_k, normalized_cost, r_mse
from .scm import (LabeledDataset, Scm, compute_threshold, generate_random_graph, make_patterns,
                  sample_mechanisms, simulate_dataset)
from .surrogate.flat import train_flat
from .surrogate.model import TrainConfig, train_surrogate

VARIANTS = ("full", "no_u", "no_graph")


@dataclass
class Scenario:
    scm: Scm
    patterns: list
    train: LabeledDataset
    test: LabeledDataset

    @property
    def graph(self) -> CausalGraph:
        return self.scm.graph


def build_scenario(graph: Mapping, anomaly: Mapping, seed: int) -> Scenario:
    g = generate_random_graph(graph["n"], graph["structure"], graph.get("sparsity", 0.2), seed=seed,
                              min_ancestors=min(anomaly["patterns"], graph["n"]))
    scm = sample_mechanisms(g, graph.get("strength", "medium"), graph.get("nonlinearity", "identity"),
                            seed=seed, shift=anomaly.get("shift", 4.0),
                            scale=anomaly.get("scale", 1.0))
    scm = scm.with_threshold(compute_threshold(scm, anomaly.get("threshold_quantile", 0.95),
                                               seed=seed))
    pats = make_patterns(scm, anomaly["patterns"], seed=seed)
    train = simulate_dataset(scm, pats, anomaly["samples_per_pattern"], anomaly["normal_samples"],
                             seed=seed, stream="train")
    test = simulate_dataset(scm, pats, anomaly["test_per_pattern"], anomaly["test_normal"],
                            seed=seed, stream="test")
    return Scenario(scm, pats, train, test)


# -- ablation variants ----------------------------------------------------

def variant_labels(variant: str, labels: np.ndarray, K: int):
    """``(labels, width)`` the variant conditions on."""
    if variant == "no_u":
        return np.zeros(len(labels), dtype=int), 1
    return np.asarray(labels, dtype=int), K + 1


def train_variant(variant: str, full, labels, graph: CausalGraph, cfg: TrainConfig, K: int,
                  normal_mask=None):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    lab, width = variant_labels(variant, labels, K)
    if variant == "no_graph":
        return train_flat(full, lab, graph, cfg, width, normal_mask)
    return train_surrogate(full, lab, graph, cfg, width, normal_mask)


# -- fidelity -------------------------------------------------------------

def _pooled_rmse(pairs: Mapping[int, list]) -> float:
    vals = []
    for j in sorted(pairs):
        pred = np.concatenate([a for a, _ in pairs[j]])
        truth = np.concatenate([b for _, b in pairs[j]])
        try:
            vals.append(r_mse(pred, truth))
        except ZeroVariance:
            continue
    return float(np.mean(vals)) if vals else float("nan")


def counterfactual_rmse(model, scm: Scm, full, z_true, u, deltas=(-2.0, -1.0, 1.0, 2.0)) -> float:
    """Single-node interventions on every ancestor of Y, shifted by ``delta``
    normal-regime standard deviations; r-MSE per descendant, averaged."""
    g = scm.graph
    full = np.asarray(full, dtype=float)
    u = np.atleast_2d(u)
    zq, _ = model.abduct(full, u)
    pairs = {}
    for i in sorted(ancestors(g, [g.target])):
        down = sorted(descendants(g, [i]))
        for delta in deltas:
            v = full[:, i] + delta * model.normal_std[i]
            pred = model.propagate(full, zq, u, {i: v})
            truth = scm.propagate(z_true, {i: v})
            for j in down:
                pairs.setdefault(j, []).append((pred[:, j], truth[:, j]))
    return _pooled_rmse(pairs)


def reconstruction_rmse(model, full, u) -> float:
    full = np.asarray(full, dtype=float)
    rec = model.reconstruct(full, u)
    pairs = {j: [(rec[:, j], full[:, j])] for j in range(full.shape[1])}
    return _pooled_rmse(pairs)


# -- decisions ------------------------------------------------------------

def root_fix(scm: Scm, full_row, z_row, roots: Sequence[int]) -> np.ndarray:
    """Intervention vector that sets each anomalous variable to its
    normal-regime conditional mean, in causal order, given its
    counterfactually corrected parents. Other coordinates stay factual."""
    roots = set(int(r) for r in roots)
    clamp = {}
    cur = np.asarray(full_row, dtype=float).copy()
    for j in scm.graph.order:
        if j in roots:
            clamp[j] = float(scm.mechanism(j, cur) + scm.noise.mu[j])
            cur = scm.propagate(np.asarray(z_row, dtype=float), clamp)
    x_star = np.asarray(full_row, dtype=float)[:scm.d].copy()
    for j, v in clamp.items():
        x_star[j] = v
    return x_star


def reference_cost(scm: Scm, full_row, z_row, roots, cm: CostModel) -> float:
    x = np.asarray(full_row, dtype=float)[:scm.d]
    return cost(cm, root_fix(scm, full_row, z_row, roots), x)


def decision_rows(test: LabeledDataset, threshold: float, limit: int) -> np.ndarray:
    """Test rows that come from an anomaly pattern and have an abnormal target."""
    rows = np.flatnonzero((test.pattern_id >= 0) & (test.y > threshold))
    return rows[:limit]


def decide_samples(model, scm: Scm, test: LabeledDataset, u, rows, cm: CostModel,
                   opts: DecisionOpts, normal_mean, normal_std) -> list:
    """Solve every selected row; one record per row."""
    full = test.full
    out = []
    for r in rows:
        r = int(r)
        o = DecisionOpts(**{**opts.__dict__, "seed": opts.seed * 100003 + r})
        plan = solve_min_cost(model, full[r], u[r:r + 1], cm, o)
        root = int(test.root_cause[r])
        out.append({
            "row": r,
            "root_cause": root,
            "plan": plan.to_dict(),
            "reference_cost": reference_cost(scm, full[r], test.Z_true[r], [root], cm),
            "naive_ranking": naive_rca_rank(full[r, :scm.d], normal_mean[:scm.d],
                                            normal_std[:scm.d]),
        })
    return out


def decision_metrics(records: Sequence[dict], ks: Sequence[int] = (1, 3, 5)) -> dict:
    truth = [rec["root_cause"] for rec in records]
    out = {}
    for method, rank_of in (("miccd", lambda rec: rec["plan"]["ranking"]),
                            ("naive_rca", lambda rec: rec["naive_ranking"])):
        ranks = [rank_of(rec) for rec in records]
        top = [rk[0] for rk in ranks]
        m = {"f1": f1_score(top, truth, mode="macro") if records else float("nan"),
             "ndcg": {str(k): float(np.mean([ndcg_at_k(rk, [t], k) for rk, t in zip(ranks, truth)]))
                      if records else float("nan") for k in ks}}
        out[method] = m
    nc = [normalized_cost(rec["plan"]["cost"], rec["reference_cost"]) for rec in records
          if rec["plan"]["feasible"]]
    out["miccd"]["n_cost_mean"] = float(np.mean(nc)) if nc else float("nan")
    out["miccd"]["n_cost_std"] = float(np.std(nc)) if nc else float("nan")
    out["miccd"]["feasible_rate"] = (float(np.mean([rec["plan"]["feasible"] for rec in records]))
                                     if records else float("nan"))
    return out


# -- suite ----------------------------------------------------------------

def config_hash(cfg: Mapping) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _summary(values) -> dict:
    v = np.asarray(values, dtype=float)
    ok = v[np.isfinite(v)]
    return {"median": float(np.median(ok)) if ok.size else float("nan"),
            "mean": float(np.mean(ok)) if ok.size else float("nan"),
            "std": float(np.std(ok)) if ok.size else float("nan"),
            "per_seed": [float(x) for x in v]}


@dataclass
class EvalReport:
    dataset: str
    seeds: list
    config_hash: str
    r_mse_cf: dict = field(default_factory=dict)      # variant -> summary
    r_mse_recon: dict = field(default_factory=dict)
    f1: dict = field(default_factory=dict)            # method -> summary
    n_cost: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)          # method -> k -> summary
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "seeds": list(self.seeds),
                "config_hash": self.config_hash, "f1": self.f1, "n_cost": self.n_cost,
                "ndcg": self.ndcg, "r_mse_cf": self.r_mse_cf, "r_mse_recon": self.r_mse_recon,
                **self.extra}

    @classmethod
    def from_seed_metrics(cls, dataset: str, chash: str, per_seed: Sequence[dict]) -> "EvalReport":
        rep = cls(dataset, [m["seed"] for m in per_seed], chash)
        variants = sorted({v for m in per_seed for v in m.get("r_mse_cf", {})})
        for v in variants:
            rep.r_mse_cf[v] = _summary([m["r_mse_cf"].get(v, np.nan) for m in per_seed])
            rep.r_mse_recon[v] = _summary([m["r_mse_recon"].get(v, np.nan) for m in per_seed])
        dec = [m["decision"] for m in per_seed if m.get("decision")]
        if dec:
            for method in ("miccd", "naive_rca"):
                rep.f1[method] = _summary([d[method]["f1"] for d in dec])
                ks = sorted(dec[0][method]["ndcg"], key=int)
                rep.ndcg[method] = {k: _summary([d[method]["ndcg"][k] for d in dec]) for k in ks}
            rep.n_cost["miccd"] = _summary([d["miccd"]["n_cost_mean"] for d in dec])
            rep.extra["feasible_rate"] = _summary([d["miccd"]["feasible_rate"] for d in dec])
        if all("cluster_accuracy" in m for m in per_seed):
            rep.extra["cluster_accuracy"] = _summary([m["cluster_accuracy"] for m in per_seed])
        return rep


def run_ablation_suite(datasets: Sequence[dict], variants: Sequence[str], seeds: Sequence[int],
                       train_cfg: Optional[TrainConfig] = None, cluster_mode: str = "all",
                       deltas=(-2.0, -1.0, 1.0, 2.0), cf_rows: int = 200) -> list:
    """Fidelity table: one row per (variant, dataset) with per-seed r-MSEs.

    Each dataset entry holds ``graph`` and ``anomaly`` mappings as in the
    experiment config.
    """
    from .cluster import cluster_patterns
    rows = []
    for ds in datasets:
        per = {v: {"cf": [], "recon": []} for v in variants}
        for seed in seeds:
            sc = build_scenario(ds["graph"], ds["anomaly"], seed)
            K = ds["anomaly"]["patterns"]
            cl = cluster_patterns(sc.train.full, K, cluster_mode, seed=seed,
                                  y_abnormal=sc.train.y_abnormal, flagged=sc.train.pattern_id >= 0)
            test_lab = cl.predict(sc.test.full, sc.test.y_abnormal if cluster_mode == "y_abnormal"
                                  else sc.test.pattern_id >= 0)
            cfg = TrainConfig(**{**(train_cfg.__dict__ if train_cfg else {}), "seed": seed})
            for v in variants:
                model = train_variant(v, sc.train.full, cl.labels, sc.graph, cfg, K,
                                      normal_mask=sc.train.y_abnormal == 0)
                lab, width = variant_labels(v, test_lab, K)
                u = one_hot(lab, width)
                sel = np.flatnonzero(sc.test.y_abnormal == 1)[:cf_rows]
                per[v]["cf"].append(counterfactual_rmse(model, sc.scm, sc.test.full[sel],
                                                        sc.test.Z_true[sel], u[sel], deltas))
                per[v]["recon"].append(reconstruction_rmse(model, sc.test.full, u))
        name = dataset_name(ds["graph"])
        for v in variants:
            rows.append({"variant": v, "dataset": name, "seeds": list(seeds),
                         "r_mse_cf": _summary(per[v]["cf"]),
                         "r_mse_recon": _summary(per[v]["recon"])})
    return rows


def dataset_name(graph: Mapping) -> str:
    if graph["structure"] == "chain":
        return f"chain/{graph['n']}"
    return f"sparsity={graph.get('sparsity', 0.2)}/{graph['n']}"
