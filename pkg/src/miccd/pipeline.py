"""Stage runner behind the command line.

Every seed gets its own directory under ``out``; stages read and write only
the files listed in ``STAGE_FILES``. The report stage aggregates all seeds.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .cluster import aligned_accuracy, cluster_patterns, one_hot, select_k
from .decision import CostModel, DecisionOpts
from .errors import MissingArtifact
from .graph import save_graph
from .harness import (EvalReport, build_scenario, config_hash, counterfactual_rmse,
                      dataset_name, decide_samples, decision_metrics, decision_rows,
                      reconstruction_rmse, train_variant, variant_labels)
from .scm import LabeledDataset, load_dataset, load_scm, save_dataset, save_scm
from .surrogate.model import TrainConfig, load_model, save_model

STAGES = ("gen", "cluster", "train", "decide", "eval", "report")

STAGE_FILES = {
    "gen": ("scm.json", "graph.json", "dataset.csv", "noise.csv"),
    "cluster": ("cluster.json", "labels.csv"),
    "train": ("train_history.csv",),  # plus model_<variant>.json
    "decide": ("plans.json",),
    "eval": ("metrics.json",),
}


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n")


def _load(path):
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} is missing; run the earlier stage first")
    return json.loads(p.read_text())


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} is missing; run the earlier stage first")
    return p


def seed_dir(cfg: dict, seed: int) -> Path:
    return Path(cfg["out"]) / f"seed_{seed}"


# -- per-seed data access --------------------------------------------------

def _load_split(d: Path):
    ds = load_dataset(_need(d / "dataset.csv"), _need(d / "noise.csv"))
    with open(d / "dataset.csv", newline="") as fh:
        split = np.array([int(r["split"]) for r in csv.DictReader(fh)])
    return ds.subset(np.flatnonzero(split == 0)), ds.subset(np.flatnonzero(split == 1))


def _load_labels(d: Path):
    with open(_need(d / "labels.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    lab = np.array([int(r["label"]) for r in rows])
    split = np.array([int(r["split"]) for r in rows])
    return lab[split == 0], lab[split == 1]


def _decision_variant(cfg) -> str:
    v = cfg["eval"]["variants"]
    return "full" if "full" in v else v[0]


def _train_cfg(cfg, seed) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=seed)


def _pattern_count(cfg) -> int:
    return cfg["anomaly"]["patterns"]


# -- stages ----------------------------------------------------------------

def stage_gen(cfg: dict, seed: int) -> None:
    d = seed_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    sc = build_scenario(cfg["graph"], cfg["anomaly"], seed)
    save_scm(sc.scm, d / "scm.json")
    save_graph(sc.graph, d / "graph.json")
    merged = LabeledDataset(*(np.concatenate([getattr(sc.train, f), getattr(sc.test, f)])
                              for f in ("X", "y", "Z_true", "pattern_id", "root_cause",
                                        "y_abnormal")))
    split = np.r_[np.zeros(len(sc.train), int), np.ones(len(sc.test), int)]
    save_dataset(merged, d / "dataset.csv", d / "noise.csv", extra={"split": split})


def stage_cluster(cfg: dict, seed: int) -> None:
    d = seed_dir(cfg, seed)
    train, test = _load_split(d)
    cc = cfg["cluster"]
    mode = cc["mode"]
    fit_kw = {"covariance_type": cc["covariance"], "restarts": cc["restarts"]}
    masks = {"y_abnormal": (train.y_abnormal == 1, test.y_abnormal == 1),
             "flagged": (train.pattern_id >= 0, test.pattern_id >= 0),
             "all": (None, None)}[mode]
    K = cc["K"]
    if K is None:
        K = _pattern_count(cfg)
    elif K == "auto":
        rows = train.full if mode == "all" else train.full[masks[0]]
        shift = 1 if mode == "all" else 0  # the normal regime takes one component
        K = select_k(rows, cc["k_min"] + shift, cc["k_max"] + shift, seed=seed, **fit_kw) - shift
        K = max(K, 1)
    cl = cluster_patterns(train.full, K, mode, seed=seed, y_abnormal=train.y_abnormal == 1,
                          flagged=train.pattern_id >= 0, **fit_kw)
    test_lab = cl.predict(test.full, masks[1])
    truth = np.where(train.pattern_id < 0, K, train.pattern_id)
    info = {"clustering": cl.to_dict(), "K": K,
            "accuracy": aligned_accuracy(cl.labels, truth),
            "pattern_accuracy": aligned_accuracy(cl.labels[train.pattern_id >= 0],
                                                 train.pattern_id[train.pattern_id >= 0]),
            "loglik_history": cl.gmm.history}
    _dump(info, d / "cluster.json")
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "split", "label"])
        for r, v in enumerate(cl.labels):
            w.writerow([r, 0, int(v)])
        for r, v in enumerate(test_lab):
            w.writerow([len(cl.labels) + r, 1, int(v)])


def stage_train(cfg: dict, seed: int) -> None:
    d = seed_dir(cfg, seed)
    train, _ = _load_split(d)
    lab, _ = _load_labels(d)
    K = int(_load(d / "cluster.json")["K"])
    g = load_scm(_need(d / "scm.json")).graph
    hist = {}
    for v in cfg["eval"]["variants"]:
        model = train_variant(v, train.full, lab, g, _train_cfg(cfg, seed), K,
                              normal_mask=train.y_abnormal == 0)
        save_model(model, d / f"model_{v}.json")
        hist[v] = model.history
    with open(d / "train_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "epoch", "elbo"])
        for v in cfg["eval"]["variants"]:
            for e, val in enumerate(hist[v]):
                w.writerow([v, e + 1, format(val, ".17g")])


def _opts(cfg, scm, seed) -> DecisionOpts:
    dc = {k: v for k, v in cfg["decision"].items() if k != "rows"}
    if dc["threshold"] is None:
        dc["threshold"] = scm.threshold
    return DecisionOpts(**dc, seed=seed)


def _cost_model(cfg) -> CostModel:
    return CostModel(**cfg["cost"])


def stage_decide(cfg: dict, seed: int) -> None:
    d = seed_dir(cfg, seed)
    _, test = _load_split(d)
    _, test_lab = _load_labels(d)
    K = int(_load(d / "cluster.json")["K"])
    scm = load_scm(_need(d / "scm.json"))
    v = _decision_variant(cfg)
    model = load_model(_need(d / f"model_{v}.json"))
    lab, width = variant_labels(v, test_lab, K)
    opts = _opts(cfg, scm, seed)
    rows = decision_rows(test, opts.threshold, cfg["decision"]["rows"])
    recs = decide_samples(model, scm, test, one_hot(lab, width), rows, _cost_model(cfg), opts,
                          model.normal_mean, model.normal_std)
    _dump({"variant": v, "threshold": opts.threshold, "records": recs}, d / "plans.json")


def stage_eval(cfg: dict, seed: int) -> None:
    d = seed_dir(cfg, seed)
    _, test = _load_split(d)
    _, test_lab = _load_labels(d)
    cinfo = _load(d / "cluster.json")
    K = int(cinfo["K"])
    scm = load_scm(_need(d / "scm.json"))
    ev = cfg["eval"]
    out = {"seed": seed, "dataset": dataset_name(cfg["graph"]), "r_mse_cf": {},
           "r_mse_recon": {}, "cluster_accuracy": cinfo["accuracy"],
           "cluster_pattern_accuracy": cinfo["pattern_accuracy"]}
    sel = np.flatnonzero(test.y_abnormal == 1)[:ev["cf_rows"]]
    for v in ev["variants"]:
        model = load_model(_need(d / f"model_{v}.json"))
        lab, width = variant_labels(v, test_lab, K)
        u = one_hot(lab, width)
        out["r_mse_cf"][v] = counterfactual_rmse(model, scm, test.full[sel], test.Z_true[sel],
                                                 u[sel], ev["cf_deltas"])
        out["r_mse_recon"][v] = reconstruction_rmse(model, test.full, u)
    plans = _load(d / "plans.json")
    out["decision"] = decision_metrics(plans["records"], ev["ndcg_k"])
    _dump(out, d / "metrics.json")


def stage_report(cfg: dict) -> EvalReport:
    from .report import write_report
    per_seed = [_load(seed_dir(cfg, s) / "metrics.json") for s in cfg["seeds"]]
    rep = EvalReport.from_seed_metrics(dataset_name(cfg["graph"]), config_hash(hash_view(cfg)),
                                       per_seed)
    write_report(rep, per_seed, cfg, Path(cfg["out"]))
    return rep


SEED_STAGES = {"gen": stage_gen, "cluster": stage_cluster, "train": stage_train,
               "decide": stage_decide, "eval": stage_eval}


def hash_view(cfg: dict) -> dict:
    """Config fields that influence results (the output location does not)."""
    return {k: v for k, v in cfg.items() if k != "out"}


class StageError(RuntimeError):
    def __init__(self, stage: str, seed, err: BaseException):
        where = f"stage {stage}" + ("" if seed is None else f", seed {seed}")
        super().__init__(f"{where}: {type(err).__name__}: {err}")
        self.stage, self.seed, self.cause = stage, seed, err


def _run_seed(args):
    cfg, seed, stages = args
    for st in stages:
        try:
            SEED_STAGES[st](cfg, seed)
        except Exception as e:  # noqa: BLE001 - re-raised with stage context
            raise StageError(st, seed, e) from e
    return seed


def run_pipeline(cfg: dict, stage: str = "all", workers: int | None = None):
    if stage not in STAGES + ("all",):
        raise ValueError(f"unknown stage {stage!r}")
    Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
    _dump(cfg, Path(cfg["out"]) / "config.json")
    seed_stages = [s for s in SEED_STAGES if stage in ("all", s)]
    if seed_stages:
        jobs = [(cfg, s, seed_stages) for s in cfg["seeds"]]
        workers = workers or os.cpu_count() or 1
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
                list(pool.map(_run_seed, jobs))
        else:
            for job in jobs:
                _run_seed(job)
    if stage in ("all", "report"):
        try:
            return stage_report(cfg)
        except Exception as e:  # noqa: BLE001
            raise StageError("report", None, e) from e
    return None
