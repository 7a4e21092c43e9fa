"""Report stage output: aggregate JSON, flat CSVs and PNG figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import EvalReport  # noqa: E402

PNG_META = {"Software": None}  # keep PNG bytes free of version strings
METHOD_LABELS = {"miccd": "MiCCD", "naive_rca": "NaiveRCA"}


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _flat_rows(rep: EvalReport):
    d = rep.to_dict()
    rows = []
    for section in ("f1", "n_cost", "r_mse_cf", "r_mse_recon", "feasible_rate", "cluster_accuracy"):
        block = d.get(section)
        if not block:
            continue
        if "median" in block:  # a single summary rather than a per-method map
            block = {"-": block}
        for name in sorted(block):
            for stat in ("median", "mean", "std"):
                rows.append([section, name, "", stat, _fmt(block[name][stat])])
    for method in sorted(d.get("ndcg", {})):
        for k in sorted(d["ndcg"][method], key=int):
            for stat in ("median", "mean", "std"):
                rows.append(["ndcg", method, k, stat, _fmt(d["ndcg"][method][k][stat])])
    return rows


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def write_report(rep: EvalReport, per_seed, cfg, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=1) + "\n")
    _write_csv(out / "metrics.csv", ["metric", "name", "k", "stat", "value"], _flat_rows(rep))

    # method comparison: F1 and normalized cost, per seed
    dec_rows = []
    for m in per_seed:
        dec = m.get("decision")
        if not dec:
            continue
        for method in ("miccd", "naive_rca"):
            nc = dec[method].get("n_cost_mean", float("nan"))
            dec_rows.append([method, m["seed"], _fmt(dec[method]["f1"]), _fmt(nc)])
    _write_csv(out / "decision_quality.csv", ["method", "seed", "f1", "n_cost"], dec_rows)

    ndcg_rows = []
    for method in sorted(rep.ndcg):
        for k in sorted(rep.ndcg[method], key=int):
            s = rep.ndcg[method][k]
            ndcg_rows.append([method, k, _fmt(s["median"]), _fmt(s["std"])])
    _write_csv(out / "ndcg.csv", ["method", "k", "median", "std"], ndcg_rows)

    rmse_rows = []
    for kind, block in (("counterfactual", rep.r_mse_cf), ("reconstruction", rep.r_mse_recon)):
        for v in sorted(block):
            rmse_rows.append([kind, rep.dataset, v, _fmt(block[v]["median"]),
                              _fmt(block[v]["std"])])
    _write_csv(out / "rmse.csv", ["kind", "dataset", "variant", "median", "std"], rmse_rows)

    _plot_decisions(rep, out / "decision_quality.png")
    _plot_ndcg(rep, out / "ndcg.png")
    _plot_rmse(rep, out / "rmse.png")


def _plot_decisions(rep: EvalReport, path) -> None:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    methods = sorted(rep.f1)
    a1.bar([METHOD_LABELS.get(m, m) for m in methods], [rep.f1[m]["median"] for m in methods],
           yerr=[rep.f1[m]["std"] for m in methods], color="#4c72b0", capsize=3)
    a1.set_ylabel("root-cause F1 (median)")
    a1.set_ylim(0, 1)
    methods = sorted(rep.n_cost)
    a2.bar([METHOD_LABELS.get(m, m) for m in methods], [rep.n_cost[m]["median"] for m in methods],
           yerr=[rep.n_cost[m]["std"] for m in methods], color="#dd8452", capsize=3)
    a2.axhline(1.0, color="k", lw=0.8, ls="--")
    a2.set_ylabel("N-Cost (median)")
    fig.suptitle(rep.dataset)
    fig.tight_layout()
    _save(fig, path)


def _plot_ndcg(rep: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for method in sorted(rep.ndcg):
        ks = sorted(rep.ndcg[method], key=int)
        ax.plot([int(k) for k in ks], [rep.ndcg[method][k]["median"] for k in ks], marker="o",
                label=METHOD_LABELS.get(method, method))
    ax.set_xlabel("k")
    ax.set_ylabel("nDCG@k (median)")
    ax.set_ylim(0, 1.05)
    if rep.ndcg:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def _plot_rmse(rep: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    variants = sorted(rep.r_mse_cf)
    xs = range(len(variants))
    w = 0.38
    ax.bar([x - w / 2 for x in xs], [rep.r_mse_cf[v]["median"] for v in variants], w,
           label="counterfactual")
    ax.bar([x + w / 2 for x in xs], [rep.r_mse_recon[v]["median"] for v in variants], w,
           label="reconstruction")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(variants)
    ax.set_ylabel("r-MSE (median)")
    ax.set_title(rep.dataset)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
