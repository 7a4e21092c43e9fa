"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the session summary) before
asserting, so a failing criterion still reports its measured numbers.
"""

import filecmp
import itertools
import shutil
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, all_dags, linear_scm, surrogate_gradcheck
from miccd.cluster import aligned_accuracy, cluster_patterns
from miccd.config import load_config
from miccd.decision import CostModel, DecisionOpts, cost, estimate_pn, solve_min_cost
from miccd.graph import build_graph, screen_effective
from miccd.harness import build_scenario, decision_rows
from miccd.metrics import f1_score, ndcg_at_k, normalized_cost, r_mse
from miccd.pipeline import run_pipeline
from miccd.scm import NoiseSpec, Scm
from miccd.surrogate.exact import ExactSurrogate

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


def record(key, ok, detail):
    ACCEPTANCE.append((key, f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"))
    return ok


@pytest.fixture(scope="module")
def chain_run(tmp_path_factory):
    """chain-5, medium weights, 2 patterns, 5 seeds, default training config."""
    out = tmp_path_factory.mktemp("chain5")
    cfg = load_config(None, [f"seeds={SEEDS}", 'eval.variants=["full","no_u"]', f"out={out}"])
    t0 = time.perf_counter()
    rep = run_pipeline(cfg, "all", workers=1)
    return rep, (time.perf_counter() - t0) / len(SEEDS)


@pytest.fixture(scope="module")
def sparse_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("random5")
    cfg = load_config(None, [f"seeds={SEEDS}", "graph.structure=random", "graph.sparsity=0.3",
                             'eval.variants=["full","no_graph"]', "decision.rows=0",
                             f"out={out}"])
    return run_pipeline(cfg, "all", workers=1)


def test_c1_gradients():
    t0 = time.perf_counter()
    res = {d: surrogate_gradcheck(d) for d in (5, 10, 20)}
    dt = time.perf_counter() - t0
    worst = max(e for r in res.values() for e, _, _ in r.values())
    gap = max(g for r in res.values() for _, g, _ in r.values())
    skipped = sum(s for r in res.values() for _, _, s in r.values())
    ok = worst < 1e-4 and dt < 30.0 and gap < 1e-9
    assert record("1", ok, f"max rel err {worst:.2e} over every parameter of every node "
                           f"(d=5,10,20) and the flat model, {skipped} kink-straddling "
                           f"parameters skipped, {dt:.1f}s (< 1e-4, < 30s)")


def test_c2_clustering():
    accs, monotone = [], True
    for seed in SEEDS:
        sc = build_scenario({"structure": "chain", "n": 5}, {
            "patterns": 3, "samples_per_pattern": 200, "normal_samples": 800,
            "test_per_pattern": 1, "test_normal": 1}, seed)
        tr = sc.train
        cl = cluster_patterns(tr.full, 3, "all", seed=seed)
        truth = np.where(tr.pattern_id < 0, 3, tr.pattern_id)
        accs.append(aligned_accuracy(cl.labels, truth))
        # EM asserts monotonicity on every restart; the kept history is re-checked here
        h = np.asarray(cl.gmm.history)
        monotone &= bool(np.all(np.diff(h) >= -1e-8 * np.maximum(1.0, np.abs(h[:-1]))))
    ok = min(accs) >= 0.9 and monotone
    assert record("2", ok, f"aligned accuracy per seed {np.round(accs, 3).tolist()} "
                           f"(>= 0.9), EM monotone: {monotone}")


def test_c3_screening_soundness():
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    grid = np.linspace(-2.0, 2.0, 5)
    dags = all_dags(4)
    checked = 0
    bad = 0
    for g in dags:
        d = g.d
        masks = [m for m in itertools.product([0, 1], repeat=d) if any(m)]
        for k in range(50):
            scm = linear_scm(g, seed=int(r.integers(1 << 31)))
            z = r.normal(size=g.node_count)
            x = scm.propagate(z)[:d]
            for m in masks:
                xs = x + np.asarray(m) * r.normal(scale=2.0, size=d)
                eff = screen_effective(g, x, xs)
                base = {g.variables[i]: xs[i] for i in eff}
                y0 = scm.propagate(z, base)[g.target]
                for i in np.flatnonzero(m):
                    if i in eff:
                        continue
                    node = g.variables[i]
                    zz = np.tile(z, (grid.size, 1))
                    ys = scm.propagate(zz, {**base, node: grid})[:, g.target]
                    checked += 1
                    bad += int(np.any(np.abs(ys - y0) > 1e-12))
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 120
    assert record("3", ok, f"{len(dags)} DAGs x 50 SCMs, {checked} screened-out coordinates "
                           f"on a 5-point grid, {bad} with an effect on Y, {dt:.1f}s (< 120s)")


def _one_dim():
    g = build_graph(2, [(0, 1)], 1)
    scm = Scm(g, ((), np.array([1.0])),
              NoiseSpec(np.zeros(2), np.ones(2), np.full(2, 4.0), np.ones(2)))
    return ExactSurrogate(scm)


def test_c4_counterfactual_fidelity(chain_run):
    rep, per_seed = chain_run
    cf = rep.r_mse_cf["full"]["median"]
    rc = rep.r_mse_recon["full"]["median"]
    ok = cf <= 0.1 and rc <= 0.1 and per_seed <= 600
    assert record("4", ok, f"chain/5 median counterfactual r-MSE {cf:.4f}, reconstruction "
                           f"r-MSE {rc:.4f} (<= 0.1 each), {per_seed:.0f}s per seed (<= 600s)")


def test_c5a_ablation_no_u(chain_run):
    rep, _ = chain_run
    full, no_u = rep.r_mse_cf["full"]["median"], rep.r_mse_cf["no_u"]["median"]
    assert record("5a", full <= no_u,
                  f"chain/5 counterfactual r-MSE median full {full:.4f} <= no_u {no_u:.4f}")


def test_c5b_ablation_no_graph(sparse_run):
    full = sparse_run.r_mse_cf["full"]["median"]
    flat = sparse_run.r_mse_cf["no_graph"]["median"]
    assert record("5b", full <= flat, f"sparsity-0.3/5 counterfactual r-MSE median full "
                                      f"{full:.4f} <= no_graph {flat:.4f}")


def test_c6_optimizer():
    m = _one_dim()
    plan = solve_min_cost(m, [2.0, 2.0], np.ones((1, 1)), CostModel(), DecisionOpts(threshold=0.5))
    grid = np.arange(-3.0, 3.0, 1e-3)
    oracle = float(np.min((grid[grid <= 0.5] - 2.0) ** 2))
    gap = abs(plan.cost - oracle) / oracle

    # stochastic abduction on chain-5 scenario rows
    sc = build_scenario({"structure": "chain", "n": 5}, {
        "patterns": 2, "samples_per_pattern": 200, "normal_samples": 800,
        "test_per_pattern": 100, "test_normal": 1}, 0)
    normal = sc.train.full[sc.train.y_abnormal == 0]
    ex = ExactSurrogate(sc.scm, 0.3, normal_mean=normal.mean(0), normal_std=normal.std(0),
                        y_std=float(sc.train.y.std()))
    t = sc.scm.threshold
    rows = decision_rows(sc.test, t, 15)
    u = np.ones((1, 1))
    cm = CostModel()
    reverify_fail, warm_violations, feasible = 0, 0, 0
    for r in rows:
        obs = sc.test.full[r]
        opts = DecisionOpts(threshold=t, seed=int(r))
        p = solve_min_cost(ex, obs, u, cm, opts)
        if not p.feasible:
            continue
        feasible += 1
        fresh = DecisionOpts(threshold=t, samples=10 * opts.samples, seed=10_000 + int(r))
        if estimate_pn(ex, obs, u, p.x_star, fresh)[0] < opts.iota - 0.05:
            reverify_fail += 1
        x = obs[:sc.scm.d]
        for i in range(sc.scm.d):
            ws = x.copy()
            ws[i] = ex.normal_mean[i]
            pn = estimate_pn(ex, obs, u, ws, DecisionOpts(threshold=t, samples=4096))[0]
            # a margin keeps Monte-Carlo error out of the feasibility call
            if pn >= opts.iota + 0.02 and p.cost > cost(cm, ws, x) + 1e-9:
                warm_violations += 1
    ok = gap <= 0.05 and reverify_fail == 0 and warm_violations == 0 and feasible > 0
    assert record("6", ok, f"1-D cost {plan.cost:.5f} vs grid oracle {oracle:.5f} "
                           f"({100 * gap:.2f}% <= 5%); {feasible}/{len(rows)} feasible plans, "
                           f"{reverify_fail} fail 10x re-verification, {warm_violations} "
                           f"cost more than a feasible warm start")


def test_c7_decision_quality(chain_run):
    rep, _ = chain_run
    f1_m, f1_n = rep.f1["miccd"]["median"], rep.f1["naive_rca"]["median"]
    nc = rep.n_cost["miccd"]["median"]
    ok = f1_m >= f1_n and nc <= 1.0
    assert record("7", ok, f"chain/5 median F1 MiCCD {f1_m:.3f} vs NaiveRCA {f1_n:.3f} "
                           f"(MiCCD >= NaiveRCA: {f1_m >= f1_n}); median N-Cost {nc:.3f} "
                           f"(<= 1.0: {nc <= 1.0})")


def test_c8_metric_fixtures():
    import json
    from pathlib import Path
    gold = json.loads((Path(__file__).parent / "golden" / "v1" / "metrics.json").read_text())
    checks = []
    checks += [abs(f1_score(c["pred"], c["truth"], c["mode"]) - c["expected"]) <= 1e-12
               for c in gold["f1"]]
    checks += [abs(ndcg_at_k(c["ranking"], c["relevant"], c["k"]) - c["expected"]) <= 1e-12
               for c in gold["ndcg"]]
    checks += [abs(r_mse(c["pred"], c["truth"]) - c["expected"]) <= 1e-12 for c in gold["r_mse"]]
    checks += [abs(normalized_cost(c["plan"], c["reference"]) - c["expected"]) <= 1e-12
               for c in gold["n_cost"]]
    has_log3 = any(abs(c["expected"] - 1 / np.log2(3)) < 1e-15 for c in gold["ndcg"])
    ok = all(checks) and has_log3
    assert record("8", ok, f"{sum(checks)}/{len(checks)} golden fixtures exact to 1e-12 "
                           f"(1/log2(3) case present: {has_log3})")


def test_c9_determinism(tmp_path):
    out = tmp_path / "run"
    over = ["graph.n=4", "anomaly.samples_per_pattern=100", "anomaly.normal_samples=400",
            "anomaly.test_per_pattern=30", "anomaly.test_normal=60", "train.epochs=3",
            "decision.rows=4", "eval.cf_rows=40", "seeds=[0,1]", f"out={out}"]
    cfg = load_config(None, over)
    run_pipeline(cfg, "all", workers=1)
    first = tmp_path / "first"
    shutil.move(str(out), str(first))
    run_pipeline(cfg, "all", workers=2)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    second = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
    differ = [str(f) for f in files if not filecmp.cmp(first / f, out / f, shallow=False)]
    ok = files == second and not differ and len(files) > 20
    assert record("9", ok, f"'all' run twice (1 and 2 workers): {len(files)} artifacts, "
                           f"{len(differ)} differ {differ[:3]}")
