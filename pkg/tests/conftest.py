import itertools

import numpy as np
import pytest

from miccd.graph import build_graph


def all_dags(max_nodes=4):
    """Every DAG on 2..max_nodes nodes whose last node is a sink, edges i<j only
    after relabelling; node order is fixed so each edge set is one DAG."""
    out = []
    for n in range(2, max_nodes + 1):
        # restrict to edges consistent with some order: enumerate via permutations of the
        # non-target nodes and forward edges, deduplicated by edge set
        seen = set()
        for perm in itertools.permutations(range(n - 1)):
            order = list(perm) + [n - 1]
            fwd = [(order[a], order[b]) for a in range(n) for b in range(a + 1, n)]
            for mask in range(1 << len(fwd)):
                edges = frozenset(e for k, e in enumerate(fwd) if mask >> k & 1)
                if edges not in seen:
                    seen.add(edges)
                    out.append(build_graph(n, sorted(edges), n - 1))
    return out


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dags():
    return all_dags(4)


@pytest.fixture
def chain3():
    return build_graph(3, [(0, 1), (1, 2)], 2)


@pytest.fixture
def diamond():
    return build_graph(4, [(0, 1), (0, 2), (1, 3), (2, 3)], 3)


@pytest.fixture
def fork():
    # Y <- X1 -> X2
    return build_graph(3, [(0, 1), (0, 2)], 2)


def rng(seed=0):
    return np.random.default_rng(seed)


def linear_scm(g, weights=None, seed=0, sigma=1.0, threshold=None):
    """Linear SCM on ``g``; ``weights`` maps node -> list aligned with its parents."""
    from miccd.scm import NoiseSpec, Scm
    r = np.random.default_rng(seed)
    N = g.node_count
    if weights is None:
        w = tuple(r.uniform(0.5, 1.5, len(g.parents[j])) * r.choice([-1, 1], len(g.parents[j]))
                  for j in range(N))
    else:
        w = tuple(np.asarray(weights.get(j, [1.0] * len(g.parents[j])), float) for j in range(N))
    sig = np.full(N, float(sigma))
    noise = NoiseSpec(np.zeros(N), sig, np.full(N, 4.0), sig)
    return Scm(g, w, noise, "identity", threshold)


def fd_max_rel_error(loss_fn, params, grad, indices, h=1e-5):
    """Largest relative gap between ``grad`` and central differences of ``loss_fn``."""
    worst = 0.0
    for k in indices:
        old = params[k]
        params[k] = old + h
        fp = loss_fn()
        params[k] = old - h
        fm = loss_fn()
        params[k] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - grad[k]) / max(1.0, abs(num), abs(grad[k])))
    return worst


def surrogate_gradcheck(d, seed=1, K=3, batch=4):
    """Exhaustive central-difference check of every surrogate parameter.

    Returns ``{label: (max relative gradient error, |oracle loss - package loss|,
    parameters skipped at activation kinks)}`` with one entry per node of the
    graph-aware model plus one for the flat model.
    """
    from fd_oracle import fd_errors, flat_loss, node_loss
    from miccd.cluster import one_hot
    from miccd.scm import generate_random_graph
    from miccd.surrogate.flat import FlatSurrogate
    from miccd.surrogate.model import SurrogateModel, TrainConfig

    g = generate_random_graph(d, "random", 0.3, seed=seed)
    cfg = TrainConfig(seed=seed)
    N = d + 1
    r = np.random.default_rng(seed)
    s = r.normal(size=(batch, N))
    u = one_hot(r.integers(0, K, batch), K)
    eps = r.normal(size=(batch, N))
    out = {}
    m = SurrogateModel(g, K, cfg, np.zeros(N), np.ones(N))
    grad = np.zeros_like(m.params)
    m.loss(s, u, eps, grad)
    for j, node in enumerate(m.nodes):
        lo, hi = node.slices[0].start, node.slices[2].stop
        rec, kl = m.node_terms(j, s, u, eps[:, j])
        err, val, skip = fd_errors(lambda P, j=j: node_loss(m, j, P, s, u, eps[:, j]),
                                   m.params[lo:hi].copy(), grad[lo:hi])
        out[f"node {j} ({len(g.parents[j])} parents)"] = (
            err, abs(val + rec - cfg.kl_weight * kl), skip)
    f = FlatSurrogate(g, K, cfg, np.zeros(N), np.ones(N))
    grad = np.zeros_like(f.params)
    ref = f.loss(s, u, eps, grad)
    err, val, skip = fd_errors(lambda P: flat_loss(f, P, s, u, eps), f.params.copy(), grad)
    out["flat"] = (err, abs(val - ref), skip)
    return out


def small_scenario(seed=0, n=5, patterns=2, per_pattern=300, normal=1200):
    from miccd.harness import build_scenario
    graph = {"structure": "chain", "n": n, "strength": "medium", "nonlinearity": "identity"}
    anomaly = {"patterns": patterns, "shift": 4.0, "scale": 1.0,
               "samples_per_pattern": per_pattern, "normal_samples": normal,
               "test_per_pattern": 100, "test_normal": 200, "threshold_quantile": 0.95}
    return build_scenario(graph, anomaly, seed)
