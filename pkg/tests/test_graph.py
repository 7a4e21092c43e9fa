import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from miccd.errors import CycleError, GraphTooLarge, LengthMismatch, TargetNotSink
from miccd.graph import (ancestors, build_graph, descendants, directed_paths, graph_from_dict,
                         load_graph, save_graph, screen_effective, topological_order)


def test_chain_builds(chain3):
    assert chain3.sorted_edges() == [(0, 1), (1, 2)]
    assert chain3.parents[2] == (1,)
    assert chain3.variables == (0, 1)


def test_two_cycle_rejected():
    with pytest.raises(CycleError):
        build_graph(2, [(0, 1), (1, 0)], 1)


def test_self_loop_rejected():
    with pytest.raises(CycleError):
        build_graph(2, [(0, 0)], 1)


def test_target_with_out_edge_rejected():
    with pytest.raises(TargetNotSink):
        build_graph(3, [(2, 0)], 2)


def test_node_guard():
    with pytest.raises(GraphTooLarge):
        build_graph(65, [], 64)


@pytest.mark.parametrize("edges,expected", [
    ([(0, 1), (1, 2)], [0, 1, 2]),
    ([], [0, 1, 2]),
    ([(0, 1), (0, 2)], [0, 1, 2]),
    ([(1, 0), (0, 2)], [1, 0, 2]),
])
def test_topological_order(edges, expected):
    assert topological_order(build_graph(3, edges, 2)) == expected


def test_descendants(chain3, diamond):
    assert descendants(chain3, {0}) == {1, 2}
    assert descendants(chain3, {2}) == set()
    assert descendants(diamond, {1}) == {3}
    assert ancestors(diamond, {3}) == {0, 1, 2}


def test_paths(chain3, fork, diamond):
    assert directed_paths(chain3, 0, 2) == [[0, 1, 2]]
    assert directed_paths(fork, 1, 2) == []
    assert directed_paths(diamond, 0, 3) == [[0, 1, 3], [0, 2, 3]]


def test_screen_keeps_upstream_change(chain3):
    assert screen_effective(chain3, [1, 1], [2, 1]) == {0}


def test_screen_drops_node_without_path(fork):
    assert screen_effective(fork, [1, 1], [1, 5]) == set()


def test_screen_drops_blocked_node(chain3):
    assert screen_effective(chain3, [1, 1], [2, 3]) == {1}


def test_screen_keeps_direct_parent_of_target():
    # both parents of Y change; neither path is blocked
    g = build_graph(3, [(0, 2), (1, 2), (0, 1)], 2)
    assert 1 in screen_effective(g, [0, 0], [1, 1])
    # 0 still reaches Y directly even though 1 is clamped
    assert screen_effective(g, [0, 0], [1, 1]) == {0, 1}


def test_screen_tolerance(chain3):
    assert screen_effective(chain3, [1, 1], [1 + 1e-13, 1]) == set()
    assert screen_effective(chain3, [1, 1], [1 + 1e-9, 1]) == {0}


def test_screen_length_mismatch(chain3):
    with pytest.raises(LengthMismatch):
        screen_effective(chain3, [1, 1, 1], [1, 1])


def test_screen_is_idempotent(small_dags):
    r = np.random.default_rng(0)
    for g in small_dags:
        x = r.normal(size=g.d)
        xs = x + r.normal(size=g.d) * (r.random(g.d) < 0.6)
        eff = screen_effective(g, x, xs)
        reset = x.copy()
        idx = sorted(eff)
        reset[idx] = xs[idx]
        assert screen_effective(g, x, reset) == eff


def test_paths_lie_in_descendants(small_dags):
    for g in small_dags:
        for i in g.variables:
            down = descendants(g, {i}) | {i}
            for p in directed_paths(g, i, g.target):
                assert set(p) <= down


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1), st.floats(0.1, 0.9))
def test_order_respects_edges(n, seed, p):
    r = np.random.default_rng(seed)
    perm = list(r.permutation(n - 1)) + [n - 1]
    edges = [(perm[a], perm[b]) for a in range(n) for b in range(a + 1, n) if r.random() < p]
    g = build_graph(n, edges, n - 1)
    pos = {v: k for k, v in enumerate(topological_order(g))}
    assert sorted(pos) == list(range(n))
    assert all(pos[i] < pos[j] for i, j in g.edges)


def test_json_round_trip(tmp_path, diamond):
    save_graph(diamond, tmp_path / "g.json")
    g2 = load_graph(tmp_path / "g.json")
    assert g2 == diamond and g2.order == diamond.order
    assert graph_from_dict(json.loads(json.dumps(diamond.to_dict()))) == diamond
