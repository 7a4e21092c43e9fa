"""Causal DAG with a distinguished sink target and the effective-intervention screen."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CycleError, GraphTooLarge, LengthMismatch, TargetNotSink

MAX_NODES = 64


@dataclass(frozen=True)
class CausalGraph:
    """Immutable DAG over ``node_count`` nodes; ``target`` is the outcome Y.

    Build instances with :func:`build_graph`, which validates acyclicity and
    that the target is a sink.
    """

    node_count: int
    edges: frozenset
    target: int
    parents: tuple = field(repr=False, compare=False)
    children: tuple = field(repr=False, compare=False)
    order: tuple = field(repr=False, compare=False)

    @property
    def variables(self) -> tuple:
        """Non-target nodes in index order (the intervenable coordinates)."""
        return tuple(i for i in range(self.node_count) if i != self.target)

    @property
    def d(self) -> int:
        return self.node_count - 1

    def sorted_edges(self) -> list:
        return sorted(self.edges)

    def to_dict(self) -> dict:
        return {
            "nodes": self.node_count,
            "target": self.target,
            "edges": [list(e) for e in self.sorted_edges()],
        }

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=int)
        for i, j in self.edges:
            a[i, j] = 1
        return a


def build_graph(node_count: int, edges: Iterable, target_index: int,
                max_nodes: int = MAX_NODES) -> CausalGraph:
    if node_count < 1:
        raise ValueError("node_count must be positive")
    if node_count > max_nodes:
        raise GraphTooLarge(f"{node_count} nodes exceeds guard of {max_nodes}")
    if not 0 <= target_index < node_count:
        raise ValueError(f"target index {target_index} out of range")
    edge_set = set()
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise ValueError(f"edge {(i, j)} has an endpoint out of range")
        if i == j:
            raise CycleError(f"self-loop on node {i}")
        edge_set.add((i, j))
    parents = [[] for _ in range(node_count)]
    children = [[] for _ in range(node_count)]
    for i, j in sorted(edge_set):
        parents[j].append(i)
        children[i].append(j)
    order = _kahn(node_count, parents, children)
    if len(order) < node_count:
        stuck = sorted(set(range(node_count)) - set(order))
        raise CycleError(f"directed cycle among nodes {stuck}")
    if children[target_index]:
        raise TargetNotSink(
            f"target {target_index} has outgoing edges to {children[target_index]}")
    return CausalGraph(
        node_count=node_count,
        edges=frozenset(edge_set),
        target=target_index,
        parents=tuple(tuple(p) for p in parents),
        children=tuple(tuple(c) for c in children),
        order=tuple(order),
    )


def _kahn(n, parents, children):
    indeg = [len(p) for p in parents]
    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        i = heapq.heappop(heap)
        order.append(i)
        for j in children[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(heap, j)
    return order


def topological_order(g: CausalGraph) -> list:
    """Kahn order with ties broken by the smallest ready index."""
    return list(g.order)


def descendants(g: CausalGraph, roots: Iterable[int]) -> set:
    roots = set(roots)
    seen = set()
    stack = list(roots)
    while stack:
        i = stack.pop()
        for j in g.children[i]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return seen - roots


def ancestors(g: CausalGraph, nodes: Iterable[int]) -> set:
    nodes = set(nodes)
    seen = set()
    stack = list(nodes)
    while stack:
        i = stack.pop()
        for j in g.parents[i]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return seen - nodes


def directed_paths(g: CausalGraph, src: int, dst: int) -> list:
    """All simple directed paths from ``src`` to ``dst``, lexicographically sorted."""
    paths = []

    def walk(node, path):
        if node == dst:
            paths.append(list(path))
            return
        for c in g.children[node]:
            path.append(c)
            walk(c, path)
            path.pop()

    if src == dst:
        return [[src]]
    walk(src, [src])
    return sorted(paths)


def _reaches(g: CausalGraph, src: int, dst: int, blocked: set) -> bool:
    stack = [src]
    seen = {src}
    while stack:
        i = stack.pop()
        for c in g.children[i]:
            if c == dst:
                return True
            if c in blocked or c in seen:
                continue
            seen.add(c)
            stack.append(c)
    return False


def screen_effective(g: CausalGraph, x: Sequence[float], x_star: Sequence[float],
                     atol: float = 1e-12) -> set:
    """Indices of ``x_star`` whose change can still move the target.

    Unchanged coordinates are dropped first. A changed coordinate is then
    dropped when every directed path to the target passes through another
    changed coordinate (that node is clamped, so the path is cut), or when no
    path exists. Deletions are swept in topological order until stable.
    ``x`` and ``x_star`` are indexed like ``g.variables``.
    """
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    vars_ = g.variables
    if x.shape != (len(vars_),) or x_star.shape != (len(vars_),):
        raise LengthMismatch(
            f"expected vectors of length {len(vars_)}, got {x.shape} and {x_star.shape}")
    remaining = {vars_[k] for k in range(len(vars_))
                 if abs(x_star[k] - x[k]) > atol}
    changed = True
    while changed:
        changed = False
        for i in g.order:
            if i not in remaining:
                continue
            if not _reaches(g, i, g.target, remaining - {i}):
                remaining.discard(i)
                changed = True
    pos = {v: k for k, v in enumerate(vars_)}
    return {pos[i] for i in remaining}


def graph_to_json(g: CausalGraph) -> str:
    return json.dumps(g.to_dict(), sort_keys=True)


def graph_from_dict(d: dict) -> CausalGraph:
    return build_graph(int(d["nodes"]), [tuple(e) for e in d["edges"]], int(d["target"]))


def save_graph(g: CausalGraph, path) -> None:
    Path(path).write_text(graph_to_json(g) + "\n")


def load_graph(path) -> CausalGraph:
    return graph_from_dict(json.loads(Path(path).read_text()))
