"""Weighted trees, rooting, paths and edge horizon times.

Nodes are dense integers ``0..n-1``.  Trees are immutable; re-rooting returns
a new :class:`DirectedTree`.  Children are always visited in ascending node id,
which fixes the breadth-first edge order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

from .errors import (
    CycleDetected,
    Disconnected,
    DuplicateEdge,
    NonPositiveInput,
    NonPositiveWeight,
    SameNode,
    TreeError,
    UnknownNode,
)

Edge = tuple[int, int]


@dataclass(frozen=True)
class UndirectedTree:
    node_count: int
    edges: tuple[tuple[int, int, float], ...]

    @cached_property
    def adjacency(self) -> dict[int, tuple[int, ...]]:
        adj: dict[int, list[int]] = {v: [] for v in range(self.node_count)}
        for u, v, _ in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return {v: tuple(sorted(nb)) for v, nb in adj.items()}

    @cached_property
    def _weights(self) -> dict[frozenset, float]:
        return {frozenset((u, v)): w for u, v, w in self.edges}

    def weight(self, u: int, v: int) -> float:
        try:
            return self._weights[frozenset((u, v))]
        except KeyError:
            raise UnknownNode(f"no edge between {u} and {v}") from None

    def degree(self, v: int) -> int:
        self._check_node(v)
        return len(self.adjacency[v])

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.node_count) if len(self.adjacency[v]) == 1)

    def is_leaf(self, v: int) -> bool:
        return self.degree(v) == 1

    @cached_property
    def star_center(self) -> int | None:
        """Center node when the tree is a star with at least two leaves, else None."""
        if self.node_count < 3:
            return None
        for v in range(self.node_count):
            if len(self.adjacency[v]) == self.node_count - 1:
                return v
        return None

    def _check_node(self, v: int) -> None:
        if not isinstance(v, (int,)) or isinstance(v, bool) or not 0 <= v < self.node_count:
            raise UnknownNode(f"node {v!r} is not in a tree with {self.node_count} nodes")


@dataclass(frozen=True)
class DirectedTree:
    """Tree oriented away from ``root``; ``directed_edges`` is in breadth-first order."""

    tree: UndirectedTree
    root: int
    directed_edges: tuple[Edge, ...]
    parent_of: dict[int, int] = field(repr=False)
    children_of: dict[int, tuple[int, ...]] = field(repr=False)

    def parent(self, v: int) -> int | None:
        return self.parent_of.get(v)

    def children(self, v: int) -> tuple[int, ...]:
        return self.children_of[v]

    def weight(self, u: int, v: int) -> float:
        return self.tree.weight(u, v)


def build_undirected(node_count: int, weighted_edges) -> UndirectedTree:
    """Validate ``(u, v, w)`` triples and return an :class:`UndirectedTree`."""
    if int(node_count) != node_count or node_count < 2:
        raise TreeError(f"a tree needs at least 2 nodes, got {node_count}")
    node_count = int(node_count)
    edges = []
    seen = set()
    for item in weighted_edges:
        u, v, w = item
        for x in (u, v):
            if int(x) != x or not 0 <= x < node_count:
                raise TreeError(f"edge endpoint {x!r} outside 0..{node_count - 1}")
        u, v, w = int(u), int(v), float(w)
        if not w > 0:
            raise NonPositiveWeight(f"edge {{{u},{v}}} has weight {w}")
        if u == v:
            raise CycleDetected(f"self-loop on node {u}")
        key = frozenset((u, v))
        if key in seen:
            raise DuplicateEdge(f"edge {{{u},{v}}} given twice")
        seen.add(key)
        edges.append((u, v, w))

    if len(edges) > node_count - 1:
        raise CycleDetected(f"{len(edges)} edges for {node_count} nodes")

    # union-find: any merge of two already-joined nodes is a cycle
    parent = list(range(node_count))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v, _ in edges:
        ru, rv = find(u), find(v)
        if ru == rv:
            raise CycleDetected(f"edge {{{u},{v}}} closes a cycle")
        parent[ru] = rv
    if len({find(x) for x in range(node_count)}) != 1:
        raise Disconnected(f"{node_count} nodes but only {len(edges)} edges connect them")
    return UndirectedTree(node_count, tuple(edges))


def root_at(tree: UndirectedTree, r: int) -> DirectedTree:
    tree._check_node(r)
    parent_of: dict[int, int] = {}
    children_of: dict[int, tuple[int, ...]] = {}
    order: list[Edge] = []
    queue = deque([r])
    visited = {r}
    while queue:
        v = queue.popleft()
        kids = tuple(c for c in tree.adjacency[v] if c not in visited)
        children_of[v] = kids
        for c in kids:
            visited.add(c)
            parent_of[c] = v
            order.append((v, c))
            queue.append(c)
    return DirectedTree(tree, r, tuple(order), parent_of, children_of)


def breadth_first_edges(dtree: DirectedTree) -> tuple[Edge, ...]:
    return dtree.directed_edges


def leaf_path(tree: UndirectedTree, a: int, b: int) -> tuple[Edge, ...]:
    """Directed edges of the unique path from ``a`` to ``b``.

    Works for any pair of distinct nodes, not only leaves.
    """
    tree._check_node(a)
    tree._check_node(b)
    if a == b:
        raise SameNode(f"path endpoints coincide ({a})")
    dtree = root_at(tree, a)
    path = []
    v = b
    while v != a:
        p = dtree.parent_of[v]
        path.append((p, v))
        v = p
    return tuple(reversed(path))


def horizon_time(epsilon: float, weight: float) -> float:
    """Diffusion duration ``epsilon / (2 * weight)`` assigned to an edge."""
    if not epsilon > 0 or not weight > 0:
        raise NonPositiveInput(f"epsilon and weight must be positive, got {epsilon}, {weight}")
    return epsilon / (2.0 * weight)


def star_tree(n_leaves: int, weight: float | None = None) -> UndirectedTree:
    """Star with center 0 and leaves ``1..n_leaves``; weights default to ``1/n_leaves``."""
    w = 1.0 / n_leaves if weight is None else weight
    return build_undirected(n_leaves + 1, [(0, i, w) for i in range(1, n_leaves + 1)])
