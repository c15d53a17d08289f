import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treedsb.errors import (
    CycleDetected,
    Disconnected,
    DuplicateEdge,
    NonPositiveInput,
    NonPositiveWeight,
    SameNode,
    UnknownNode,
)
from treedsb.tree import (
    breadth_first_edges,
    build_undirected,
    horizon_time,
    leaf_path,
    root_at,
    star_tree,
)

FIVE_EDGES = [(3, 1, 1.0), (1, 2, 1.0), (1, 0, 1.0), (0, 4, 1.0)]


@st.composite
def trees(draw, max_nodes=12):
    """Random labelled tree: attach node i to a random earlier node, then relabel."""
    n = draw(st.integers(2, max_nodes))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    perm = draw(st.permutations(range(n)))
    weights = draw(st.lists(st.floats(0.05, 5.0), min_size=n - 1, max_size=n - 1))
    edges = [(perm[i], perm[p], w) for i, p, w in zip(range(1, n), parents, weights)]
    return build_undirected(n, edges)


@st.composite
def tree_and_nodes(draw, k=2):
    t = draw(trees())
    nodes = [draw(st.integers(0, t.node_count - 1)) for _ in range(k)]
    return t, nodes


class TestBuild:
    def test_star(self):
        t = build_undirected(4, [(0, 1, 1 / 3), (0, 2, 1 / 3), (0, 3, 1 / 3)])
        assert t.leaves == (1, 2, 3)
        assert t.star_center == 0

    def test_five_node_tree(self):
        t = build_undirected(5, FIVE_EDGES)
        assert t.leaves == (2, 3, 4)
        assert t.star_center is None

    def test_extra_edge_is_cycle(self):
        with pytest.raises(CycleDetected):
            build_undirected(4, [(0, 1, 1), (0, 2, 1), (0, 3, 1), (1, 2, 1)])

    def test_cycle_with_right_edge_count(self):
        with pytest.raises(CycleDetected):
            build_undirected(4, [(0, 1, 1), (1, 2, 1), (2, 0, 1)])

    def test_disconnected(self):
        with pytest.raises(Disconnected):
            build_undirected(4, [(0, 1, 1), (2, 3, 1)])

    def test_bad_weight(self):
        with pytest.raises(NonPositiveWeight):
            build_undirected(2, [(0, 1, 0.0)])
        with pytest.raises(NonPositiveWeight):
            build_undirected(2, [(0, 1, -1.0)])

    def test_duplicate(self):
        with pytest.raises(DuplicateEdge):
            build_undirected(3, [(0, 1, 1), (1, 0, 2)])

    def test_self_loop(self):
        with pytest.raises(CycleDetected):
            build_undirected(2, [(0, 0, 1)])

    def test_star_tree_helper(self):
        t = star_tree(3)
        assert t.node_count == 4
        assert all(w == pytest.approx(1 / 3) for _, _, w in t.edges)


class TestRooting:
    def test_star_rooted_at_leaf(self):
        d = root_at(star_tree(3), 3)
        assert d.children(3) == (0,)
        assert d.children(0) == (1, 2)
        assert d.parent(3) is None

    def test_five_node_rooted_at_3(self):
        d = root_at(build_undirected(5, FIVE_EDGES), 3)
        assert d.directed_edges == ((3, 1), (1, 0), (1, 2), (0, 4))
        assert set(d.directed_edges) == {(3, 1), (1, 2), (1, 0), (0, 4)}

    def test_two_nodes(self):
        t = build_undirected(2, [(0, 1, 1.0)])
        assert root_at(t, 0).directed_edges == ((0, 1),)
        assert root_at(t, 1).directed_edges == ((1, 0),)

    def test_unknown_root(self):
        with pytest.raises(UnknownNode):
            root_at(star_tree(3), 7)

    def test_bfs_star_leaf_first(self):
        assert breadth_first_edges(root_at(star_tree(3), 3))[0] == (3, 0)

    def test_bfs_five_node_from_4(self):
        order = breadth_first_edges(root_at(build_undirected(5, FIVE_EDGES), 4))
        pos = {e: i for i, e in enumerate(order)}
        assert pos[(4, 0)] < pos[(0, 1)] < pos[(1, 2)]
        assert pos[(0, 1)] < pos[(1, 3)]


class TestPaths:
    def test_star_path(self):
        assert leaf_path(star_tree(3), 3, 1) == ((3, 0), (0, 1))

    def test_five_node_path(self):
        assert leaf_path(build_undirected(5, FIVE_EDGES), 3, 4) == ((3, 1), (1, 0), (0, 4))

    def test_same_node(self):
        with pytest.raises(SameNode):
            leaf_path(star_tree(3), 2, 2)

    def test_unknown_node(self):
        with pytest.raises(UnknownNode):
            leaf_path(star_tree(3), 1, 9)


class TestHorizon:
    @pytest.mark.parametrize(
        "eps, w, expected",
        [(0.1, 1 / 3, 0.15), (2.0, 1.0, 1.0), (0.5, 1 / 3, 0.75)],
    )
    def test_values(self, eps, w, expected):
        assert horizon_time(eps, w) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("eps, w", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_non_positive(self, eps, w):
        with pytest.raises(NonPositiveInput):
            horizon_time(eps, w)


# ---------------------------------------------------------------------------
# invariants, 1000 random cases each
# ---------------------------------------------------------------------------

PROPS = settings(max_examples=1000, deadline=None)


@PROPS
@given(tree_and_nodes(1))
def test_edge_count_and_parents(tn):
    t, (r,) = tn
    d = root_at(t, r)
    assert len(d.directed_edges) == t.node_count - 1
    assert {frozenset(e) for e in d.directed_edges} == {frozenset((u, v)) for u, v, _ in t.edges}
    assert set(d.parent_of) == set(range(t.node_count)) - {r}
    # breadth-first: every edge comes after the edge into its parent
    pos = {e: i for i, e in enumerate(d.directed_edges)}
    for p, c in d.directed_edges:
        if p != r:
            assert pos[(d.parent(p), p)] < pos[(p, c)]
    if t.is_leaf(r):
        assert d.directed_edges[0][0] == r


@PROPS
@given(tree_and_nodes(2))
def test_rerooting_flips_exactly_the_path(tn):
    t, (r, r2) = tn
    a, b = set(root_at(t, r).directed_edges), set(root_at(t, r2).directed_edges)
    flipped = {e for e in a if (e[1], e[0]) in b}
    expected = set() if r == r2 else set(leaf_path(t, r, r2))
    assert flipped == expected
    assert a - flipped == b - {(v, u) for u, v in flipped}


@PROPS
@given(tree_and_nodes(2))
def test_path_chains_and_reverses(tn):
    t, (a, b) = tn
    if a == b:
        return
    path = leaf_path(t, a, b)
    assert path[0][0] == a and path[-1][1] == b
    for (u1, v1), (u2, v2) in zip(path, path[1:]):
        assert v1 == u2
    assert len({frozenset(e) for e in path}) == len(path)
    back = leaf_path(t, b, a)
    assert back == tuple((v, u) for u, v in reversed(path))


@PROPS
@given(tree_and_nodes(3))
def test_two_paths_use_each_edge_at_most_twice(tn):
    t, (a, b, c) = tn
    if a == b or b == c:
        return
    both = [frozenset(e) for e in leaf_path(t, a, b) + leaf_path(t, b, c)]
    counts = {e: both.count(e) for e in both}
    assert max(counts.values()) <= 2


@PROPS
@given(
    st.floats(1e-3, 10.0),
    st.floats(1e-2, 10.0),
    st.sampled_from([2, 4, 10, 50, 100]),
)
def test_discretized_edge_recovers_weight(eps, w, N):
    # a chain of N sub-edges of duration gamma_k has weights eps / (2 gamma_k);
    # sum of 1 / w_k equals 1 / w
    from treedsb.sde import make_schedule

    T = horizon_time(eps, w)
    gamma0 = T / (10 * N)
    steps = make_schedule(N, gamma0, T).steps
    sub_w = eps / (2 * steps)
    np.testing.assert_allclose(np.sum(1.0 / sub_w), 1.0 / w, rtol=1e-12)
