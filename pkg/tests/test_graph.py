import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphmoe.graph import (
    GraphConstructionError,
    HIGH_PASS,
    PropagationOperator,
    ROW_NORMALIZED,
    SYM_NORMALIZED,
    UndefinedHomophilyError,
    build_graph,
    graph_homophily,
    node_homophily,
    node_homophily_vector,
    propagate,
    read_edge_list,
)
from tests.conftest import brute_force_graph_homophily, random_graph


class TestBuildGraph:
    def test_dedup_and_self_loop_stripping(self):
        g = build_graph([(0, 1), (1, 0), (1, 1)], 3)
        assert g.num_edges == 1
        assert list(g.degrees) == [1, 1, 0]
        assert list(g.neighbors(0)) == [1]

    def test_empty_edge_list(self):
        g = build_graph([], 2)
        assert list(g.degrees) == [0, 0]
        assert g.num_edges == 0

    def test_triangle_degrees(self, triangle):
        assert list(triangle.degrees) == [2, 2, 2]

    def test_out_of_range_edge_named(self):
        with pytest.raises(GraphConstructionError, match=r"\(0, 5\)"):
            build_graph([(0, 5)], 3)
        with pytest.raises(GraphConstructionError, match=r"-1"):
            build_graph([(-1, 0)], 3)

    def test_adjacency_symmetric_sorted(self):
        rng = np.random.default_rng(7)
        g, dense = random_graph(rng, max_nodes=15)
        adj = g.adjacency.toarray()
        assert (adj == adj.T).all()
        assert (np.diag(adj) == 0).all()
        for v in range(g.num_nodes):
            nbrs = g.neighbors(v)
            assert (np.diff(nbrs) > 0).all() if nbrs.size > 1 else True

    def test_degrees_match_row_counts(self):
        rng = np.random.default_rng(3)
        g, dense = random_graph(rng)
        assert (g.degrees == dense.sum(axis=1)).all()


class TestHomophily:
    def test_triangle_all_same(self, triangle):
        assert node_homophily(triangle, [0, 0, 0], 0) == 1.0
        assert graph_homophily(triangle, [0, 0, 0]) == 1.0

    def test_star_center_half(self):
        g = build_graph([(0, 1), (0, 2), (0, 3), (0, 4)], 5)
        labels = [0, 0, 0, 1, 1]
        assert node_homophily(g, labels, 0) == 0.5

    def test_path_middle_zero(self, path3):
        assert node_homophily(path3, [0, 1, 0], 1) == 0.0

    def test_four_cycle_alternating(self):
        g = build_graph([(0, 1), (1, 2), (2, 3), (3, 0)], 4)
        assert graph_homophily(g, [0, 1, 0, 1]) == 0.0

    def test_degree_zero_is_undefined(self):
        g = build_graph([(0, 1)], 3)
        with pytest.raises(UndefinedHomophilyError):
            node_homophily(g, [0, 0, 0], 2)

    def test_all_isolated_is_undefined(self):
        g = build_graph([], 4)
        with pytest.raises(UndefinedHomophilyError):
            graph_homophily(g, [0, 1, 0, 1])

    def test_isolated_nodes_excluded_from_mean(self):
        g = build_graph([(0, 1)], 3)
        assert graph_homophily(g, [0, 0, 1]) == 1.0

    def test_homophily_vector_marks_isolated(self):
        g = build_graph([(0, 1)], 3)
        vec = node_homophily_vector(g, [0, 0, 1])
        assert vec[0] == 1.0 and vec[1] == 1.0 and np.isnan(vec[2])

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            g, dense = random_graph(rng, max_nodes=20)
            if not g.degrees.max():
                continue
            labels = rng.integers(0, 3, size=g.num_nodes)
            expected = brute_force_graph_homophily(dense, labels)
            assert abs(graph_homophily(g, labels) - expected) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_brute_force_property(self, data):
        n = data.draw(st.integers(2, 12))
        pairs = data.draw(st.lists(
            st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)),
            max_size=40))
        labels = data.draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
        g = build_graph(pairs, n)
        dense = g.adjacency.toarray().astype(bool)
        if g.degrees.max() == 0:
            with pytest.raises(UndefinedHomophilyError):
                graph_homophily(g, labels)
            return
        expected = brute_force_graph_homophily(dense, labels)
        assert abs(graph_homophily(g, labels) - expected) < 1e-12


class TestPropagate:
    def test_row_normalized_triangle_one_hot(self, triangle):
        op = PropagationOperator(ROW_NORMALIZED, triangle)
        signal = np.eye(3)
        out = propagate(op, signal)
        dense = triangle.adjacency.toarray()
        expected = (dense / dense.sum(axis=1, keepdims=True)) @ signal
        np.testing.assert_allclose(out, expected, atol=1e-15)
        np.testing.assert_allclose(out[0], [0.0, 0.5, 0.5])

    def test_row_normalized_zero_row_for_isolated(self):
        g = build_graph([(0, 1)], 3)
        op = PropagationOperator(ROW_NORMALIZED, g)
        out = propagate(op, np.ones((3, 2)))
        np.testing.assert_allclose(out[2], [0.0, 0.0])

    def test_sym_normalized_single_edge_hand_values(self):
        g = build_graph([(0, 1)], 2)
        mat = g.operator_matrix(SYM_NORMALIZED).toarray()
        np.testing.assert_allclose(mat, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_high_pass_constant_complement(self, triangle):
        low = PropagationOperator(SYM_NORMALIZED, triangle)
        high = PropagationOperator(HIGH_PASS, triangle)
        c = 3.7 * np.ones((3, 2))
        np.testing.assert_allclose(propagate(high, c), c - propagate(low, c),
                                   atol=1e-12)

    def test_low_plus_high_is_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            g, _ = random_graph(rng, max_nodes=15)
            x = rng.standard_normal((g.num_nodes, 3))
            low = propagate(PropagationOperator(SYM_NORMALIZED, g), x)
            high = propagate(PropagationOperator(HIGH_PASS, g), x)
            np.testing.assert_allclose(low + high, x, atol=1e-10)

    def test_row_normalized_preserves_constant(self):
        g = build_graph([(0, 1), (1, 2), (2, 0), (2, 3), (3, 0)], 4)
        assert g.degrees.min() >= 1
        op = PropagationOperator(ROW_NORMALIZED, g)
        x = np.ones((4, 1))
        np.testing.assert_allclose(propagate(op, x), x, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(9)
        g, _ = random_graph(rng, max_nodes=12)
        x = rng.standard_normal((g.num_nodes, 2))
        z = rng.standard_normal((g.num_nodes, 2))
        for kind in (ROW_NORMALIZED, SYM_NORMALIZED, HIGH_PASS):
            op = PropagationOperator(kind, g)
            lhs = propagate(op, 2.5 * x - 1.25 * z)
            rhs = 2.5 * propagate(op, x) - 1.25 * propagate(op, z)
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_dimension_mismatch(self, triangle):
        op = PropagationOperator(ROW_NORMALIZED, triangle)
        with pytest.raises(ValueError):
            propagate(op, np.ones((4, 2)))

    def test_unknown_kind_rejected(self, triangle):
        with pytest.raises(ValueError):
            PropagationOperator("bandpass", triangle)


class TestEdgeListFormat:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "edges.tsv"
        path.write_text("# comment line\n0\t1\n\n1\t2\n")
        assert read_edge_list(path) == [(0, 1), (1, 2)]

    def test_bad_line_reports_number(self, tmp_path):
        path = tmp_path / "edges.tsv"
        path.write_text("0\t1\nnot an edge here\n")
        with pytest.raises(GraphConstructionError, match=":2"):
            read_edge_list(path)
