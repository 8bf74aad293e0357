import numpy as np
import pytest

from graphmoe.graph import build_graph


@pytest.fixture
def triangle():
    return build_graph([(0, 1), (1, 2), (2, 0)], 3)


@pytest.fixture
def path3():
    return build_graph([(0, 1), (1, 2)], 3)


def random_graph(rng, max_nodes=20, edge_prob=0.3):
    """Random undirected graph plus its dense adjacency."""
    n = int(rng.integers(2, max_nodes + 1))
    dense = np.zeros((n, n), dtype=bool)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < edge_prob:
                edges.append((i, j))
                dense[i, j] = dense[j, i] = True
    return build_graph(edges, n), dense


def brute_force_graph_homophily(dense, labels):
    """O(n^2) double-loop oracle for the mean node homophily."""
    vals = []
    for i in range(len(labels)):
        nbrs = [j for j in range(len(labels)) if dense[i, j]]
        if not nbrs:
            continue
        vals.append(sum(labels[j] == labels[i] for j in nbrs) / len(nbrs))
    if not vals:
        raise ValueError("all isolated")
    return sum(vals) / len(vals)
