"""Sparse undirected graph, propagation operators, and label homophily.

The adjacency is stored CSR with sorted column indices, symmetric and
free of self-loops; self-looped variants used by the normalized
operators are derived views, never stored back into the base graph.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphConstructionError(ValueError):
    """Raised when an edge list cannot be turned into a valid graph."""


class UndefinedHomophilyError(ValueError):
    """Homophily is undefined for isolated nodes; never silently zero."""


ROW_NORMALIZED = "row_normalized"
SYM_NORMALIZED = "sym_normalized"
HIGH_PASS = "high_pass"

_OPERATOR_KINDS = (ROW_NORMALIZED, SYM_NORMALIZED, HIGH_PASS)


class Graph:
    """Immutable undirected graph: symmetric CSR adjacency, no self-loops.

    Construct through :func:`build_graph` (or :func:`from_csr` for an
    already-validated matrix). Instances are safe to share across
    workers; nothing mutates after construction.
    """

    __slots__ = ("_adj", "_degrees", "_op_cache")

    def __init__(self, adj: sp.csr_matrix):
        self._adj = adj
        self._degrees = np.diff(adj.indptr).astype(np.int64)
        self._op_cache: dict[str, sp.csr_matrix] = {}

    @property
    def num_nodes(self) -> int:
        return self._adj.shape[0]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return self._adj.nnz // 2

    @property
    def degrees(self) -> np.ndarray:
        return self._degrees

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Base adjacency (0/1 CSR). Treat as read-only."""
        return self._adj

    def neighbors(self, node: int) -> np.ndarray:
        """Sorted neighbor indices of ``node``."""
        lo, hi = self._adj.indptr[node], self._adj.indptr[node + 1]
        return self._adj.indices[lo:hi]

    def operator_matrix(self, kind: str) -> sp.csr_matrix:
        """Sparse matrix of a propagation operator, cached per graph."""
        if kind not in _OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind: {kind!r}")
        mat = self._op_cache.get(kind)
        if mat is None:
            mat = _build_operator(self, kind)
            self._op_cache[kind] = mat
        return mat


class PropagationOperator:
    """One of the three propagation filters over a fixed graph.

    ``row_normalized``  D^-1 A           (zero rows for isolated nodes)
    ``sym_normalized``  D~^-1/2 A~ D~^-1/2   with self-loops
    ``high_pass``       I - D~^-1/2 A~ D~^-1/2
    """

    __slots__ = ("kind", "graph")

    def __init__(self, kind: str, graph: Graph):
        if kind not in _OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind: {kind!r}")
        self.kind = kind
        self.graph = graph

    @property
    def matrix(self) -> sp.csr_matrix:
        return self.graph.operator_matrix(self.kind)


def _build_operator(graph: Graph, kind: str) -> sp.csr_matrix:
    adj = graph.adjacency
    n = graph.num_nodes
    if kind == ROW_NORMALIZED:
        deg = graph.degrees.astype(np.float64)
        inv = np.zeros(n)
        nz = deg > 0
        inv[nz] = 1.0 / deg[nz]
        mat = sp.diags(inv) @ adj
    else:
        adj_sl = (adj + sp.eye(n, format="csr")).tocsr()
        deg_sl = graph.degrees.astype(np.float64) + 1.0
        half = sp.diags(1.0 / np.sqrt(deg_sl))
        sym = half @ adj_sl @ half
        if kind == SYM_NORMALIZED:
            mat = sym
        else:
            mat = sp.eye(n, format="csr") - sym
    mat = sp.csr_matrix(mat)
    mat.sort_indices()
    return mat


def build_graph(edge_list: Iterable[tuple[int, int]], num_nodes: int) -> Graph:
    """Build a graph from raw node pairs.

    Duplicate edges, reversed duplicates, and self-loops in the input are
    tolerated: the result is deduplicated, symmetrized, and self-loop
    free. Indices outside [0, num_nodes) raise, naming the offending edge.
    """
    if num_nodes < 0:
        raise GraphConstructionError(f"num_nodes must be >= 0, got {num_nodes}")
    edges = np.asarray(list(edge_list), dtype=np.int64)
    if edges.size == 0:
        edges = edges.reshape(0, 2)
    if edges.ndim != 2 or edges.shape[1] != 2:
        raise GraphConstructionError("edge list must be a sequence of (u, v) pairs")

    bad = (edges < 0) | (edges >= num_nodes)
    if bad.any():
        u, v = edges[bad.any(axis=1)][0]
        raise GraphConstructionError(
            f"edge ({u}, {v}) has an endpoint outside [0, {num_nodes})"
        )

    keep = edges[:, 0] != edges[:, 1]
    edges = edges[keep]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.ones(rows.shape[0], dtype=np.float64)
    adj = sp.csr_matrix((data, (rows, cols)), shape=(num_nodes, num_nodes))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    return Graph(adj)


def from_csr(adj: sp.csr_matrix) -> Graph:
    """Wrap a CSR matrix already known to be symmetric, binary, loop-free."""
    adj = sp.csr_matrix(adj)
    adj.sort_indices()
    return Graph(adj)


def read_edge_list(path) -> list[tuple[int, int]]:
    """Parse the plain-text edge format: one "src<TAB>dst" per line.

    Blank lines are skipped; lines starting with '#' are comments.
    Whitespace other than a single tab is tolerated on parse.
    """
    edges: list[tuple[int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphConstructionError(
                    f"{path}:{lineno}: expected 'src<TAB>dst', got {line!r}"
                )
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise GraphConstructionError(
                    f"{path}:{lineno}: non-integer node index in {line!r}"
                ) from exc
    return edges


def node_homophily(graph: Graph, labels: Sequence[int], node: int) -> float:
    """Fraction of ``node``'s neighbors sharing its label.

    Raises :class:`UndefinedHomophilyError` for isolated nodes rather
    than returning a conventional 0.
    """
    labels = np.asarray(labels)
    nbrs = graph.neighbors(node)
    if nbrs.size == 0:
        raise UndefinedHomophilyError(f"node {node} has degree 0")
    return float(np.count_nonzero(labels[nbrs] == labels[node]) / nbrs.size)


def graph_homophily(graph: Graph, labels: Sequence[int]) -> float:
    """Mean node homophily over nodes of degree >= 1."""
    labels = np.asarray(labels)
    if labels.shape[0] != graph.num_nodes:
        raise ValueError(
            f"labels length {labels.shape[0]} != num_nodes {graph.num_nodes}"
        )
    deg = graph.degrees
    eligible = np.flatnonzero(deg > 0)
    if eligible.size == 0:
        raise UndefinedHomophilyError("all nodes are isolated")
    adj = graph.adjacency
    total = 0.0
    for v in eligible:
        nbrs = adj.indices[adj.indptr[v] : adj.indptr[v + 1]]
        total += np.count_nonzero(labels[nbrs] == labels[v]) / nbrs.size
    return float(total / eligible.size)


def node_homophily_vector(graph: Graph, labels: Sequence[int]) -> np.ndarray:
    """Per-node homophily; NaN marks isolated nodes (undefined)."""
    labels = np.asarray(labels)
    out = np.full(graph.num_nodes, np.nan)
    adj = graph.adjacency
    for v in range(graph.num_nodes):
        nbrs = adj.indices[adj.indptr[v] : adj.indptr[v + 1]]
        if nbrs.size:
            out[v] = np.count_nonzero(labels[nbrs] == labels[v]) / nbrs.size
    return out


def propagate(op: PropagationOperator, signal: np.ndarray) -> np.ndarray:
    """Apply a propagation operator to an n x d signal (or length-n vector)."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[0] != op.graph.num_nodes:
        raise ValueError(
            f"signal has {signal.shape[0]} rows, graph has {op.graph.num_nodes} nodes"
        )
    return op.matrix @ signal
