"""Mixture-of-experts node classification on graphs.

Sparse graph core, a small dense NN engine with manual backprop, five
expert node predictors, a pattern-based gating network, two-stage
training, and a CSBM simulation lab for generalization-loss bounds.
"""

from graphmoe.graph import (
    Graph,
    PropagationOperator,
    build_graph,
    graph_homophily,
    node_homophily,
    propagate,
)

__all__ = [
    "Graph",
    "PropagationOperator",
    "build_graph",
    "graph_homophily",
    "node_homophily",
    "propagate",
]

__version__ = "0.1.0"
