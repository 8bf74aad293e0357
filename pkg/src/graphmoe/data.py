"""Dataset ingestion: the canonical bundle format.

A bundle is a JSON descriptor pointing at three plain-text files:
an edge list ("src<TAB>dst" per line, '#' comments), a feature matrix
(one comma-separated row of floats per node), and a label file (one
integer per node). Node ids are 0-based row indices shared by the
three files. Conversion from public dataset distributions lives in
scripts/, not here.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass

import numpy as np

from graphmoe.graph import Graph, build_graph, graph_homophily, read_edge_list

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetBundle:
    name: str
    edges_path: str
    features_path: str
    labels_path: str
    num_classes: int
    provenance: str = ""


def load_bundle(path: str) -> DatasetBundle:
    with open(path) as fh:
        raw = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        return DatasetBundle(
            name=raw["name"],
            edges_path=resolve(raw["edges"]),
            features_path=resolve(raw["features"]),
            labels_path=resolve(raw["labels"]),
            num_classes=int(raw["num_classes"]),
            provenance=raw.get("provenance", ""),
        )
    except KeyError as exc:
        raise DatasetError(f"{path}: bundle is missing key {exc}") from exc


def _read_features(path: str) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            with warnings.catch_warnings():
                # malformed tails warn today and will raise in future numpy
                warnings.simplefilter("ignore")
                try:
                    row = np.fromstring(line, sep=",")
                except ValueError:
                    row = np.empty(0)
            if row.size != line.count(",") + 1 or not np.isfinite(row).all():
                raise DatasetError(f"{path}:{lineno}: corrupted feature row")
            if width is None:
                width = row.size
            elif row.size != width:
                raise DatasetError(
                    f"{path}:{lineno}: expected {width} values, got {row.size}"
                )
            rows.append(row)
    if not rows:
        raise DatasetError(f"{path}: no feature rows")
    return np.vstack(rows)


def _read_labels(path: str) -> np.ndarray:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                labels.append(int(line))
            except ValueError as exc:
                raise DatasetError(
                    f"{path}:{lineno}: non-integer label {line!r}"
                ) from exc
    if not labels:
        raise DatasetError(f"{path}: no labels")
    return np.array(labels, dtype=np.int64)


def ingest_dataset(bundle: DatasetBundle) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Load and cross-validate a bundle; logs summary statistics."""
    features = _read_features(bundle.features_path)
    labels = _read_labels(bundle.labels_path)
    if features.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"{bundle.name}: {features.shape[0]} feature rows vs "
            f"{labels.shape[0]} labels"
        )
    if labels.min() < 0 or labels.max() >= bundle.num_classes:
        raise DatasetError(
            f"{bundle.name}: labels must lie in [0, {bundle.num_classes})"
        )
    edges = read_edge_list(bundle.edges_path)
    graph = build_graph(edges, num_nodes=labels.shape[0])
    log.info(
        "dataset %s: n=%d |E|=%d d=%d C=%d homophily=%.4f",
        bundle.name, graph.num_nodes, graph.num_edges, features.shape[1],
        bundle.num_classes, graph_homophily(graph, labels),
    )
    return graph, features, labels


def save_dataset(directory: str, name: str, graph_edges, features: np.ndarray,
                 labels: np.ndarray, num_classes: int,
                 provenance: str = "") -> str:
    """Write a bundle to disk; returns the bundle JSON path."""
    os.makedirs(directory, exist_ok=True)
    edges_path = os.path.join(directory, "edges.tsv")
    with open(edges_path, "w") as fh:
        fh.write("# src\tdst\n")
        for u, v in graph_edges:
            fh.write(f"{u}\t{v}\n")
    feat_path = os.path.join(directory, "features.csv")
    with open(feat_path, "w") as fh:
        for row in features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    labels_path = os.path.join(directory, "labels.txt")
    with open(labels_path, "w") as fh:
        for y in labels:
            fh.write(f"{int(y)}\n")
    bundle_path = os.path.join(directory, f"{name}.json")
    with open(bundle_path, "w") as fh:
        json.dump({
            "name": name,
            "edges": "edges.tsv",
            "features": "features.csv",
            "labels": "labels.txt",
            "num_classes": num_classes,
            "provenance": provenance,
        }, fh, indent=2)
    return bundle_path
