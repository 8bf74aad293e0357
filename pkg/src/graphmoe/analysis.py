"""Bucketed analyses, ablation arms, and CSV artifact emission.

Nodes are grouped into equal-count buckets by homophily or degree and
per-bucket accuracies / expert-weight means are reported, mirroring
the grouped-bar analyses. All CSVs use shortest-repr float formatting
so that re-parsing reproduces the in-memory values exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from graphmoe.graph import Graph, node_homophily_vector
from graphmoe.training import RunResult, TrainConfig, run_experiment

log = logging.getLogger(__name__)

ABLATION_KINDS = ("no_global", "no_local", "average_weights",
                  "no_residual_experts")


@dataclass
class BucketAssignment:
    """Equal-count partition of a node subset by a scalar value."""

    buckets: list[np.ndarray]
    bounds: list[tuple[float, float]]
    merged: bool
    eligible: np.ndarray

    @property
    def num_buckets(self) -> int:
        return len(self.buckets)

    def counts(self) -> list[int]:
        return [int(b.size) for b in self.buckets]


def _quantile_buckets(node_ids: np.ndarray, values: np.ndarray,
                      num_buckets: int) -> BucketAssignment:
    distinct = np.unique(values)
    merged = distinct.size < num_buckets
    if merged:
        log.warning(
            "only %d distinct values for %d requested buckets; merging",
            distinct.size, num_buckets,
        )
        buckets = [node_ids[values == v] for v in distinct]
        bounds = [(float(v), float(v)) for v in distinct]
        return BucketAssignment(buckets, bounds, True, node_ids)
    order = np.lexsort((node_ids, values))
    chunks = np.array_split(order, num_buckets)
    buckets = [np.sort(node_ids[c]) for c in chunks]
    bounds = [(float(values[c[0]]), float(values[c[-1]])) for c in chunks]
    return BucketAssignment(buckets, bounds, False, node_ids)


def bucket_by_homophily(graph: Graph, labels: np.ndarray,
                        num_buckets: int = 5,
                        nodes: np.ndarray | None = None) -> BucketAssignment:
    """Equal-count homophily buckets over degree>=1 nodes (optionally a subset)."""
    homo = node_homophily_vector(graph, labels)
    if nodes is None:
        nodes = np.arange(graph.num_nodes)
    eligible = nodes[np.isfinite(homo[nodes])]
    if eligible.size == 0:
        raise ValueError("no degree>=1 nodes to bucket")
    return _quantile_buckets(eligible, homo[eligible], num_buckets)


def bucket_by_degree(graph: Graph, nodes: np.ndarray | None = None,
                     num_buckets: int = 5) -> BucketAssignment:
    """Equal-count degree buckets within a node subset."""
    if nodes is None:
        nodes = np.arange(graph.num_nodes)
    nodes = np.asarray(nodes)
    if nodes.size == 0:
        raise ValueError("empty node subset")
    return _quantile_buckets(nodes, graph.degrees[nodes].astype(np.float64),
                             num_buckets)


@dataclass
class BucketReport:
    bounds: list[tuple[float, float]]
    counts: list[int]
    accuracy: dict[str, list[float | None]] = field(default_factory=dict)
    mean_weights: np.ndarray | None = None  # (num_experts, num_buckets)


def per_bucket_accuracy(predictions: dict[str, np.ndarray], labels: np.ndarray,
                        assignment: BucketAssignment) -> BucketReport:
    """Accuracy per (model, bucket); empty buckets report None, not zero."""
    report = BucketReport(bounds=assignment.bounds, counts=assignment.counts())
    for model, preds in predictions.items():
        accs: list[float | None] = []
        for bucket in assignment.buckets:
            if bucket.size == 0:
                accs.append(None)
                continue
            accs.append(float(np.mean(preds[bucket] == labels[bucket])))
        report.accuracy[model] = accs
    return report


def expert_weight_profile(gate_weights: np.ndarray,
                          assignment: BucketAssignment) -> np.ndarray:
    """Mean gate weight per (expert, bucket); columns remain on the simplex."""
    t = gate_weights.shape[1]
    out = np.full((t, assignment.num_buckets), np.nan)
    for b, bucket in enumerate(assignment.buckets):
        if bucket.size:
            out[:, b] = gate_weights[bucket].mean(axis=0)
    return out


def ablated_config(kind: str, config: TrainConfig) -> TrainConfig:
    if kind == "no_global":
        return replace(config, use_global=False)
    if kind == "no_local":
        return replace(config, use_local=False)
    if kind == "average_weights":
        return replace(config, uniform_gate=True)
    if kind == "no_residual_experts":
        kept = tuple(s for s in config.expert_specs if not s.residual)
        if not kept:
            raise ValueError("ablation would remove every expert")
        return replace(config, expert_specs=kept)
    raise ValueError(f"unknown ablation kind: {kind!r}")


def run_ablation(kind: str, config: TrainConfig, graph: Graph,
                 features: np.ndarray, labels: np.ndarray,
                 split_indices=range(10), seeds=(0, 1, 2),
                 jobs: int = 1) -> tuple[RunResult, RunResult]:
    """Standard protocol for the full config and the ablated variant."""
    variant = ablated_config(kind, config)
    full = run_experiment(config, graph, features, labels,
                          split_indices=split_indices, seeds=seeds, jobs=jobs)
    ablated = run_experiment(variant, graph, features, labels,
                             split_indices=split_indices, seeds=seeds, jobs=jobs)
    return full, ablated


def sweep_walk_length(config: TrainConfig, graph: Graph, features: np.ndarray,
                      labels: np.ndarray, lengths=(5, 10, 20, 40),
                      split_indices=range(10), seeds=(0, 1, 2),
                      jobs: int = 1) -> list[dict]:
    """Mean/std accuracy per walk length; no monotonicity implied."""
    rows = []
    for length in lengths:
        cfg = replace(config, walk=replace(config.walk, walk_length=length))
        result = run_experiment(cfg, graph, features, labels,
                                split_indices=split_indices, seeds=seeds,
                                jobs=jobs)
        rows.append({"walk_length": length, "mean_acc": result.mean_acc,
                     "std_acc": result.std_acc, "runs": len(result.entries)})
    return rows


# ---------------------------------------------------------------------------
# CSV artifacts. repr-formatted floats round-trip exactly through float().

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def bucket_accuracy_rows(report: BucketReport) -> tuple[list[str], list[list]]:
    header = ["bucket", "lo", "hi", "count", "model", "accuracy"]
    rows = []
    for model, accs in report.accuracy.items():
        for b, acc in enumerate(accs):
            lo, hi = report.bounds[b]
            rows.append([b, lo, hi, report.counts[b], model, acc])
    return header, rows


def weight_profile_rows(profile: np.ndarray, assignment: BucketAssignment,
                        expert_names: list[str]) -> tuple[list[str], list[list]]:
    header = ["bucket", "lo", "hi", "count", "expert", "mean_weight"]
    rows = []
    for j, name in enumerate(expert_names):
        for b in range(assignment.num_buckets):
            lo, hi = assignment.bounds[b]
            weight = profile[j, b]
            rows.append([b, lo, hi, assignment.counts()[b], name,
                         None if np.isnan(weight) else float(weight)])
    return header, rows


def pattern_rows(patterns: np.ndarray,
                 homophily: np.ndarray | None = None) -> tuple[list[str], list[list]]:
    header = ["node", "score_mean", "score_std", "score_min", "score_max",
              "score_frac_gt_half", "degree_channel"]
    if homophily is not None:
        header.append("homophily")
    rows = []
    for i, pat in enumerate(patterns):
        row = [i] + [float(x) for x in pat]
        if homophily is not None:
            h = homophily[i]
            row.append(None if np.isnan(h) else float(h))
        rows.append(row)
    return header, rows


def distribution_rows(graph: Graph, labels: np.ndarray) -> tuple[list[str], list[list]]:
    header = ["node", "homophily", "degree"]
    homo = node_homophily_vector(graph, labels)
    rows = []
    for i in range(graph.num_nodes):
        h = homo[i]
        rows.append([i, None if np.isnan(h) else float(h), int(graph.degrees[i])])
    return header, rows


def walk_sweep_rows(rows: list[dict]) -> tuple[list[str], list[list]]:
    header = ["walk_length", "mean_acc", "std_acc", "runs"]
    return header, [[r["walk_length"], r["mean_acc"], r["std_acc"], r["runs"]]
                    for r in rows]


def ablation_rows(kind: str, full: RunResult,
                  ablated: RunResult) -> tuple[list[str], list[list]]:
    header = ["arm", "kind", "mean_acc", "std_acc", "runs"]
    return header, [
        ["full", kind, full.mean_acc, full.std_acc, len(full.entries)],
        ["ablated", kind, ablated.mean_acc, ablated.std_acc,
         len(ablated.entries)],
    ]


def write_manifest(out_dir: str, entries: list[dict]) -> str:
    path = os.path.join(out_dir, "manifest.json")
    existing = []
    if os.path.exists(path):
        with open(path) as fh:
            existing = json.load(fh)
    existing.extend(entries)
    with open(path, "w") as fh:
        json.dump(existing, fh, indent=2)
    return path
