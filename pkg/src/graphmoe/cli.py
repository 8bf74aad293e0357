"""Command-line surface: ingestion, training protocol, analyses, CSBM lab.

Every command writes its artifacts under --out-dir and appends them to
a manifest.json there. Config files are JSON mirroring TrainConfig;
--set key=value overrides individual entries.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from graphmoe import analysis as an
from graphmoe import csbm
from graphmoe.data import load_bundle, ingest_dataset
from graphmoe.graph import graph_homophily, node_homophily_vector
from graphmoe.patterns import score_matrix, summarize_scores
from graphmoe.training import (
    SplitSpec,
    TrainConfig,
    config_from_dict,
    load_mixture,
    make_splits,
    run_experiment,
)

log = logging.getLogger("graphmoe.cli")


def _load_config(args) -> TrainConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not raw:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key.startswith("walk."):
            data.setdefault("walk", {})[key.split(".", 1)[1]] = value
        else:
            data[key] = value
    if args.seed is not None:
        data["seed"] = args.seed
    return config_from_dict(data)


def _ensure_out(args) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


def _emit(out_dir: str, name: str, header, rows, kind: str) -> str:
    path = os.path.join(out_dir, name)
    an.write_csv(path, header, rows)
    an.write_manifest(out_dir, [{"file": name, "kind": kind}])
    return path


def _emit_json(out_dir: str, name: str, payload, kind: str) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    an.write_manifest(out_dir, [{"file": name, "kind": kind}])
    return path


def cmd_ingest(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, feats, labels = ingest_dataset(bundle)
    summary = {
        "name": bundle.name,
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "feature_dim": int(feats.shape[1]),
        "num_classes": bundle.num_classes,
        "graph_homophily": graph_homophily(graph, labels),
        "isolated_nodes": int((graph.degrees == 0).sum()),
    }
    print(json.dumps(summary, indent=2))
    _emit_json(out, f"{bundle.name}_summary.json", summary, "dataset-summary")
    header, rows = an.distribution_rows(graph, labels)
    _emit(out, f"{bundle.name}_distribution.csv", header, rows,
          "node-distribution")
    return 0


def cmd_splits(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, _, _ = ingest_dataset(bundle)
    masks = make_splits(graph.num_nodes,
                        SplitSpec(seed=args.seed or 0,
                                  split_index=args.split_index))
    payload = {
        "seed": args.seed or 0,
        "split_index": args.split_index,
        "train": np.flatnonzero(masks.train).tolist(),
        "val": np.flatnonzero(masks.val).tolist(),
        "test": np.flatnonzero(masks.test).tolist(),
    }
    path = _emit_json(out, f"{bundle.name}_split{args.split_index}.json",
                      payload, "split-masks")
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, feats, labels = ingest_dataset(bundle)
    config = _load_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = run_experiment(config, graph, feats, labels,
                            split_indices=range(args.splits), seeds=seeds,
                            out_dir=out, jobs=args.jobs)
    payload = result.to_dict()
    payload["dataset"] = bundle.name
    payload["config"] = config.to_dict()
    _emit_json(out, f"{bundle.name}_run_result.json", payload, "run-result")
    print(f"{bundle.name}: test accuracy {result.mean_acc:.4f} "
          f"+/- {result.std_acc:.4f} over {len(result.entries)} runs")
    return 0


def _restore(args, bundle):
    graph, feats, labels = ingest_dataset(bundle)
    model = load_mixture(args.checkpoint)
    masks = make_splits(graph.num_nodes,
                        SplitSpec(seed=model.config.seed,
                                  split_index=args.split_index))
    return graph, feats, labels, model, masks


def cmd_evaluate(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, feats, labels, model, masks = _restore(args, bundle)
    contexts = model.contexts_for_eval(graph)
    payload = {
        "dataset": bundle.name,
        "checkpoint": args.checkpoint,
        "split_index": args.split_index,
        "val_acc": model.evaluate(graph, feats, labels, masks.val, contexts),
        "test_acc": model.evaluate(graph, feats, labels, masks.test, contexts),
    }
    print(json.dumps(payload, indent=2))
    _emit_json(out, f"{bundle.name}_evaluation.json", payload, "evaluation")
    return 0


def cmd_analyze_buckets(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, feats, labels, model, masks = _restore(args, bundle)
    contexts = model.contexts_for_eval(graph)
    test_nodes = np.flatnonzero(masks.test)
    predictions = {
        "mixture": np.argmax(model.mixed_logits(graph, feats, contexts), axis=1),
    }
    for expert in model.ensemble.experts:
        predictions[expert.spec.kind] = np.argmax(
            expert.forward(graph, feats), axis=1)
    if args.by == "degree":
        assignment = an.bucket_by_degree(graph, test_nodes,
                                         num_buckets=args.buckets)
    else:
        assignment = an.bucket_by_homophily(graph, labels,
                                            num_buckets=args.buckets,
                                            nodes=test_nodes)
    report = an.per_bucket_accuracy(predictions, labels, assignment)
    header, rows = an.bucket_accuracy_rows(report)
    path = _emit(out, f"{bundle.name}_bucket_accuracy.csv", header, rows,
                 "bucket-accuracy")
    print(f"wrote {path}")
    return 0


def cmd_analyze_weights(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, feats, labels, model, masks = _restore(args, bundle)
    contexts = model.contexts_for_eval(graph)
    weights = model.gate_weights(graph, feats, contexts)
    test_nodes = np.flatnonzero(masks.test)
    assignment = an.bucket_by_homophily(graph, labels,
                                        num_buckets=args.buckets,
                                        nodes=test_nodes)
    profile = an.expert_weight_profile(weights, assignment)
    names = [s.kind for s in model.ensemble.specs]
    header, rows = an.weight_profile_rows(profile, assignment, names)
    _emit(out, f"{bundle.name}_expert_weights.csv", header, rows,
          "expert-weights")
    if contexts is not None:
        scores = score_matrix(model.pattern_gate.disc, feats, contexts)
        patterns = summarize_scores(scores, contexts, graph.degrees)
        homophily = node_homophily_vector(graph, labels)
        header, rows = an.pattern_rows(patterns, homophily)
        _emit(out, f"{bundle.name}_patterns.csv", header, rows,
              "node-patterns")
    print(f"wrote expert weight profile for {bundle.name}")
    return 0


def cmd_analyze_ablation(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, feats, labels = ingest_dataset(bundle)
    config = _load_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    full, ablated = an.run_ablation(args.kind, config, graph, feats, labels,
                                    split_indices=range(args.splits),
                                    seeds=seeds, jobs=args.jobs)
    header, rows = an.ablation_rows(args.kind, full, ablated)
    _emit(out, f"{bundle.name}_ablation_{args.kind}.csv", header, rows,
          "ablation")
    _emit_json(out, f"{bundle.name}_ablation_{args.kind}.json",
               {"full": full.to_dict(), "ablated": ablated.to_dict()},
               "ablation-detail")
    print(f"{args.kind}: full {full.mean_acc:.4f} vs ablated "
          f"{ablated.mean_acc:.4f}")
    return 0


def cmd_analyze_sweep(args) -> int:
    out = _ensure_out(args)
    bundle = load_bundle(args.bundle)
    graph, feats, labels = ingest_dataset(bundle)
    config = _load_config(args)
    lengths = tuple(int(x) for x in args.lengths.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows_data = an.sweep_walk_length(config, graph, feats, labels,
                                     lengths=lengths,
                                     split_indices=range(args.splits),
                                     seeds=seeds, jobs=args.jobs)
    header, rows = an.walk_sweep_rows(rows_data)
    path = _emit(out, f"{bundle.name}_walk_sweep.csv", header, rows,
                 "walk-sweep")
    print(f"wrote {path}")
    return 0


def cmd_csbm_validate(args) -> int:
    out = _ensure_out(args)
    grids = csbm.default_theorem_grids(n=args.n, d=args.dim, sigma=args.sigma)
    if args.grid_file:
        with open(args.grid_file) as fh:
            raw = json.load(fh)
        grids = {}
        for regime, cells in raw.items():
            grids[regime] = [
                (csbm.CsbmParams(**cell["train"]), csbm.CsbmParams(**cell["test"]))
                for cell in cells
            ]
    wanted = {"1": [csbm.THEOREM_OPPOSITE_SIGN],
              "2": [csbm.THEOREM_DEGREE_SHIFT],
              "both": [csbm.THEOREM_OPPOSITE_SIGN, csbm.THEOREM_DEGREE_SHIFT]}
    reports = []
    all_ok = True
    for regime in wanted[args.theorem]:
        check = (csbm.theorem1_check if regime == csbm.THEOREM_OPPOSITE_SIGN
                 else csbm.theorem2_check)
        for i, (train, test) in enumerate(grids[regime]):
            report = check(train, test, R=args.radius, trials=args.trials,
                           seed=args.seed or 0)
            reports.append(report.to_dict())
            all_ok &= report.satisfied
            print(f"{regime} cell {i:2d}: measured {report.measured_loss:.4f} "
                  f">= bound {report.theoretical_bound:.4f} - "
                  f"{report.slack:.4f} {'OK' if report.satisfied else 'VIOLATED'}")
    _emit_json(out, "bound_reports.json", reports, "bound-reports")
    print("all bounds satisfied" if all_ok else "BOUND VIOLATIONS FOUND")
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphmoe",
        description="Mixture-of-experts node classification and CSBM lab")
    parser.add_argument("--out-dir", default="out",
                        help="artifact directory (default: ./out)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel (split, seed) runs")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load and validate a dataset bundle")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("splits", help="write split masks for a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split-index", type=int, default=0)
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("train", help="run the full training protocol")
    p.add_argument("--bundle", required=True)
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved mixture checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split-index", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="bucketed analyses and ablations")
    asub = p.add_subparsers(dest="analysis", required=True)

    pb = asub.add_parser("buckets", help="per-bucket accuracy")
    pb.add_argument("--bundle", required=True)
    pb.add_argument("--checkpoint", required=True)
    pb.add_argument("--split-index", type=int, default=0)
    pb.add_argument("--by", choices=("homophily", "degree"),
                    default="homophily")
    pb.add_argument("--buckets", type=int, default=5)
    pb.set_defaults(func=cmd_analyze_buckets)

    pw = asub.add_parser("weights", help="expert-weight profile")
    pw.add_argument("--bundle", required=True)
    pw.add_argument("--checkpoint", required=True)
    pw.add_argument("--split-index", type=int, default=0)
    pw.add_argument("--buckets", type=int, default=5)
    pw.set_defaults(func=cmd_analyze_weights)

    pa = asub.add_parser("ablation", help="full vs ablated protocol")
    pa.add_argument("--bundle", required=True)
    pa.add_argument("--kind", required=True, choices=an.ABLATION_KINDS)
    pa.add_argument("--splits", type=int, default=10)
    pa.add_argument("--seeds", default="0,1,2")
    pa.set_defaults(func=cmd_analyze_ablation)

    ps = asub.add_parser("sweep", help="walk-length sensitivity")
    ps.add_argument("--bundle", required=True)
    ps.add_argument("--lengths", default="5,10,20,40")
    ps.add_argument("--splits", type=int, default=10)
    ps.add_argument("--seeds", default="0,1,2")
    ps.set_defaults(func=cmd_analyze_sweep)

    p = sub.add_parser("csbm-validate",
                       help="Monte-Carlo checks of the loss lower bounds")
    p.add_argument("--theorem", choices=("1", "2", "both"), default="both")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--grid-file", default=None,
                   help="JSON file with custom (train, test) parameter cells")
    p.set_defaults(func=cmd_csbm_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
