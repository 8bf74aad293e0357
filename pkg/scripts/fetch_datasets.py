#!/usr/bin/env python3
"""Download public node-classification datasets and convert them to bundles.

This script needs ordinary internet access, which the packaged test
environment may not have; the test suite skips dataset-dependent checks
when the bundles are absent. Point GRAPHMOE_DATA_DIR at the output
directory to activate them.

Sources:
  cora, pubmed       LINQS text distributions (<name>.content/<name>.cites):
                     https://linqs-data.soe.ucsc.edu/public/lbc/
  texas, cornell,    geom-gcn "new_data" files (out1_graph_edges.txt,
  wisconsin,         out1_node_feature_label.txt):
  chameleon, actor   https://raw.githubusercontent.com/graphdml-uiuc-jlu/geom-gcn/master/new_data/

Usage:
  python3 scripts/fetch_datasets.py --out data/ [--datasets cora,texas]
"""

import argparse
import io
import os
import sys
import tarfile
import urllib.request

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from graphmoe.data import save_dataset  # noqa: E402

LINQS = "https://linqs-data.soe.ucsc.edu/public/lbc/{name}.tgz"
GEOM = ("https://raw.githubusercontent.com/graphdml-uiuc-jlu/geom-gcn/"
        "master/new_data/{folder}/out1_{kind}.txt")

GEOM_FOLDERS = {"texas": "texas", "cornell": "cornell",
                "wisconsin": "wisconsin", "chameleon": "chameleon",
                "actor": "film"}


def fetch(url: str) -> bytes:
    print(f"  GET {url}")
    with urllib.request.urlopen(url, timeout=60) as resp:
        return resp.read()


def convert_linqs(name: str, out_dir: str) -> str:
    blob = fetch(LINQS.format(name=name))
    ids, feats, label_names = [], [], []
    cites = []
    with tarfile.open(fileobj=io.BytesIO(blob)) as tar:
        for member in tar.getmembers():
            if member.name.endswith(".content"):
                content = tar.extractfile(member).read().decode()
            elif member.name.endswith(".cites"):
                cites_raw = tar.extractfile(member).read().decode()
    for line in content.strip().splitlines():
        parts = line.split("\t")
        ids.append(parts[0])
        feats.append([float(x) for x in parts[1:-1]])
        label_names.append(parts[-1])
    index = {node: i for i, node in enumerate(ids)}
    classes = sorted(set(label_names))
    labels = np.array([classes.index(c) for c in label_names])
    for line in cites_raw.strip().splitlines():
        a, b = line.split()
        if a in index and b in index and a != b:
            cites.append((index[a], index[b]))
    return save_dataset(os.path.join(out_dir, name), name, cites,
                        np.array(feats), labels, num_classes=len(classes),
                        provenance=f"LINQS {name}.tgz, citing edges "
                                   "symmetrized, classes sorted by name")


def convert_geom(name: str, out_dir: str) -> str:
    folder = GEOM_FOLDERS[name]
    edges_raw = fetch(GEOM.format(folder=folder, kind="graph_edges")).decode()
    nodes_raw = fetch(GEOM.format(folder=folder,
                                  kind="node_feature_label")).decode()
    feats, labels = {}, {}
    header_skipped = False
    for line in nodes_raw.strip().splitlines():
        if not header_skipped:
            header_skipped = True
            continue
        node, feat, label = line.split("\t")
        if name == "actor":
            # sparse one-hot indices of 932-dim bag of words
            vec = np.zeros(932)
            vec[[int(i) for i in feat.split(",")]] = 1.0
        else:
            vec = np.array([float(x) for x in feat.split(",")])
        feats[int(node)] = vec
        labels[int(node)] = int(label)
    n = max(feats) + 1
    features = np.vstack([feats[i] for i in range(n)])
    label_arr = np.array([labels[i] for i in range(n)])
    edges = []
    header_skipped = False
    for line in edges_raw.strip().splitlines():
        if not header_skipped:
            header_skipped = True
            continue
        a, b = line.split("\t")
        if a != b:
            edges.append((int(a), int(b)))
    return save_dataset(os.path.join(out_dir, name), name, edges, features,
                        label_arr, num_classes=int(label_arr.max()) + 1,
                        provenance=f"geom-gcn new_data/{folder}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data")
    parser.add_argument("--datasets",
                        default="cora,pubmed,texas,cornell,wisconsin,"
                                "chameleon,actor")
    args = parser.parse_args()
    for name in args.datasets.split(","):
        name = name.strip()
        print(f"fetching {name} ...")
        try:
            if name in ("cora", "pubmed"):
                path = convert_linqs(name, args.out)
            elif name in GEOM_FOLDERS:
                path = convert_geom(name, args.out)
            else:
                print(f"  unknown dataset {name!r}")
                continue
            print(f"  wrote {path}")
        except Exception as exc:
            print(f"  FAILED: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
