#!/usr/bin/env python3
"""Download Cora, Citeseer and Texas and convert them to the hopflow dataset layout.

Each dataset lands in data/<name>/ as edges.tsv, labels.tsv and features.bin (HGF1).
With --geom-splits the ten public 48/32/20 split masks are also written as
splits_<i>.json; without it hopflow regenerates seeded splits at the same ratios.
"""

import argparse
import io
import json
import pickle
import struct
import sys
import urllib.request
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PLANETOID = "https://github.com/kimiyoung/planetoid/raw/master/data/ind.{name}.{part}"
GEOM = "https://raw.githubusercontent.com/graphdml-uiuc-jlu/geom-gcn/master"
NAMES = ("cora", "citeseer", "texas")


def fetch(url):
    print(f"  {url}", file=sys.stderr)
    with urllib.request.urlopen(url, timeout=120) as r:
        return r.read()


def load_pickle(raw):
    return pickle.load(io.BytesIO(raw), encoding="latin1")


def planetoid(name):
    parts = {p: fetch(PLANETOID.format(name=name, part=p)) for p in ("x", "tx", "allx", "y", "ty", "ally", "graph", "test.index")}
    x, tx, allx = (load_pickle(parts[p]) for p in ("x", "tx", "allx"))
    y, ty, ally = (load_pickle(parts[p]) for p in ("y", "ty", "ally"))
    graph = load_pickle(parts["graph"])
    test_index = [int(v) for v in parts["test.index"].decode().split()]
    test_sorted = sorted(test_index)

    if name == "citeseer":
        # isolated test nodes are missing from tx/ty; pad them as featureless, unlabeled rows
        full = range(test_sorted[0], test_sorted[-1] + 1)
        tx_ext = sp.lil_matrix((len(full), tx.shape[1]))
        tx_ext[np.array(test_sorted) - test_sorted[0], :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full), y.shape[1]))
        ty_ext[np.array(test_sorted) - test_sorted[0], :] = ty
        ty = ty_ext

    features = sp.vstack((allx, tx)).tolil()
    onehot = np.vstack((ally, ty))
    # restore the test rows to their node ids
    features[test_index, :] = features[test_sorted, :]
    onehot[test_index, :] = onehot[test_sorted, :]

    n = features.shape[0]
    labels = np.where(onehot.sum(axis=1) > 0, onehot.argmax(axis=1), -1)
    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v and u < n and v < n:
                edges.add((min(u, v), max(u, v)))
    return np.asarray(features.todense(), dtype=np.float32), labels, sorted(edges)


def webkb(name):
    base = f"{GEOM}/new_data/{name}"
    rows = fetch(f"{base}/out1_node_feature_label.txt").decode().splitlines()[1:]
    feats, labels = {}, {}
    for line in rows:
        node, f, lab = line.split("\t")
        feats[int(node)] = [float(v) for v in f.split(",")]
        labels[int(node)] = int(lab)
    n = len(feats)
    x = np.array([feats[i] for i in range(n)], dtype=np.float32)
    y = np.array([labels[i] for i in range(n)])
    edges = set()
    for line in fetch(f"{base}/out1_graph_edges.txt").decode().splitlines()[1:]:
        u, v = (int(t) for t in line.split())
        if u != v:
            edges.add((min(u, v), max(u, v)))
    return x, y, sorted(edges)


def geom_splits(name, labels):
    out = []
    for i in range(10):
        masks = np.load(io.BytesIO(fetch(f"{GEOM}/splits/{name}_split_0.6_0.2_{i}.npz")))
        keep = lambda m: [int(v) for v in np.flatnonzero(masks[m]) if labels[v] >= 0]
        out.append({"train": keep("train_mask"), "val": keep("val_mask"), "test": keep("test_mask")})
    return out


def write(out, x, labels, edges, splits):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.bin", "wb") as f:
        f.write(b"HGF1" + struct.pack("<QQ", *x.shape))
        f.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    with open(out / "edges.tsv", "w") as f:
        f.write("# src\tdst\n")
        f.writelines(f"{u}\t{v}\n" for u, v in edges)
    with open(out / "labels.tsv", "w") as f:
        f.write("# node\tclass\n")
        f.writelines(f"{i}\t{c}\n" for i, c in enumerate(labels) if c >= 0)
    for old in out.glob("splits_*.json"):
        old.unlink()
    for i, s in enumerate(splits or []):
        (out / f"splits_{i}.json").write_text(json.dumps(s) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", default=list(NAMES), choices=NAMES)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    ap.add_argument("--geom-splits", action="store_true", help="also write the ten public split files")
    args = ap.parse_args()

    for name in args.names:
        print(f"{name}:", file=sys.stderr)
        x, y, edges = webkb(name) if name == "texas" else planetoid(name)
        splits = geom_splits(name, y) if args.geom_splits else None
        write(args.out / name, x, y, edges, splits)
        print(f"  {x.shape[0]} nodes, {len(edges)} edges, {x.shape[1]} features, {int(y.max()) + 1} classes", file=sys.stderr)


if __name__ == "__main__":
    main()
