"""Immutable node-classification graphs, structural queries, and bundle I/O.

A graph stores undirected edges once per pair (u < v); models symmetrize
and add self-loops at aggregation time. The on-disk "bundle" is a single
versioned JSON document, which is also the contract with the external
dataset converter.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

BUNDLE_VERSION = 1
FEATURE_KINDS = ("binary", "continuous")
UNLABELED = -1  # in-memory only; serialized as null


class GraphError(Exception):
    """Validation or I/O failure; the message names the violated rule."""


def _sorted_ids(ids) -> np.ndarray:
    arr = np.asarray(sorted(int(i) for i in ids), dtype=np.int64)
    return arr


def canonical_pairs(pairs) -> np.ndarray:
    """Sort each pair as (min, max) and the list lexicographically."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    lo = arr.min(axis=1)
    hi = arr.max(axis=1)
    canon = np.stack([lo, hi], axis=1)
    order = np.lexsort((canon[:, 1], canon[:, 0]))
    return canon[order]


class NeighborhoodIndex:
    """CSR-style symmetric neighbor lists with per-node degrees."""

    __slots__ = ("offsets", "targets", "n")

    def __init__(self, n: int, pairs: np.ndarray):
        self.n = n
        if len(pairs) == 0:
            self.offsets = np.zeros(n + 1, dtype=np.int64)
            self.targets = np.zeros(0, dtype=np.int64)
            return
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        counts = np.bincount(src, minlength=n)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.targets = dst

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v]:self.offsets[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.offsets[v + 1] - self.offsets[v])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass(frozen=True)
class Graph:
    """Node features, undirected edges, labels, and split masks."""

    name: str
    n: int
    d: int
    y_count: int
    features: np.ndarray          # (n, d) float64
    pairs: np.ndarray             # (P, 2) int64, u < v, deduplicated
    labels: np.ndarray            # (n,) int64, UNLABELED where absent
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    feature_kind: str
    index: NeighborhoodIndex = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _validate(self)
        object.__setattr__(self, "index", NeighborhoodIndex(self.n, self.pairs))
        for arr in (self.features, self.pairs, self.labels,
                    self.train_mask, self.val_mask, self.test_mask):
            arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return len(self.pairs)

    def has_edge(self, u: int, v: int) -> bool:
        a, b = (u, v) if u < v else (v, u)
        i = np.searchsorted(self.pairs[:, 0], a, side="left")
        j = np.searchsorted(self.pairs[:, 0], a, side="right")
        return bool(np.any(self.pairs[i:j, 1] == b))

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.pairs}

    def replace_edges(self, pairs) -> "Graph":
        return Graph(self.name, self.n, self.d, self.y_count, self.features.copy(),
                     canonical_pairs(pairs) if len(pairs) else np.zeros((0, 2), np.int64),
                     self.labels.copy(), self.train_mask.copy(), self.val_mask.copy(),
                     self.test_mask.copy(), self.feature_kind)


def make_graph(name, features, pairs, labels, train_mask, val_mask, test_mask,
               feature_kind, y_count=None) -> Graph:
    """Build and validate a Graph from plain arrays/iterables."""
    features = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n, d = features.shape
    if y_count is None:
        y_count = int(labels.max()) + 1 if (labels >= 0).any() else 0
    pairs = canonical_pairs(pairs) if len(np.asarray(pairs)) else np.zeros((0, 2), np.int64)
    return Graph(str(name), n, d, int(y_count), features, pairs, labels,
                 _sorted_ids(train_mask), _sorted_ids(val_mask), _sorted_ids(test_mask),
                 feature_kind)


def _validate(g: Graph) -> None:
    if g.feature_kind not in FEATURE_KINDS:
        raise GraphError(f"feature_kind must be one of {FEATURE_KINDS}, got {g.feature_kind!r}")
    if g.features.shape != (g.n, g.d):
        raise GraphError(f"features shape {g.features.shape} does not match (n={g.n}, d={g.d})")
    if not np.isfinite(g.features).all():
        raise GraphError("features contain non-finite values")
    if g.feature_kind == "binary":
        vals = np.unique(g.features)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise GraphError("binary feature_kind but features contain values outside {0, 1}")
    if g.labels.shape != (g.n,):
        raise GraphError("labels length does not match node count")
    bad = g.labels[(g.labels != UNLABELED) & ((g.labels < 0) | (g.labels >= g.y_count))]
    if len(bad):
        raise GraphError(f"label {bad[0]} outside [0, {g.y_count})")
    if len(g.pairs):
        if g.pairs.min() < 0 or g.pairs.max() >= g.n:
            raise GraphError("edge endpoint out of range")
        if (g.pairs[:, 0] >= g.pairs[:, 1]).any():
            sl = g.pairs[g.pairs[:, 0] == g.pairs[:, 1]]
            if len(sl):
                raise GraphError(f"self-loop stored on node {sl[0, 0]}")
            raise GraphError("edges must be stored as (u, v) with u < v")
        keys = g.pairs[:, 0] * g.n + g.pairs[:, 1]
        if np.unique(keys).size != len(keys):
            raise GraphError("duplicate edge in edge list")
    masks = {"train": g.train_mask, "val": g.val_mask, "test": g.test_mask}
    for mname, m in masks.items():
        if len(m) and (m.min() < 0 or m.max() >= g.n):
            raise GraphError(f"{mname}_mask references a node out of range")
        if np.unique(m).size != len(m):
            raise GraphError(f"{mname}_mask contains duplicate ids")
        unl = m[g.labels[m] == UNLABELED] if len(m) else m
        if len(unl):
            raise GraphError(f"{mname}_mask node {unl[0]} has no label")
    names = list(masks)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            overlap = np.intersect1d(masks[names[i]], masks[names[j]])
            if len(overlap):
                raise GraphError(f"{names[i]}/{names[j]} masks overlap on node {overlap[0]}")


# ---------------------------------------------------------------------------
# bundle format


def _features_to_rows(g: Graph) -> list:
    rows = []
    for i in range(g.n):
        nz = np.flatnonzero(g.features[i])
        if g.feature_kind == "binary":
            rows.append([[int(c)] for c in nz])
        else:
            rows.append([[int(c), float(g.features[i, c])] for c in nz])
    return rows


def _rows_to_features(rows, n, d, feature_kind) -> np.ndarray:
    feats = np.zeros((n, d))
    for i, row in enumerate(rows):
        for entry in row:
            if not isinstance(entry, list) or not entry:
                raise GraphError(f"feature row {i} entry is not a [col] or [col, value] list")
            col = int(entry[0])
            if not 0 <= col < d:
                raise GraphError(f"feature column {col} out of range on node {i}")
            if feature_kind == "binary":
                if len(entry) != 1:
                    raise GraphError(f"binary feature row {i} must omit values")
                feats[i, col] = 1.0
            else:
                if len(entry) != 2:
                    raise GraphError(f"continuous feature row {i} must be [col, value] pairs")
                feats[i, col] = float(entry[1])
    return feats


def save_bundle(g: Graph, path) -> None:
    doc = {
        "version": BUNDLE_VERSION,
        "name": g.name,
        "num_nodes": g.n,
        "num_features": g.d,
        "num_classes": g.y_count,
        "feature_kind": g.feature_kind,
        "features": _features_to_rows(g),
        "edges": [[int(u), int(v)] for u, v in g.pairs],
        "labels": [None if l == UNLABELED else int(l) for l in g.labels],
        "train_mask": [int(i) for i in g.train_mask],
        "val_mask": [int(i) for i in g.val_mask],
        "test_mask": [int(i) for i in g.test_mask],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, separators=(",", ":"))


def load_bundle(path) -> Graph:
    """Load and fully validate a graph bundle; any violation names its rule."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise GraphError(f"bundle not found: {path}")
    except json.JSONDecodeError as e:
        raise GraphError(f"bundle is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise GraphError("bundle must be a JSON object")
    if doc.get("version") != BUNDLE_VERSION:
        raise GraphError(f"unsupported bundle version {doc.get('version')!r}")
    required = ["name", "num_nodes", "num_features", "num_classes", "feature_kind",
                "features", "edges", "labels", "train_mask", "val_mask", "test_mask"]
    for key in required:
        if key not in doc:
            raise GraphError(f"bundle missing field {key!r}")
    n = int(doc["num_nodes"])
    d = int(doc["num_features"])
    kind = doc["feature_kind"]
    if kind not in FEATURE_KINDS:
        raise GraphError(f"feature_kind must be one of {FEATURE_KINDS}, got {kind!r}")
    if len(doc["features"]) != n:
        raise GraphError("features must hold one sparse row per node")
    if len(doc["labels"]) != n:
        raise GraphError("labels must hold one entry per node")
    feats = _rows_to_features(doc["features"], n, d, kind)
    labels = np.array([UNLABELED if l is None else int(l) for l in doc["labels"]], dtype=np.int64)
    pairs = np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs[:, 0] >= pairs[:, 1]).any():
        raise GraphError("bundle edges must satisfy u < v")
    return Graph(str(doc["name"]), n, d, int(doc["num_classes"]), feats, pairs, labels,
                 _sorted_ids(doc["train_mask"]), _sorted_ids(doc["val_mask"]),
                 _sorted_ids(doc["test_mask"]), kind)


# ---------------------------------------------------------------------------
# structural queries


def _check_node(g: Graph, v: int) -> int:
    v = int(v)
    if not 0 <= v < g.n:
        raise GraphError(f"node {v} out of range for graph of {g.n} nodes")
    return v


def bfs_levels(g: Graph, v: int, max_depth: int | None = None) -> dict[int, int]:
    """Hop distance from v for every reachable node within max_depth."""
    v = _check_node(g, v)
    dist = {v: 0}
    frontier = deque([v])
    while frontier:
        cur = frontier.popleft()
        dcur = dist[cur]
        if max_depth is not None and dcur >= max_depth:
            continue
        for nb in g.index.neighbors(cur):
            nb = int(nb)
            if nb not in dist:
                dist[nb] = dcur + 1
                frontier.append(nb)
    return dist


def k_hop_neighborhood(g: Graph, v: int, k: int) -> np.ndarray:
    """Sorted ids of all nodes u != v with hop distance(u, v) <= k."""
    if k < 0:
        raise GraphError("hop count must be >= 0")
    if k == 0:
        _check_node(g, v)
        return np.zeros(0, dtype=np.int64)
    dist = bfs_levels(g, v, max_depth=k)
    out = np.array(sorted(u for u in dist if u != v), dtype=np.int64)
    return out


def distance(g: Graph, u: int, v: int) -> int | None:
    """BFS shortest-path hops between u and v; None when unreachable."""
    u, v = _check_node(g, u), _check_node(g, v)
    if u == v:
        return 0
    dist = bfs_levels(g, u)
    return dist.get(v)


@dataclass(frozen=True)
class NormCoefficients:
    """GCN symmetric-normalization factors for one weight assignment.

    d~(x) = 1 + sum of incident edge weights (the self-loop counts as 1);
    an edge (u, v) gets 1/sqrt(d~(u) d~(v)) and the self-loop of v gets
    1/d~(v).
    """

    pair_coeff: np.ndarray   # (P,) aligned with g.pairs
    self_coeff: np.ndarray   # (n,)
    dtilde: np.ndarray       # (n,)


def gcn_norm(g: Graph, pair_weights: np.ndarray | None = None) -> NormCoefficients:
    if pair_weights is None:
        pair_weights = np.ones(len(g.pairs))
    pair_weights = np.asarray(pair_weights, dtype=np.float64).reshape(-1)
    if len(pair_weights) != len(g.pairs):
        raise GraphError("one weight per stored edge required")
    if len(pair_weights) and (pair_weights.min() < 0 or pair_weights.max() > 1):
        raise GraphError("edge weights must lie in [0, 1]")
    dtilde = np.ones(g.n)
    np.add.at(dtilde, g.pairs[:, 0], pair_weights)
    np.add.at(dtilde, g.pairs[:, 1], pair_weights)
    inv = 1.0 / np.sqrt(dtilde)
    pair_coeff = inv[g.pairs[:, 0]] * inv[g.pairs[:, 1]] if len(g.pairs) else np.zeros(0)
    return NormCoefficients(pair_coeff, inv * inv, dtilde)


def inject_node(g: Graph, neighbor: int, features) -> Graph:
    """New graph with one extra unlabeled node tied to ``neighbor``."""
    neighbor = _check_node(g, neighbor)
    vec = np.asarray(features, dtype=np.float64).reshape(-1)
    if len(vec) != g.d:
        raise GraphError(f"injected feature vector has length {len(vec)}, expected {g.d}")
    new_id = g.n
    feats = np.vstack([g.features, vec[None, :]])
    pairs = np.vstack([g.pairs, [[neighbor, new_id]]]) if len(g.pairs) else np.array([[neighbor, new_id]])
    labels = np.concatenate([g.labels, [UNLABELED]])
    return Graph(g.name, g.n + 1, g.d, g.y_count, feats, canonical_pairs(pairs), labels,
                 g.train_mask.copy(), g.val_mask.copy(), g.test_mask.copy(), g.feature_kind)


def toggle_edge(g: Graph, u: int, v: int) -> Graph:
    """Insert edge (u, v) if absent, remove it if present."""
    u, v = _check_node(g, u), _check_node(g, v)
    if u == v:
        raise GraphError("cannot toggle a self-loop")
    a, b = (u, v) if u < v else (v, u)
    mask = (g.pairs[:, 0] == a) & (g.pairs[:, 1] == b)
    if mask.any():
        return g.replace_edges(g.pairs[~mask])
    pairs = np.vstack([g.pairs, [[a, b]]]) if len(g.pairs) else np.array([[a, b]])
    return g.replace_edges(pairs)


# ---------------------------------------------------------------------------
# attack-local views


@dataclass(frozen=True)
class LocalView:
    """Induced subgraph around a center node for feature-space attacks.

    Holds every node within ``radius`` hops plus the center, the edges among
    them, and for each node the count of its neighbors OUTSIDE the view.
    With those boundary degrees, an L-layer forward evaluated on the view
    reproduces the center row of the full-graph logits exactly; rows of
    boundary nodes are not meaningful.
    """

    nodes: np.ndarray            # sorted global ids
    center_local: int
    features: np.ndarray         # (S, D) copy
    pairs: np.ndarray            # (Q, 2) local indices, canonical
    outside_degree: np.ndarray   # (S,) float64

    def local_of(self, global_id: int) -> int:
        pos = int(np.searchsorted(self.nodes, global_id))
        if pos >= len(self.nodes) or self.nodes[pos] != global_id:
            raise GraphError(f"node {global_id} is not inside this view")
        return pos

    def contains(self, global_id: int) -> bool:
        pos = int(np.searchsorted(self.nodes, global_id))
        return pos < len(self.nodes) and self.nodes[pos] == global_id


def build_view(g: Graph, center: int, radius: int) -> LocalView:
    dist = bfs_levels(g, center, max_depth=radius)
    nodes = np.array(sorted(dist), dtype=np.int64)
    inside = np.zeros(g.n, dtype=bool)
    inside[nodes] = True
    local = np.full(g.n, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    if len(g.pairs):
        keep = inside[g.pairs[:, 0]] & inside[g.pairs[:, 1]]
        sub = g.pairs[keep]
        pairs = np.stack([local[sub[:, 0]], local[sub[:, 1]]], axis=1) if len(sub) else np.zeros((0, 2), np.int64)
        pairs = canonical_pairs(pairs) if len(pairs) else pairs
    else:
        pairs = np.zeros((0, 2), np.int64)
    local_deg = np.zeros(len(nodes))
    if len(pairs):
        np.add.at(local_deg, pairs.ravel(), 1.0)
    outside = g.index.degrees[nodes].astype(np.float64) - local_deg
    return LocalView(nodes, int(local[center]), g.features[nodes].copy(), pairs, outside)
