from pathlib import Path

import numpy as np
import pytest

from gnnevade.graph import load_bundle, make_graph

FIXTURES = Path(__file__).parent / "fixtures"


def path_graph(labels=(0, 1, 0, 1), d=3, seed=0):
    """A-B-C-D path with random continuous features."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    return make_graph(
        "path", rng.uniform(-1, 1, (n, d)), [[i, i + 1] for i in range(n - 1)],
        labels, train_mask=[0], val_mask=[1], test_mask=[2],
        feature_kind="continuous", y_count=2,
    )


def random_graph(n, edge_prob, seed, d=4, y=3, feature_kind="continuous", ensure_connected=False):
    rng = np.random.default_rng(seed)
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < edge_prob]
    if ensure_connected:
        order = rng.permutation(n)
        pairs.extend((min(order[i], order[i + 1]), max(order[i], order[i + 1])) for i in range(n - 1))
        pairs = sorted(set(pairs))
    if feature_kind == "binary":
        feats = (rng.random((n, d)) < 0.4).astype(float)
    else:
        feats = rng.uniform(-1, 1, (n, d))
    labels = rng.integers(0, y, n)
    ids = rng.permutation(n)
    k = max(1, n // 5)
    return make_graph(f"rand{seed}", feats, pairs, labels,
                      train_mask=ids[:k], val_mask=ids[k:2 * k], test_mask=ids[2 * k:3 * k],
                      feature_kind=feature_kind, y_count=y)


def build_toy_binary():
    """Hand-built 5-node binary-feature graph: hub node 0 with two legs.

    Edges: 0-1, 0-2, 1-3, 2-4. Class-indicative bits: nodes of class 0
    light up columns 0-2, class 1 lights columns 3-5.
    """
    feats = np.array([
        [1, 1, 0, 0, 0, 0],
        [0, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 1, 0],
        [1, 0, 1, 0, 0, 0],
        [0, 0, 0, 0, 1, 1],
    ], dtype=float)
    return make_graph("toy-binary", feats, [[0, 1], [0, 2], [1, 3], [2, 4]],
                      labels=[0, 0, 1, 0, 1], train_mask=[1, 2], val_mask=[3],
                      test_mask=[0, 4], feature_kind="binary", y_count=2)


def build_toy_continuous():
    rng = np.random.default_rng(42)
    n, d = 6, 5
    feats = np.abs(rng.normal(0, 0.05, (n, d)))
    feats[feats < 0.03] = 0.0
    pairs = [[0, 1], [0, 2], [1, 2], [2, 3], [3, 4], [4, 5]]
    return make_graph("toy-continuous", feats, pairs, labels=[0, 0, 1, 1, 2, 2],
                      train_mask=[0, 3, 5], val_mask=[1], test_mask=[2, 4],
                      feature_kind="continuous", y_count=3)


@pytest.fixture
def toy_binary_graph():
    return load_bundle(FIXTURES / "toy_binary.bundle.json")


@pytest.fixture
def toy_continuous_graph():
    return load_bundle(FIXTURES / "toy_continuous.bundle.json")
