import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnevade.graph import (
    GraphError, bfs_levels, build_view, distance, gcn_norm, inject_node,
    k_hop_neighborhood, load_bundle, make_graph, save_bundle, toggle_edge,
)
from tests.conftest import path_graph, random_graph
from tests.oracles import k_hop_bruteforce


def minimal_graph():
    return make_graph("mini", [[1.0, 0.0], [0.0, 1.0]], [[0, 1]], [0, 1],
                      train_mask=[0], val_mask=[], test_mask=[1],
                      feature_kind="binary", y_count=2)


class TestBundle:
    def test_minimal_roundtrip(self, tmp_path):
        g = minimal_graph()
        p = tmp_path / "mini.bundle.json"
        save_bundle(g, p)
        g2 = load_bundle(p)
        p2 = tmp_path / "again.bundle.json"
        save_bundle(g2, p2)
        assert p.read_bytes() == p2.read_bytes()
        assert g2.n == 2 and g2.d == 2 and g2.y_count == 2
        assert np.array_equal(g2.features, g.features)
        assert np.array_equal(g2.pairs, g.pairs)
        assert np.array_equal(g2.labels, g.labels)

    def test_structural_roundtrip_continuous(self, tmp_path, toy_continuous_graph):
        g = toy_continuous_graph
        p = tmp_path / "c.bundle.json"
        save_bundle(g, p)
        g2 = load_bundle(p)
        assert np.array_equal(g2.features, g.features)
        assert np.array_equal(g2.pairs, g.pairs)
        assert np.array_equal(g2.train_mask, g.train_mask)
        assert g2.feature_kind == "continuous"

    def test_overlapping_masks_rejected(self):
        with pytest.raises(GraphError, match="overlap"):
            make_graph("bad", np.zeros((3, 2)), [[0, 1]], [0, 1, 0],
                       train_mask=[0, 1], val_mask=[], test_mask=[1],
                       feature_kind="binary", y_count=2)

    def test_duplicate_edge_rejected(self, tmp_path):
        doc = {
            "version": 1, "name": "dup", "num_nodes": 2, "num_features": 1,
            "num_classes": 2, "feature_kind": "binary",
            "features": [[[0]], []], "edges": [[0, 1], [0, 1]],
            "labels": [0, 1], "train_mask": [0], "val_mask": [], "test_mask": [1],
        }
        p = tmp_path / "dup.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(GraphError, match="duplicate edge"):
            load_bundle(p)

    def test_binary_flag_with_nonbinary_values_rejected(self):
        with pytest.raises(GraphError, match="binary"):
            make_graph("bad", [[0.5]], [], [0], [0], [], [], "binary", y_count=1)

    def test_unlabeled_mask_node_rejected(self):
        with pytest.raises(GraphError, match="no label"):
            make_graph("bad", np.zeros((2, 1)), [], [0, None and 0 or -1],
                       train_mask=[1], val_mask=[], test_mask=[],
                       feature_kind="continuous", y_count=1)

    def test_self_loop_rejected(self, tmp_path):
        doc = {
            "version": 1, "name": "sl", "num_nodes": 2, "num_features": 1,
            "num_classes": 2, "feature_kind": "binary",
            "features": [[], []], "edges": [[1, 1]],
            "labels": [0, 1], "train_mask": [0], "val_mask": [], "test_mask": [1],
        }
        p = tmp_path / "sl.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(GraphError):
            load_bundle(p)

    def test_parse_error(self, tmp_path):
        p = tmp_path / "garbage.json"
        p.write_text("{not json")
        with pytest.raises(GraphError, match="JSON"):
            load_bundle(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(GraphError, match="not found"):
            load_bundle(tmp_path / "nope.json")

    def test_wrong_version(self, tmp_path):
        p = tmp_path / "v9.json"
        p.write_text(json.dumps({"version": 9}))
        with pytest.raises(GraphError, match="version"):
            load_bundle(p)


class TestKHop:
    def test_path_one_hop(self):
        g = path_graph()
        assert list(k_hop_neighborhood(g, 0, 1)) == [1]

    def test_path_two_hops(self):
        g = path_graph()
        assert list(k_hop_neighborhood(g, 0, 2)) == [1, 2]

    def test_zero_hops_empty(self):
        g = path_graph()
        assert len(k_hop_neighborhood(g, 0, 0)) == 0

    def test_isolated_node(self):
        g = make_graph("iso", np.zeros((3, 1)), [[0, 1]], [0, 1, 0],
                       [0], [], [1], "continuous", y_count=2)
        for k in (1, 3, 10):
            assert len(k_hop_neighborhood(g, 2, k)) == 0

    def test_out_of_range_victim(self):
        with pytest.raises(GraphError):
            k_hop_neighborhood(path_graph(), 99, 1)

    def test_monotone_in_k(self):
        g = random_graph(30, 0.1, seed=5)
        for v in range(0, 30, 7):
            prev: set = set()
            for k in range(5):
                cur = set(k_hop_neighborhood(g, v, k).tolist())
                assert prev <= cur
                prev = cur

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 50), k=st.integers(0, 6))
    def test_matches_bruteforce_bfs(self, seed, n, k):
        g = random_graph(n, 0.12, seed=seed)
        v = seed % n
        got = set(k_hop_neighborhood(g, v, k).tolist())
        assert got == k_hop_bruteforce(n, g.pairs, v, k)


class TestDistance:
    def test_self_distance(self):
        assert distance(path_graph(), 1, 1) == 0

    def test_path_distance(self):
        assert distance(path_graph(), 0, 2) == 2

    def test_unreachable_is_none(self):
        g = make_graph("two-comp", np.zeros((4, 1)), [[0, 1], [2, 3]], [0, 1, 0, 1],
                       [0], [], [1], "continuous", y_count=2)
        assert distance(g, 0, 3) is None


class TestGcnNorm:
    def test_isolated_self_loop_coefficient(self):
        g = make_graph("one", np.zeros((1, 1)), [], [0], [0], [], [], "continuous", y_count=1)
        norm = gcn_norm(g)
        assert norm.self_coeff[0] == pytest.approx(1.0)

    def test_path_coefficient(self):
        g = path_graph(labels=(0, 1, 0))
        norm = gcn_norm(g)
        # edge A-B: d~(A)=2, d~(B)=3
        assert norm.pair_coeff[0] == pytest.approx(1.0 / np.sqrt(6.0), abs=1e-12)

    def test_zero_weight_matches_removed_edge(self):
        g = random_graph(12, 0.3, seed=3)
        w = np.ones(len(g.pairs))
        w[0] = 0.0
        norm_zero = gcn_norm(g, w)
        g2 = g.replace_edges(g.pairs[1:])
        norm_removed = gcn_norm(g2)
        assert np.allclose(norm_zero.pair_coeff[1:], norm_removed.pair_coeff, atol=1e-15)
        assert np.allclose(norm_zero.self_coeff, norm_removed.self_coeff, atol=1e-15)

    def test_all_ones_matches_independent_degree_formula(self):
        g = random_graph(25, 0.15, seed=9)
        norm = gcn_norm(g)
        deg = np.zeros(g.n)
        for u, v in g.pairs:
            deg[u] += 1
            deg[v] += 1
        expected = 1.0 / np.sqrt((deg[g.pairs[:, 0]] + 1) * (deg[g.pairs[:, 1]] + 1))
        assert np.allclose(norm.pair_coeff, expected, atol=1e-15)


class TestInjectAndToggle:
    def test_inject_adds_node_and_edge(self):
        g = minimal_graph()
        g2 = inject_node(g, 1, [0.0, 0.0])
        assert g2.n == 3
        assert g2.num_edges == g.num_edges + 1
        assert g2.index.degree(1) == g.index.degree(1) + 1
        assert g2.labels[2] == -1
        assert len(g2.test_mask) == len(g.test_mask)

    def test_original_untouched(self):
        g = minimal_graph()
        before = g.features.copy(), g.pairs.copy()
        inject_node(g, 0, [1.0, 1.0])
        assert np.array_equal(g.features, before[0])
        assert np.array_equal(g.pairs, before[1])
        assert g.n == 2

    def test_inject_out_of_range(self):
        with pytest.raises(GraphError):
            inject_node(minimal_graph(), 7, [0.0, 0.0])

    def test_toggle_roundtrip(self):
        g = random_graph(10, 0.2, seed=1)
        g2 = toggle_edge(g, 0, 5)
        g3 = toggle_edge(g2, 5, 0)
        assert np.array_equal(g3.pairs, g.pairs)
        assert g2.has_edge(0, 5) != g.has_edge(0, 5)


class TestLocalView:
    def test_view_nodes_match_khop(self):
        g = random_graph(40, 0.08, seed=13)
        for v in (0, 11, 27):
            view = build_view(g, v, 2)
            expected = set(k_hop_neighborhood(g, v, 2).tolist()) | {v}
            assert set(view.nodes.tolist()) == expected
            assert view.nodes[view.center_local] == v

    def test_outside_degree_accounts_for_boundary(self):
        g = path_graph(labels=(0, 1, 0, 1, 0), d=2)  # 5-node path
        view = build_view(g, 0, 2)  # nodes {0,1,2}; node 2 has neighbor 3 outside
        assert set(view.nodes.tolist()) == {0, 1, 2}
        outs = {int(view.nodes[i]): view.outside_degree[i] for i in range(3)}
        assert outs[0] == 0 and outs[1] == 0 and outs[2] == 1


class TestCheckedInFixtures:
    def test_toy_bundles_match_their_builders(self, toy_binary_graph, toy_continuous_graph):
        from tests.conftest import build_toy_binary, build_toy_continuous
        for loaded, built in [(toy_binary_graph, build_toy_binary()),
                              (toy_continuous_graph, build_toy_continuous())]:
            assert np.array_equal(loaded.features, built.features)
            assert np.array_equal(loaded.pairs, built.pairs)
            assert np.array_equal(loaded.labels, built.labels)
            assert loaded.feature_kind == built.feature_kind
