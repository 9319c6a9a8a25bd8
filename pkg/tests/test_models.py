import numpy as np
import pytest

from gnnevade import autodiff as ad
from gnnevade.graph import build_view, make_graph
from gnnevade.models import (
    ARCHITECTURES, ForwardInputs, ModelParams, TrainConfig, TrainingError,
    accuracy, forward, init_params, load_checkpoint, logits_of, predict,
    save_checkpoint, train,
)
from tests.conftest import random_graph
from tests.oracles import finite_difference, max_rel_error

SMALL = TrainConfig(hidden=5, gin_mlp_hidden=7, dropout=0.0, max_epochs=5, patience=5)


def eval_loss(params, fi, victim, label, *, features=None, pair_weights=None):
    """Eval-mode victim cross-entropy; the black box for finite differencing."""
    feats = ad.Tensor(features) if isinstance(features, np.ndarray) else features
    logits = forward(params, fi, features=feats, pair_weights=pair_weights)
    return ad.cross_entropy(ad.take_row(logits, victim), label).item()


class TestForward:
    def test_zero_edge_gcn_uses_only_own_features(self):
        g = random_graph(6, 0.0, seed=1, d=4)
        params = init_params("gcn", 4, 3, SMALL)
        fi = ForwardInputs.from_graph(g)
        base = logits_of(params, fi)
        other = g.features.copy()
        other[3] += 5.0  # perturb a different node
        moved = logits_of(params, fi, features=ad.constant(other))
        assert np.array_equal(base[0], moved[0])
        assert not np.array_equal(base[3], moved[3])

    def test_sgc_single_layer_isolated_is_linear_map(self):
        g = random_graph(5, 0.0, seed=2, d=4)
        cfg = TrainConfig(hidden=5, layers=1, dropout=0.0)
        params = init_params("sgc", 4, 3, cfg)
        logits = logits_of(params, ForwardInputs.from_graph(g))
        assert np.array_equal(logits, g.features @ params.get("w"))

    def test_all_ones_override_is_bitwise_default(self):
        g = random_graph(12, 0.25, seed=3)
        for arch in ARCHITECTURES:
            params = init_params(arch, g.d, g.y_count, SMALL)
            fi = ForwardInputs.from_graph(g)
            a = logits_of(params, fi)
            b = logits_of(params, fi, pair_weights=np.ones((len(g.pairs), 1)))
            assert np.array_equal(a, b), arch

    def test_edge_order_invariance(self):
        rng = np.random.default_rng(0)
        pairs = [(0, 1), (1, 2), (0, 3), (2, 3), (3, 4)]
        feats = rng.uniform(-1, 1, (5, 3))
        g1 = make_graph("a", feats, pairs, [0, 1, 0, 1, 0], [0], [1], [2], "continuous", 2)
        g2 = make_graph("b", feats, pairs[::-1], [0, 1, 0, 1, 0], [0], [1], [2], "continuous", 2)
        params = init_params("gcn", 3, 2, SMALL)
        assert np.array_equal(logits_of(params, ForwardInputs.from_graph(g1)),
                              logits_of(params, ForwardInputs.from_graph(g2)))

    def test_zero_weight_edge_is_noop(self):
        g = random_graph(10, 0.2, seed=4)
        extra = make_graph("x", g.features, np.vstack([g.pairs, [[0, 9]]]) if not g.has_edge(0, 9)
                           else g.pairs, g.labels, g.train_mask, g.val_mask, g.test_mask,
                           "continuous", g.y_count)
        weights = np.ones((len(extra.pairs), 1))
        new_idx = int(np.flatnonzero((extra.pairs[:, 0] == 0) & (extra.pairs[:, 1] == 9))[0])
        weights[new_idx] = 0.0
        for arch in ARCHITECTURES:
            params = init_params(arch, g.d, g.y_count, SMALL)
            with_zero = logits_of(params, ForwardInputs.from_graph(extra), pair_weights=weights)
            without = logits_of(params, ForwardInputs.from_graph(g))
            assert np.abs(with_zero - without).max() <= 1e-12, arch

    def test_eval_forwards_bitwise_identical(self):
        g = random_graph(15, 0.2, seed=5)
        params = init_params("gcn", g.d, g.y_count, TrainConfig(dropout=0.5, hidden=4))
        fi = ForwardInputs.from_graph(g)
        assert np.array_equal(logits_of(params, fi), logits_of(params, fi))

    def test_training_forward_needs_rng(self):
        g = random_graph(5, 0.3, seed=6)
        params = init_params("gcn", g.d, g.y_count, TrainConfig(dropout=0.5, hidden=4))
        with pytest.raises(TrainingError):
            forward(params, ForwardInputs.from_graph(g), training=True)

    def test_dimension_mismatch(self):
        g = random_graph(5, 0.3, seed=7, d=4)
        params = init_params("gcn", 9, g.y_count, SMALL)
        with pytest.raises(TrainingError):
            forward(params, ForwardInputs.from_graph(g))

    def test_softmax_of_model_output_sums_to_one(self):
        g = random_graph(20, 0.2, seed=8)
        for arch in ARCHITECTURES:
            params = init_params(arch, g.d, g.y_count, SMALL)
            p = ad.softmax(logits_of(params, ForwardInputs.from_graph(g)))
            assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-9


class TestGradientOracles:
    """Analytic gradients vs central finite differences, per architecture."""

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_parameter_gradients(self, arch):
        g = random_graph(10, 0.25, seed=11, d=6, y=3, ensure_connected=True)
        params = init_params(arch, g.d, g.y_count, SMALL)
        fi = ForwardInputs.from_graph(g)
        rows = g.train_mask
        labels = g.labels[rows]

        tape = ad.Tape()
        leaves = [tape.leaf(a) for a in params.arrays]
        logits = forward(params, fi, param_tensors=leaves)
        loss = ad.cross_entropy_mean(logits, rows, labels)
        grads = tape.backward(loss, leaves)

        for i, name in enumerate(params.names):
            def loss_at(vals, i=i):
                trial = params.copy()
                trial.arrays[i] = vals.reshape(params.arrays[i].shape)
                lg = forward(trial, fi)
                return ad.cross_entropy_mean(lg, rows, labels).item()

            numeric = finite_difference(loss_at, params.arrays[i])
            err = max_rel_error(grads[i], numeric)
            assert err <= 1e-4, f"{arch}.{name}: rel err {err:.2e}"

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_attacker_feature_row_gradient(self, arch):
        g = random_graph(10, 0.25, seed=12, d=6, y=3, ensure_connected=True)
        params = init_params(arch, g.d, g.y_count, SMALL)
        fi = ForwardInputs.from_graph(g)
        victim, attacker, label = 0, 4, int(g.labels[0])

        tape = ad.Tape()
        feats = tape.leaf(g.features)
        logits = forward(params, fi, features=feats)
        loss = ad.cross_entropy(ad.take_row(logits, victim), label)
        (gx,) = tape.backward(loss, [feats])

        def loss_at(row):
            x = g.features.copy()
            x[attacker] = row
            return eval_loss(params, fi, victim, label, features=x)

        numeric = finite_difference(loss_at, g.features[attacker])
        assert max_rel_error(gx[attacker], numeric) <= 1e-4, arch

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_edge_weight_gradients(self, arch):
        g = random_graph(10, 0.25, seed=13, d=6, y=3, ensure_connected=True)
        params = init_params(arch, g.d, g.y_count, SMALL)
        fi = ForwardInputs.from_graph(g)
        victim, label = 2, int(g.labels[2])
        rng = np.random.default_rng(5)
        w0 = rng.uniform(0.2, 0.8, (len(g.pairs), 1))

        tape = ad.Tape()
        w = tape.leaf(w0)
        logits = forward(params, fi, pair_weights=w)
        loss = ad.cross_entropy(ad.take_row(logits, victim), label)
        (gw,) = tape.backward(loss, [w])

        numeric = finite_difference(
            lambda vals: eval_loss(params, fi, victim, label, pair_weights=vals.reshape(-1, 1)),
            w0,
        )
        assert max_rel_error(gw, numeric) <= 1e-4, arch

    def test_local_view_matches_full_graph_victim_row(self):
        g = random_graph(40, 0.08, seed=14, d=5, y=3, ensure_connected=True)
        for arch in ARCHITECTURES:
            params = init_params(arch, g.d, g.y_count, SMALL)
            full = logits_of(params, ForwardInputs.from_graph(g))
            for v in (0, 17, 33):
                view = build_view(g, v, params.layers)
                local = logits_of(params, ForwardInputs.from_view(view))
                assert np.abs(local[view.center_local] - full[v]).max() <= 1e-9, arch


class TestTraining:
    def test_separable_toy_reaches_full_train_accuracy(self):
        rng = np.random.default_rng(0)
        n = 40
        labels = np.arange(n) % 2
        feats = np.zeros((n, 4))
        feats[labels == 0, :2] = rng.uniform(0.5, 1.0, (n // 2, 2))
        feats[labels == 1, 2:] = rng.uniform(0.5, 1.0, (n // 2, 2))
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
                 if labels[i] == labels[j] and rng.random() < 0.2]
        g = make_graph("sep", feats, pairs, labels,
                       train_mask=range(0, n, 2), val_mask=range(1, n, 4),
                       test_mask=range(3, n, 4), feature_kind="continuous", y_count=2)
        tm = train(g, "gcn", TrainConfig(hidden=8, max_epochs=100, patience=100, dropout=0.0, seed=1))
        preds = predict(tm.params, g)
        assert accuracy(preds, g, g.train_mask) == 1.0

    def test_training_determinism(self):
        g = random_graph(25, 0.15, seed=21, ensure_connected=True)
        cfg = TrainConfig(hidden=6, max_epochs=12, patience=12, seed=3)
        a = train(g, "gcn", cfg)
        b = train(g, "gcn", cfg)
        assert a.best_epoch == b.best_epoch
        assert a.loss_history == b.loss_history
        for x, y in zip(a.params.arrays, b.params.arrays):
            assert np.array_equal(x, y)

    def test_best_val_accuracy_reproducible(self):
        g = random_graph(30, 0.15, seed=22, ensure_connected=True)
        tm = train(g, "gcn", TrainConfig(hidden=6, max_epochs=15, patience=15, seed=4))
        preds = predict(tm.params, g)
        assert accuracy(preds, g, g.val_mask) == pytest.approx(tm.val_accuracy)

    def test_empty_train_mask_rejected(self):
        g = random_graph(10, 0.2, seed=23)
        g2 = make_graph("e", g.features, g.pairs, g.labels, [], g.val_mask, g.test_mask,
                        "continuous", g.y_count)
        with pytest.raises(TrainingError):
            train(g2, "gcn", SMALL)

    def test_params_frozen_after_training(self):
        g = random_graph(15, 0.2, seed=24)
        tm = train(g, "sgc", TrainConfig(hidden=4, max_epochs=3, patience=3))
        with pytest.raises(ValueError):
            tm.params.arrays[0][0, 0] = 0.0

    def test_trained_beats_untrained_on_train_mask(self):
        g = random_graph(40, 0.1, seed=25, ensure_connected=True)
        cfg = TrainConfig(hidden=8, max_epochs=60, patience=60, dropout=0.0, seed=6)
        tm = train(g, "gcn", cfg)
        untrained = init_params("gcn", g.d, g.y_count, cfg)
        acc_u = accuracy(predict(untrained, g), g, g.train_mask)
        acc_t = accuracy(predict(tm.params, g), g, g.train_mask)
        assert acc_t >= acc_u


class TestPredictAccuracy:
    def test_argmax_and_tie_rule(self):
        g = random_graph(6, 0.2, seed=31)
        cfg = SMALL
        params = init_params("sgc", g.d, g.y_count, cfg)
        for a in params.arrays:
            a[:] = 0.0  # all-zero logits: tie on every row
        preds = predict(params, g)
        assert np.array_equal(preds, np.zeros(g.n, dtype=np.int64))

    def test_accuracy_values(self):
        g = random_graph(10, 0.2, seed=32, y=2)
        preds = g.labels.copy()
        assert accuracy(preds, g, np.arange(10)) == 1.0
        preds = g.labels.copy()
        flip = np.arange(2)
        preds[flip] = 1 - preds[flip]
        assert accuracy(preds, g, np.arange(10)) == 0.8

    def test_empty_mask_rejected(self):
        g = random_graph(5, 0.2, seed=33)
        with pytest.raises(ValueError):
            accuracy(np.zeros(5, dtype=np.int64), g, np.array([], dtype=np.int64))

    def test_random_predictions_near_chance(self):
        rng = np.random.default_rng(0)
        y = 7
        g = random_graph(60, 0.05, seed=34, y=y)
        hits = []
        for trial in range(200):
            preds = rng.integers(0, y, g.n)
            hits.append(accuracy(preds, g, np.arange(g.n)))
        assert np.mean(hits) == pytest.approx(1.0 / y, abs=0.02)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        g = random_graph(12, 0.2, seed=41)
        tm = train(g, "gin", TrainConfig(hidden=4, gin_mlp_hidden=6, max_epochs=4, patience=4))
        p = tmp_path / "model.ckpt"
        save_checkpoint(tm.params, p, extra={"val_accuracy": tm.val_accuracy})
        loaded, extra = load_checkpoint(p)
        assert extra["val_accuracy"] == tm.val_accuracy
        assert loaded.names == tm.params.names
        for a, b in zip(loaded.arrays, tm.params.arrays):
            assert np.array_equal(a, b)
        assert np.array_equal(predict(loaded, g), predict(tm.params, g))

    def test_bad_file_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(TrainingError):
            load_checkpoint(p)
