import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadscan import data as D, network as N, training as tr
from roadscan.tensor import Tensor


def tiny_model(seed=0, dim=8):
    spec = N.NetworkSpec(
        layers=[N.LayerSpec("flatten"), N.LayerSpec("dense", units=dim)],
        input_shape=[1, 6, 6],
    )
    return N.SiameseModel.create(spec, seed=seed)


def cluster_images(n_per_class, rng):
    """Two overlapping clusters of flat 1x6x6 images.

    Close enough that a fresh random projection has nonzero loss, far
    enough apart that a couple of epochs separates them.
    """
    images = {}
    samples = []
    for label, center in (("normal", 0.45), ("pothole", 0.55)):
        for i in range(n_per_class):
            sid = f"{label}{i:02d}"
            images[sid] = (
                center + 0.05 * rng.normal(size=(1, 6, 6))
            ).astype(np.float32)
            samples.append(D.LabeledSample(sid, label, ""))
    return images, D.group_by_class(samples)


class TestConfig:
    def test_defaults(self):
        c = tr.TrainConfig()
        assert c.loss_kind == "triplet"
        assert c.margin == 1.0
        assert c.rmsprop_rho == 0.9
        assert c.learning_rate == 1e-3
        assert c.rmsprop_epsilon == 1e-8
        assert c.early_stop_patience == 5

    @pytest.mark.parametrize(
        "kw",
        [
            {"margin": 0.0},
            {"margin": -1.0},
            {"early_stop_patience": 21},
            {"loss_kind": "hinge"},
            {"input_mode": "sobel"},
        ],
    )
    def test_rejects_bad_values(self, kw):
        with pytest.raises(tr.ParameterError):
            tr.TrainConfig(**kw)

    def test_from_json_roundtrip(self, tmp_path):
        import json

        c = tr.TrainConfig(batch_size=8, seed=3, loss_kind="contrastive")
        p = tmp_path / "c.json"
        p.write_text(json.dumps(c.to_dict()))
        assert tr.TrainConfig.from_json(p) == c

    def test_from_json_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"learning_rte": 0.1}')
        with pytest.raises(tr.ParameterError, match="learning_rte"):
            tr.TrainConfig.from_json(p)

    def test_from_json_syntax_error_location(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n  "seed": }\n')
        with pytest.raises(tr.ParameterError, match="line 2"):
            tr.TrainConfig.from_json(p)


class TestContrastiveLoss:
    # frozen single-pair values of (1/2N) sum[y d^2 + (1-y) max(m-d,0)^2]
    @pytest.mark.parametrize(
        "y,d,expected",
        [
            (1, 0.0, 0.0),
            (0, 1.0, 0.0),
            (0, 1.7, 0.0),
            (1, 0.5, 0.125),
            (0, 0.0, 0.5),
        ],
    )
    def test_margin_one_table(self, y, d, expected):
        loss = tr.contrastive_loss(np.array([y]), Tensor(np.array([d])), margin=1.0)
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)
        assert tr.contrastive_loss_value([y], [d], 1.0) == pytest.approx(
            expected, abs=1e-12
        )

    def test_batch_averages(self):
        y = np.array([1, 0, 1, 0])
        d = np.array([0.0, 1.0, 0.5, 0.0])
        # (0 + 0 + 0.25 + 1) / (2*4)
        got = tr.contrastive_loss_value(y, d)
        assert got == pytest.approx(1.25 / 8)

    def test_empty_batch_rejected(self):
        with pytest.raises(tr.ParameterError):
            tr.contrastive_loss_value([], [])

    @given(
        n=st.integers(1, 20),
        margin=st.floats(0.1, 3.0),
        seed=st.integers(0, 99),
    )
    @settings(max_examples=40, deadline=None)
    def test_graph_matches_scalar_form(self, n, margin, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, size=n)
        d = rng.uniform(0, 2, size=n)
        graph = tr.contrastive_loss(y, Tensor(d, dtype=np.float64), margin)
        assert float(graph.data) == pytest.approx(
            tr.contrastive_loss_value(y, d, margin), rel=1e-9
        )


class TestTripletLoss:
    @pytest.mark.parametrize(
        "d_ap,d_an,expected",
        [
            (0.0, 2.0, 0.0),  # negative far enough: inactive
            (0.7, 0.7, 1.0),  # equal distances: loss = margin
            (1.0, 0.5, 1.5),  # inverted by 0.5: margin + 0.5
        ],
    )
    def test_margin_one_values(self, d_ap, d_an, expected):
        loss = tr.triplet_loss(
            Tensor(np.array([d_ap])), Tensor(np.array([d_an])), margin=1.0
        )
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)
        assert tr.triplet_loss_value([d_ap], [d_an]) == pytest.approx(
            expected, abs=1e-12
        )

    @given(n=st.integers(1, 20), seed=st.integers(0, 99))
    @settings(max_examples=40, deadline=None)
    def test_graph_matches_scalar_form(self, n, seed):
        rng = np.random.default_rng(seed)
        d_ap = rng.uniform(0, 2, size=n)
        d_an = rng.uniform(0, 2, size=n)
        graph = tr.triplet_loss(
            Tensor(d_ap, dtype=np.float64), Tensor(d_an, dtype=np.float64)
        )
        assert float(graph.data) == pytest.approx(
            tr.triplet_loss_value(d_ap, d_an), rel=1e-9
        )


class TestL2Penalty:
    def test_uniform_coefficient_hand_value(self):
        model = tiny_model()
        w = model.embed.parameters[1]["w"]
        w.data[...] = 2.0
        penalty = tr.l2_penalty(model, 0.01)
        assert float(penalty.data) == pytest.approx(0.01 * 4.0 * w.data.size)

    def test_zero_coefficient_is_constant_zero(self):
        model = tiny_model()
        penalty = tr.l2_penalty(model, 0.0)
        assert float(penalty.data) == 0.0
        assert not penalty._parents

    def test_none_uses_layer_coefficients(self):
        spec = N.preset_spec("roadscan_head", input_shape=(1, 16, 16))
        model = N.SiameseModel.create(spec, seed=0)
        penalty = tr.l2_penalty(model, None)
        coefs = [l.l2_coefficient for l in spec.layers if l.kind in ("conv", "dense")]
        weights = [
            p["w"].data
            for l, p in zip(spec.layers, model.embed.parameters)
            if l.kind in ("conv", "dense")
        ]
        expected = sum(c * (w.astype(np.float64) ** 2).sum() for c, w in zip(coefs, weights))
        assert float(penalty.data) == pytest.approx(expected, rel=1e-5)

    def test_penalty_reaches_weights_not_biases(self):
        model = tiny_model()
        penalty = tr.l2_penalty(model, 0.1)
        penalty.backward()
        assert model.embed.parameters[1]["w"].grad is not None
        assert model.embed.parameters[1]["b"].grad is None


class TestTrainLoop:
    def config(self, **kw):
        base = dict(
            loss_kind="triplet",
            batch_size=16,
            max_epochs=6,
            early_stop_patience=6,
            seed=0,
            l2_coefficient=0.0,
        )
        base.update(kw)
        return tr.TrainConfig(**base)

    def units(self, groups, kind, count, seed):
        if kind == "triplet":
            return D.sample_triplets(groups, count, seed)
        same = D.gen_same_pairs(groups, count // 2, seed)
        diff = D.gen_diff_pairs(groups, count // 2, seed + 1)
        return same + diff

    @pytest.mark.parametrize("kind", ["triplet", "contrastive"])
    def test_loss_decreases_on_separable_clusters(self, kind):
        rng = np.random.default_rng(0)
        images, groups = cluster_images(8, rng)
        model = tiny_model(seed=1)
        cfg = self.config(loss_kind=kind, learning_rate=0.01)
        train_u = self.units(groups, kind, 60, 0)
        val_u = self.units(groups, kind, 20, 1)
        history = tr.train(model, train_u, val_u, images, cfg)
        assert history.train_loss[-1] < history.train_loss[0]
        assert min(history.val_loss) < history.val_loss[0]

    def test_restores_best_epoch_weights(self):
        rng = np.random.default_rng(1)
        images, groups = cluster_images(6, rng)
        model = tiny_model(seed=2)
        cfg = self.config(max_epochs=5, early_stop_patience=5, learning_rate=0.05)
        train_u = self.units(groups, "triplet", 40, 2)
        val_u = self.units(groups, "triplet", 15, 3)
        history = tr.train(model, train_u, val_u, images, cfg)
        best = history.best_epoch
        assert history.val_loss[best - 1] == min(history.val_loss)
        after = tr.evaluate_loss(model, val_u, images, cfg)
        assert after == pytest.approx(history.val_loss[best - 1], rel=1e-6)

    def test_early_stop_bounds_epochs(self):
        rng = np.random.default_rng(2)
        images, groups = cluster_images(6, rng)
        model = tiny_model(seed=3)
        # a huge learning rate makes validation loss bounce immediately
        cfg = self.config(
            max_epochs=20, early_stop_patience=2, learning_rate=5.0
        )
        train_u = self.units(groups, "triplet", 40, 4)
        val_u = self.units(groups, "triplet", 15, 5)
        history = tr.train(model, train_u, val_u, images, cfg)
        assert history.stopped_epoch <= history.best_epoch + 2
        assert history.stopped_epoch < 20

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        images, groups = cluster_images(6, rng)
        cfg = self.config(max_epochs=3, early_stop_patience=3)
        train_u = self.units(groups, "triplet", 30, 6)
        val_u = self.units(groups, "triplet", 10, 7)
        results = []
        for _ in range(2):
            model = tiny_model(seed=4)
            history = tr.train(model, train_u, val_u, images, cfg)
            results.append((history.train_loss, [t.data.copy() for t in tr._model_params(model)]))
        assert results[0][0] == results[1][0]
        for a, b in zip(results[0][1], results[1][1]):
            np.testing.assert_array_equal(a, b)

    def test_divergence_names_epoch_and_batch(self):
        rng = np.random.default_rng(4)
        images, groups = cluster_images(4, rng)
        images["normal00"] = np.full((1, 6, 6), np.nan, dtype=np.float32)
        model = tiny_model(seed=5)
        cfg = self.config(max_epochs=2, early_stop_patience=2)
        train_u = self.units(groups, "triplet", 20, 8)
        val_u = self.units(groups, "triplet", 8, 9)
        with pytest.raises(tr.DivergenceError, match="epoch 1"):
            tr.train(model, train_u, val_u, images, cfg)

    def test_empty_sets_rejected(self):
        model = tiny_model()
        cfg = self.config()
        with pytest.raises(tr.ParameterError, match="training"):
            tr.train(model, [], [D.Triplet("a", "b", "c")], {}, cfg)
        with pytest.raises(tr.ParameterError, match="validation"):
            tr.train(model, [D.Triplet("a", "b", "c")], [], {}, cfg)


class TestSimilarityHead:
    def test_separates_clusters(self):
        rng = np.random.default_rng(5)
        images, groups = cluster_images(8, rng)
        model = tiny_model(seed=6)
        pairs = D.gen_same_pairs(groups, 30, 0) + D.gen_diff_pairs(groups, 30, 1)
        tr.fit_similarity_head(model, pairs, images, epochs=150)
        probs = {1: [], 0: []}
        for p in pairs:
            _, s = N.siamese_forward(
                model, images[p.a], images[p.b]
            )
            probs[p.label].append(s)
        assert np.mean(probs[1]) > np.mean(probs[0]) + 0.2

    def test_single_label_rejected(self):
        model = tiny_model()
        pairs = [D.LabeledPair("a", "b", 1)]
        with pytest.raises(tr.DegeneracyError, match=r"\[1\]"):
            tr.fit_similarity_head(model, pairs, {}, epochs=10)

    def test_zero_epochs_is_noop(self):
        rng = np.random.default_rng(6)
        images, groups = cluster_images(3, rng)
        model = tiny_model(seed=7)
        w0 = model.sim_w.data.copy()
        pairs = D.gen_same_pairs(groups, 2, 0) + D.gen_diff_pairs(groups, 2, 1)
        tr.fit_similarity_head(model, pairs, images, epochs=0)
        np.testing.assert_array_equal(model.sim_w.data, w0)


def test_history_csv_format(tmp_path):
    h = tr.TrainHistory(
        train_loss=[0.5, 0.25], val_loss=[0.6, 0.3], seconds=[1.0, 1.5]
    )
    p = tmp_path / "h.csv"
    h.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,seconds"
    assert lines[1].startswith("1,0.50000000,0.60000000,")
    assert len(lines) == 3
