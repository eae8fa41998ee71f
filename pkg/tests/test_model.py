"""Head construction, forward/backward wiring, training steps, serialization."""

import numpy as np
import pytest

from fsn.data import ClipSample, WeakSample
from fsn.model import (
    AblationHead,
    FsnHead,
    ModelConfig,
    WfsnHead,
    fsn_forward,
    fsn_frame_logits,
    fsn_loss_and_grads,
    fsn_train_step,
    head_decay_flags,
    head_layers,
    head_parameters,
    init_ablation,
    init_fsn,
    init_wfsn,
    load_model,
    receptive_field,
    receptive_field_snippets,
    save_model,
    wfsn_forward_predict,
    wfsn_forward_train,
    wfsn_loss_and_grads,
    wfsn_train_step,
)
from fsn.nncore import (
    GAP,
    GMP,
    OptimizerState,
    framewise_cross_entropy,
    gradient_check,
    softmax_vec,
    temporal_pool,
)

TINY = ModelConfig(num_classes=2, feature_dim=5, hidden_channels=6, snippet_len=5, clip_len=35)


def tiny_clip(rng, config, label_value=1):
    labels = np.zeros(config.clip_len, dtype=np.int64)
    labels[10:20] = label_value
    return ClipSample(
        features=rng.standard_normal((config.snippets_per_clip, config.feature_dim)),
        labels=labels,
    )


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig(num_classes=20, feature_dim=400)
        assert cfg.hidden_channels == 256
        assert cfg.dilations == (1, 2, 4)
        assert cfg.snippets_per_clip == 7

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(num_classes=0, feature_dim=4),
            dict(num_classes=2, feature_dim=0),
            dict(num_classes=2, feature_dim=4, clip_len=36),
            dict(num_classes=2, feature_dim=4, dilations=(1, 0, 4)),
            dict(num_classes=2, feature_dim=4, dilations=()),
            dict(num_classes=2, feature_dim=4, hidden_channels=0),
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestInit:
    def test_layer_shapes(self):
        head = init_fsn(TINY, seed=0)
        dims = [(l.in_channels, l.out_channels, l.kernel_size, l.dilation) for l in head_layers(head)]
        assert dims == [(5, 6, 3, 1), (6, 6, 3, 2), (6, 6, 3, 4), (6, 3, 3, 1)]
        weak = init_wfsn(TINY, seed=0)
        assert head_layers(weak)[-1].out_channels == 2
        flat = init_ablation(TINY, seed=0)
        assert head_layers(flat) == [flat.classifier]
        assert (flat.classifier.kernel_size, flat.classifier.dilation) == (1, 1)
        assert flat.classifier.in_channels == 5

    def test_biases_start_at_zero(self):
        for head in (init_fsn(TINY, 3), init_wfsn(TINY, 3), init_ablation(TINY, 3)):
            for layer in head_layers(head):
                assert np.all(layer.bias == 0.0)

    def test_weights_respect_glorot_bound(self):
        head = init_fsn(TINY, seed=1)
        for layer in head_layers(head):
            limit = np.sqrt(6.0 / (layer.in_channels * 3 + layer.out_channels * 3))
            assert np.max(np.abs(layer.weights)) <= limit

    def test_seed_determinism(self):
        a, b = init_fsn(TINY, 7), init_fsn(TINY, 7)
        for la, lb in zip(head_layers(a), head_layers(b)):
            np.testing.assert_array_equal(la.weights, lb.weights)
        c = init_fsn(TINY, 8)
        assert any(
            not np.array_equal(la.weights, lc.weights)
            for la, lc in zip(head_layers(a), head_layers(c))
        )

    def test_wfsn_rejects_unknown_pooling(self):
        with pytest.raises(ValueError):
            init_wfsn(TINY, 0, pooling="sum")


class TestFsnForward:
    @pytest.mark.parametrize("snippets,target", [(7, 35), (7, 7), (1, 5), (12, 36)])
    def test_output_is_a_distribution_per_frame(self, snippets, target):
        rng = np.random.default_rng(snippets + target)
        head = init_fsn(TINY, seed=2)
        scores = fsn_forward(rng.standard_normal((snippets, 5)), head, target)
        assert scores.shape == (target, 3)
        np.testing.assert_allclose(scores.sum(axis=1), np.ones(target), atol=1e-12)
        assert np.all(scores > 0)

    def test_zero_weights_give_uniform_scores(self):
        head = init_fsn(TINY, seed=0)
        for layer in head_layers(head):
            layer.weights[:] = 0.0
            layer.bias[:] = 0.0
        scores = fsn_forward(np.random.default_rng(0).standard_normal((7, 5)), head, 35)
        np.testing.assert_allclose(scores, np.full((35, 3), 1.0 / 3.0))

    def test_default_target_is_clip_len(self):
        head = init_fsn(TINY, seed=2)
        x = np.random.default_rng(1).standard_normal((7, 5))
        np.testing.assert_array_equal(fsn_forward(x, head), fsn_forward(x, head, 35))

    def test_rejects_wrong_feature_dim(self):
        head = init_fsn(TINY, seed=2)
        with pytest.raises(ValueError):
            fsn_forward(np.zeros((7, 4)), head, 35)

    def test_ablation_head_scores_frames_too(self):
        head = init_ablation(TINY, seed=2)
        scores = fsn_forward(np.random.default_rng(3).standard_normal((7, 5)), head, 35)
        assert scores.shape == (35, 3)
        np.testing.assert_allclose(scores.sum(axis=1), np.ones(35), atol=1e-12)


class TestReceptiveField:
    def test_default_fsn_field(self):
        head = init_fsn(TINY, seed=0)
        assert receptive_field_snippets(head) == 17
        assert receptive_field(head) == 85

    def test_ablation_field_is_one_snippet(self):
        head = init_ablation(TINY, seed=0)
        assert receptive_field_snippets(head) == 1
        assert receptive_field(head) == 5

    @pytest.mark.parametrize("make,width", [(init_fsn, 17), (init_ablation, 1)])
    def test_probing_matches_formula(self, make, width):
        # positive weights, positive inputs: no ReLU dead zones, no cancellation
        head = make(TINY, seed=4)
        for layer in head_layers(head):
            layer.weights[:] = np.abs(layer.weights) + 0.01
        rng = np.random.default_rng(5)
        positions = 41
        x = rng.uniform(0.5, 1.5, size=(positions, 5))
        bumped = x.copy()
        bumped[positions // 2] += 1.0
        base, _ = fsn_frame_logits(x, head, positions)
        moved, _ = fsn_frame_logits(bumped, head, positions)
        changed = np.flatnonzero(np.abs(moved - base).max(axis=1) > 1e-12)
        assert changed.size == width
        assert changed[0] == positions // 2 - width // 2
        assert changed[-1] == positions // 2 + width // 2


class TestFsnTraining:
    def test_loss_matches_independent_forward(self):
        rng = np.random.default_rng(6)
        head = init_fsn(TINY, seed=6)
        batch = [tiny_clip(rng, TINY, 1), tiny_clip(rng, TINY, 2)]
        loss, _ = fsn_loss_and_grads(batch, head)
        logits = np.stack([fsn_frame_logits(c.features, head, 35)[0] for c in batch])
        labels = np.stack(
            [np.eye(3)[c.labels] for c in batch]
        )
        expected, _ = framewise_cross_entropy(logits, labels)
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_loss_drops_on_separable_toy_data(self):
        rng = np.random.default_rng(7)
        config = ModelConfig(num_classes=2, feature_dim=4, hidden_channels=8, snippet_len=1, clip_len=7)
        means = {0: np.zeros(4), 1: np.array([3.0, 0, 0, 0]), 2: np.array([0, 3.0, 0, 0])}
        batch = []
        for label_value in (1, 2):
            for _ in range(4):
                labels = np.zeros(7, dtype=np.int64)
                labels[2:5] = label_value
                feats = np.stack([means[l] for l in labels])
                feats += rng.standard_normal(feats.shape) * 0.1
                batch.append(ClipSample(features=feats, labels=labels))
        head = init_fsn(config, seed=7)
        opt = OptimizerState(learning_rate=0.05, momentum=0.9)
        initial = fsn_loss_and_grads(batch, head)[0]
        for _ in range(200):
            loss = fsn_train_step(batch, head, opt)
        assert loss < 0.1 * initial

    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        rng = np.random.default_rng(8)
        head = init_fsn(TINY, seed=8)
        before = [p.copy() for p in head_parameters(head)]
        opt = OptimizerState(learning_rate=0.0, momentum=0.9, weight_decay=0.001)
        fsn_train_step([tiny_clip(rng, TINY)], head, opt)
        for p, q in zip(head_parameters(head), before):
            np.testing.assert_array_equal(p, q)

    def test_rejects_empty_batch(self):
        head = init_fsn(TINY, seed=0)
        with pytest.raises(ValueError):
            fsn_train_step([], head, OptimizerState(learning_rate=0.1))

    def test_rejects_out_of_range_labels(self):
        rng = np.random.default_rng(9)
        head = init_fsn(TINY, seed=9)
        clip = tiny_clip(rng, TINY, label_value=3)
        with pytest.raises(ValueError):
            fsn_loss_and_grads([clip], head)

    def test_end_to_end_gradients(self):
        rng = np.random.default_rng(10)
        config = ModelConfig(num_classes=2, feature_dim=3, hidden_channels=4, snippet_len=5, clip_len=15)
        head = init_fsn(config, seed=10)
        batch = [
            ClipSample(
                features=rng.standard_normal((3, 3)),
                labels=rng.integers(0, 3, size=15),
            )
            for _ in range(2)
        ]

        def fn(params):
            return fsn_loss_and_grads(batch, head)

        assert gradient_check(fn, head_parameters(head)).passed


class TestWfsn:
    def test_train_scores_pool_the_predict_logits(self):
        rng = np.random.default_rng(11)
        head = init_wfsn(TINY, seed=11, pooling=GMP)
        x = rng.standard_normal((9, 5))
        from fsn.model import wfsn_position_logits

        pooled, _ = temporal_pool(wfsn_position_logits(x, head), GMP)
        np.testing.assert_allclose(wfsn_forward_train(x, head), softmax_vec(pooled))

    def test_constant_positions_make_pooling_irrelevant(self):
        # zero weights leave only the classifier bias, so every position
        # carries the same score vector and the pooling choice cannot matter
        head_gap = init_wfsn(TINY, seed=12, pooling=GAP)
        head_gmp = init_wfsn(TINY, seed=12, pooling=GMP)
        for head in (head_gap, head_gmp):
            for layer in head_layers(head):
                layer.weights[:] = 0.0
            head.classifier.bias[:] = np.array([0.7, -1.3])
        x = np.random.default_rng(12).standard_normal((6, 5))
        np.testing.assert_allclose(
            wfsn_forward_train(x, head_gap), wfsn_forward_train(x, head_gmp), atol=1e-12
        )

    def test_one_hot_position_drives_gmp_argmax(self):
        config = ModelConfig(num_classes=3, feature_dim=3, hidden_channels=4, snippet_len=1, clip_len=4)
        head = init_wfsn(config, seed=0, pooling=GMP)
        for layer in head.convs:
            layer.weights[:] = 0.0
        # identity-ish trunk is zero; drive the classifier bias path instead
        head.classifier.weights[:] = 0.0
        head.classifier.bias[:] = 0.0
        logits = np.zeros((4, 3))
        logits[2, 1] = 5.0
        # emulate by feeding through a zero network plus bias: check pooling directly
        pooled, _ = temporal_pool(logits, GMP)
        assert int(np.argmax(softmax_vec(pooled))) == 1

    def test_predict_mode_rows_are_distributions(self):
        rng = np.random.default_rng(13)
        head = init_wfsn(TINY, seed=13)
        scores = wfsn_forward_predict(rng.standard_normal((8, 5)), head)
        assert scores.shape == (8, 2)
        np.testing.assert_allclose(scores.sum(axis=1), np.ones(8), atol=1e-12)

    def test_loss_drops_on_toy_weak_data(self):
        rng = np.random.default_rng(14)
        config = ModelConfig(num_classes=2, feature_dim=4, hidden_channels=8, snippet_len=1, clip_len=4)
        protos = {1: np.array([3.0, 0, 0, 0]), 2: np.array([0, 3.0, 0, 0])}
        batch = []
        for cls in (1, 2):
            for _ in range(3):
                feats = rng.standard_normal((10, 4)) * 0.1
                feats[rng.integers(0, 10)] += protos[cls]
                label = np.zeros(2)
                label[cls - 1] = 1.0
                batch.append(WeakSample(features=feats, video_label=label))
        head = init_wfsn(config, seed=14, pooling=GMP)
        opt = OptimizerState(learning_rate=0.1, momentum=0.9)
        initial = wfsn_loss_and_grads(batch, head)[0]
        for _ in range(150):
            loss = wfsn_train_step(batch, head, opt)
        assert loss < 0.25 * initial

    def test_multi_label_loss_averages_over_positives(self):
        rng = np.random.default_rng(15)
        head = init_wfsn(TINY, seed=15, pooling=GAP)
        feats = rng.standard_normal((6, 5))
        both = WeakSample(features=feats, video_label=np.array([1.0, 1.0]))
        probs = wfsn_forward_train(feats, head)
        expected = -(np.log(probs[0]) + np.log(probs[1])) / 2.0
        loss, _ = wfsn_loss_and_grads([both], head)
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_rejects_label_without_positives(self):
        head = init_wfsn(TINY, seed=0)
        sample = WeakSample(features=np.zeros((4, 5)), video_label=np.zeros(2))
        with pytest.raises(ValueError):
            wfsn_loss_and_grads([sample], head)

    @pytest.mark.parametrize("pooling", [GAP, GMP])
    def test_end_to_end_gradients(self, pooling):
        rng = np.random.default_rng(16)
        config = ModelConfig(num_classes=2, feature_dim=3, hidden_channels=4, snippet_len=1, clip_len=4)
        head = init_wfsn(config, seed=16, pooling=pooling)
        batch = []
        for cls in (1, 2):
            label = np.zeros(2)
            label[cls - 1] = 1.0
            batch.append(WeakSample(features=rng.standard_normal((5, 3)), video_label=label))

        def fn(params):
            return wfsn_loss_and_grads(batch, head)

        assert gradient_check(fn, head_parameters(head)).passed


class TestSerialization:
    @pytest.mark.parametrize(
        "make",
        [
            lambda: init_fsn(TINY, seed=20),
            lambda: init_wfsn(TINY, seed=21, pooling=GAP),
            lambda: init_wfsn(TINY, seed=22, pooling=GMP),
            lambda: init_ablation(TINY, seed=23),
        ],
    )
    def test_round_trip_is_bit_exact(self, tmp_path, make):
        head = make()
        path = tmp_path / "model.fsn"
        save_model(head, path)
        loaded = load_model(path)
        assert type(loaded) is type(head)
        assert loaded.config == head.config
        for a, b in zip(head_layers(head), head_layers(loaded)):
            np.testing.assert_array_equal(a.weights, b.weights)
            np.testing.assert_array_equal(a.bias, b.bias)
            assert a.dilation == b.dilation
        if isinstance(head, WfsnHead):
            assert loaded.pooling == head.pooling

    def test_rewrite_produces_identical_bytes(self, tmp_path):
        head = init_fsn(TINY, seed=24)
        first = tmp_path / "a.fsn"
        second = tmp_path / "b.fsn"
        save_model(head, first)
        save_model(load_model(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_loaded_head_predicts_identically(self, tmp_path):
        head = init_fsn(TINY, seed=25)
        path = tmp_path / "model.fsn"
        save_model(head, path)
        x = np.random.default_rng(0).standard_normal((7, 5))
        np.testing.assert_array_equal(
            fsn_forward(x, head, 35), fsn_forward(x, load_model(path), 35)
        )

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.fsn"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_rejects_truncated_payload(self, tmp_path):
        head = init_fsn(TINY, seed=26)
        path = tmp_path / "model.fsn"
        save_model(head, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload"):
            load_model(path)

    def test_rejects_mismatched_class_count(self, tmp_path):
        head = init_fsn(TINY, seed=27)
        path = tmp_path / "model.fsn"
        save_model(head, path)
        other = ModelConfig(num_classes=4, feature_dim=5)
        with pytest.raises(ValueError, match="classes"):
            load_model(path, expected_config=other)

    def test_decay_flags_alternate(self):
        head = init_fsn(TINY, seed=0)
        assert head_decay_flags(head) == [True, False] * 4
        assert len(head_parameters(head)) == 8
