"""Attention classifier and MLP: forward values, hand-derived gradients versus
central finite differences, AdamW behavior, and training dynamics."""

import math

import numpy as np
import pytest

from slidevec import mil
from slidevec.augment import AugmentConfig
from slidevec.errors import TrainingDivergedError
from slidevec.mil import (
    AdamW,
    AmilModel,
    MlpModel,
    TrainConfig,
    amil_backward,
    amil_forward,
    bag_loss,
    mlp_forward,
    train,
)


def tiny_amil():
    return AmilModel(
        attn_proj=np.array([[1.0]]),
        attn_score=np.array([1.0]),
        clf_weight=np.array([[1.0]]),
        clf_bias=np.array([0.0]),
    )


def random_amil(rng, dim, n_classes=2, width=4):
    return AmilModel(
        attn_proj=rng.normal(scale=0.7, size=(width, dim)),
        attn_score=rng.normal(scale=0.7, size=width),
        clf_weight=rng.normal(scale=0.7, size=(n_classes, dim)),
        clf_bias=rng.normal(scale=0.3, size=n_classes),
    )


def random_mlp(rng, input_size, n_classes=2, hidden=6):
    return MlpModel(
        hidden_weight=rng.normal(scale=0.7, size=(hidden, input_size)),
        hidden_bias=rng.normal(scale=0.3, size=hidden),
        out_weight=rng.normal(scale=0.7, size=(n_classes, hidden)),
        out_bias=rng.normal(scale=0.3, size=n_classes),
    )


def finite_difference_grads(model, bag, label, step=1e-4):
    grads = {}
    for name, tensor in model.params().items():
        g = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = bag_loss(model, bag, label)
            flat[i] = orig - step
            lo = bag_loss(model, bag, label)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads[name] = g
    return grads


def max_guarded_relative_error(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, b = analytic[name], numeric[name]
        # guard tiny denominators: below 1e-3 the comparison is absolute
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
        worst = max(worst, float(rel.max()))
    return worst


class TestAmilForward:
    def test_singleton_bag_attention_is_one(self):
        rng = np.random.default_rng(0)
        model = random_amil(rng, dim=5)
        h = rng.normal(size=(1, 5))
        logits, attention = amil_forward(model, h)
        assert attention.tolist() == [1.0]
        expected = model.clf_weight @ h[0] + model.clf_bias
        assert np.allclose(logits, expected, atol=1e-12)

    def test_identical_rows_give_uniform_attention(self):
        rng = np.random.default_rng(1)
        model = random_amil(rng, dim=4)
        row = rng.normal(size=4)
        for k in (2, 3, 7):
            bag = np.tile(row, (k, 1))
            logits, attention = amil_forward(model, bag)
            assert np.array_equal(attention, np.full(k, 1.0 / k))
            single_logits, _ = amil_forward(model, row[None, :])
            assert np.allclose(logits, single_logits, atol=1e-12)

    def test_hand_computed_scalar_example(self):
        # dim=1, width=1, identity weights, bag rows {0, 2}; oracle recomputed
        # from the definition with math.tanh / math.exp
        model = tiny_amil()
        logits, attention = amil_forward(model, np.array([[0.0], [2.0]]))
        e1 = math.tanh(2.0)
        a1 = 1.0 / (1.0 + math.exp(-e1))
        z = 2.0 * a1
        assert attention[0] == pytest.approx(1.0 - a1, abs=1e-4)
        assert attention[1] == pytest.approx(a1, abs=1e-4)
        assert logits[0] == pytest.approx(z, abs=1e-4)
        # frozen literals for the same quantities
        assert attention[1] == pytest.approx(0.7239274686640463, abs=1e-12)
        assert logits[0] == pytest.approx(1.4478549373280927, abs=1e-12)

    def test_attention_sums_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            k = int(rng.integers(1, 17))
            dim = int(rng.integers(1, 65))
            model = random_amil(rng, dim)
            bag = rng.normal(size=(k, dim))
            _, attention = amil_forward(model, bag)
            assert abs(attention.sum() - 1.0) < 1e-7

    def test_dim_mismatch_raises(self):
        model = random_amil(np.random.default_rng(0), dim=4)
        with pytest.raises(ValueError):
            amil_forward(model, np.zeros((3, 5)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            k = int(rng.integers(1, 17))
            dim = int(rng.integers(1, 65))
            model = random_amil(rng, dim)
            bag = rng.normal(size=(k, dim))
            perm = rng.permutation(k)
            logits, attention = amil_forward(model, bag)
            logits_p, attention_p = amil_forward(model, bag[perm])
            assert np.abs(logits - logits_p).max() < 1e-6
            assert np.abs(attention[perm] - attention_p).max() < 1e-9


class TestGradients:
    def test_amil_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        for trial in range(10):
            dim = int(rng.integers(1, 7))
            k = int(rng.integers(1, 6))
            c = int(rng.integers(2, 4))
            model = random_amil(rng, dim, n_classes=c, width=int(rng.integers(1, 5)))
            bag = rng.normal(size=(k, dim))
            label = np.zeros(c)
            label[int(rng.integers(c))] = 1.0
            analytic = amil_backward(model, bag, label)
            numeric = finite_difference_grads(model, bag, label)
            assert max_guarded_relative_error(analytic, numeric) < 1e-4

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for trial in range(10):
            k = int(rng.integers(1, 5))
            dim = int(rng.integers(1, 5))
            c = int(rng.integers(2, 4))
            model = random_mlp(rng, k * dim, n_classes=c, hidden=int(rng.integers(1, 7)))
            bag = rng.normal(size=(k, dim))
            label = np.zeros(c)
            label[int(rng.integers(c))] = 1.0
            analytic = mil.mlp_backward(model, bag, label)
            numeric = finite_difference_grads(model, bag, label)
            assert max_guarded_relative_error(analytic, numeric) < 1e-4

    def test_bias_gradient_closed_form(self):
        rng = np.random.default_rng(12)
        model = random_amil(rng, dim=5, n_classes=3)
        bag = rng.normal(size=(4, 5))
        label = np.array([0.0, 1.0, 0.0])
        logits, _ = amil_forward(model, bag)
        grads = amil_backward(model, bag, label)
        assert np.allclose(grads["clf_bias"], mil.softmax(logits) - label, atol=1e-12)

    def test_gradients_vanish_at_forced_optimum(self):
        # drive the true class logit far above the rest: loss and grads -> 0
        rng = np.random.default_rng(13)
        model = random_amil(rng, dim=3, n_classes=2)
        model.clf_bias = np.array([-200.0, 200.0])
        bag = rng.normal(size=(3, 3))
        label = np.array([0.0, 1.0])
        loss, grads = mil.amil_loss_and_grads(model, bag, label)
        assert loss < 1e-12
        for g in grads.values():
            assert np.abs(g).max() < 1e-12


class TestMlpForward:
    def test_zero_weights_return_bias(self):
        model = MlpModel(
            hidden_weight=np.zeros((4, 6)),
            hidden_bias=np.zeros(4),
            out_weight=np.zeros((2, 4)),
            out_bias=np.array([0.3, -0.7]),
        )
        logits = mlp_forward(model, np.ones((2, 3)))
        assert logits.tolist() == [0.3, -0.7]

    def test_single_path_reproduces_input_coordinate(self):
        # one hidden unit wired to input coordinate 2; positive value passes ReLU
        model = MlpModel(
            hidden_weight=np.zeros((3, 4)),
            hidden_bias=np.zeros(3),
            out_weight=np.zeros((2, 3)),
            out_bias=np.zeros(2),
        )
        model.hidden_weight[1, 2] = 1.0
        model.out_weight[0, 1] = 1.0
        bag = np.array([[0.1, 0.2, 1.75, 0.4]])
        logits = mlp_forward(model, bag)
        assert logits[0] == pytest.approx(1.75)
        assert logits[1] == 0.0

    def test_flattening_is_row_major(self):
        model = random_mlp(np.random.default_rng(4), input_size=6)
        bag = np.arange(6.0).reshape(2, 3)
        assert np.allclose(mlp_forward(model, bag), mlp_forward(model, bag.ravel()[None, :]))

    def test_size_mismatch_raises(self):
        model = random_mlp(np.random.default_rng(5), input_size=6)
        with pytest.raises(ValueError):
            mlp_forward(model, np.zeros((2, 4)))


class TestAdamW:
    def test_zero_gradient_decay_factor(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01, epochs=1)
        params = {"p": np.array([2.0, -3.0, 0.5])}
        start = params["p"].copy()
        opt = AdamW(params, cfg)
        zero = {"p": np.zeros(3)}
        for step in range(1, 4):
            opt.step(params, zero)
            assert np.allclose(params["p"], start * (1 - 0.1 * 0.01) ** step, rtol=1e-12)

    def test_zero_learning_rate_freezes_parameters(self):
        cfg = TrainConfig(learning_rate=0.0, weight_decay=0.5, epochs=1)
        params = {"p": np.array([1.0, -2.0])}
        before = params["p"].tobytes()
        opt = AdamW(params, cfg)
        opt.step(params, {"p": np.array([5.0, -1.0])})
        assert params["p"].tobytes() == before

    def test_descends_a_quadratic(self):
        cfg = TrainConfig(learning_rate=0.05, weight_decay=0.0, epochs=1)
        params = {"p": np.array([4.0])}
        opt = AdamW(params, cfg)
        for _ in range(500):
            opt.step(params, {"p": 2.0 * params["p"]})
        assert abs(params["p"][0]) < 1e-3


def separable_bags(rng, n, k=4, dim=8, shift=5.0):
    bags, labels = [], []
    for i in range(n):
        label = i % 2
        bag = rng.normal(size=(k, dim)) * 0.5
        if label == 1:
            bag[0, 0] += shift
        bags.append(bag)
        labels.append(label)
    return bags, np.array(labels)


class TestTrain:
    def test_learns_linearly_separable_bags(self):
        rng = np.random.default_rng(21)
        train_bags, train_labels = separable_bags(rng, 40)
        val_bags, val_labels = separable_bags(rng, 12)
        model = AmilModel.initialize(8, 2, attention_width=16, seed=0)
        cfg = TrainConfig(epochs=50, batch_size=8, seed=3)
        result = train(model, train_bags, train_labels, val_bags, val_labels, 2, cfg)
        assert result.best_val_accuracy >= 0.9
        assert all(np.isfinite(h.val_loss) for h in result.history)

    def test_zero_learning_rate_keeps_parameters_bit_identical(self):
        rng = np.random.default_rng(22)
        bags, labels = separable_bags(rng, 8)
        model = AmilModel.initialize(8, 2, attention_width=4, seed=1)
        snapshot = {k: v.copy() for k, v in model.params().items()}
        cfg = TrainConfig(learning_rate=0.0, weight_decay=0.0, epochs=3, seed=0)
        result = train(model, bags[:6], labels[:6], bags[6:], labels[6:], 2, cfg)
        for name, value in result.model.params().items():
            assert value.tobytes() == snapshot[name].tobytes()

    def test_same_seeds_identical_history(self):
        rng = np.random.default_rng(23)
        bags, labels = separable_bags(rng, 16)
        cfg = TrainConfig(epochs=5, batch_size=4, seed=9)
        aug_cfg = AugmentConfig(rng_seed=5)
        histories = []
        for _ in range(2):
            model = AmilModel.initialize(8, 2, attention_width=8, seed=2)
            result = train(model, bags[:12], labels[:12], bags[12:], labels[12:], 2,
                           cfg, aug_cfg)
            histories.append([(h.train_loss, h.val_accuracy, h.val_loss)
                              for h in result.history])
        assert histories[0] == histories[1]

    def test_divergence_aborts_with_diagnostic(self):
        rng = np.random.default_rng(24)
        bags, labels = separable_bags(rng, 8)
        model = AmilModel.initialize(8, 2, attention_width=4, seed=3)
        model.clf_weight[...] = np.nan
        cfg = TrainConfig(epochs=2, seed=0)
        with pytest.raises(TrainingDivergedError):
            train(model, bags[:6], labels[:6], bags[6:], labels[6:], 2, cfg)

    def test_mlp_trains_too(self):
        rng = np.random.default_rng(25)
        bags, labels = separable_bags(rng, 40)
        model = MlpModel.initialize(4 * 8, 2, hidden_width=16, seed=0)
        cfg = TrainConfig(epochs=40, batch_size=8, seed=1)
        result = train(model, bags[:30], labels[:30], bags[30:], labels[30:], 2, cfg)
        assert result.best_val_accuracy >= 0.8


class TestPipelineInvariance:
    def test_upstream_shuffle_does_not_change_canonical_bag_or_mlp(self):
        from slidevec.clustering import build_bag, kmeans_fit

        rng = np.random.default_rng(30)
        centers = np.array([[0.0, 0.0], [8.0, 8.0], [-8.0, 8.0]])
        x = np.concatenate([c + rng.normal(0, 0.05, size=(15, 2)) for c in centers])
        bag = build_bag(kmeans_fit(x, 3, seed=4), x, "s").means
        perm = rng.permutation(len(x))
        bag_p = build_bag(kmeans_fit(x[perm], 3, seed=4), x[perm], "s").means
        model = random_mlp(np.random.default_rng(6), input_size=6)
        assert np.abs(mlp_forward(model, bag) - mlp_forward(model, bag_p)).max() < 1e-6


class TestCheckpoint:
    def test_round_trip_amil(self, tmp_path):
        model = AmilModel.initialize(6, 3, attention_width=5, seed=8)
        path = tmp_path / "m.ckpt"
        mil.save_checkpoint(path, model, meta={"k": 10})
        loaded, header = mil.load_checkpoint(path)
        assert isinstance(loaded, AmilModel)
        assert header["meta"]["k"] == 10
        for name, value in model.params().items():
            # storage is float32; reload matches to float32 precision
            assert np.allclose(loaded.params()[name], value, atol=1e-6)
        bag = np.random.default_rng(0).normal(size=(4, 6))
        a, _ = amil_forward(model, bag)
        b, _ = amil_forward(loaded, bag)
        assert np.allclose(a, b, atol=1e-5)

    def test_round_trip_mlp(self, tmp_path):
        model = MlpModel.initialize(12, 2, hidden_width=7, seed=9)
        path = tmp_path / "m.ckpt"
        mil.save_checkpoint(path, model)
        loaded, header = mil.load_checkpoint(path)
        assert isinstance(loaded, MlpModel)
        assert header["model_type"] == "mlp"

    def test_history_csv_format(self, tmp_path):
        history = [mil.EpochStats(1, 0.5, 0.75, 0.4), mil.EpochStats(2, 0.25, 1.0, 0.2)]
        path = tmp_path / "h.csv"
        mil.write_history(history, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_accuracy,val_loss"
        assert lines[1] == "1,0.500000,0.7500,0.400000"
