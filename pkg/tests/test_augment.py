"""Bag augmentation: shared scaling, Gaussian jitter, mixup, eval no-op."""

import numpy as np
import pytest

from slidevec import augment
from slidevec.augment import AugmentConfig
from slidevec.clustering import BagRepresentation


def make_bag(matrix, slide_id="s"):
    k, dim = matrix.shape
    return BagRepresentation(
        slide_id=slide_id,
        k=k,
        dim=dim,
        means=np.asarray(matrix, dtype=np.float64),
        cluster_sizes=np.full(k, 3, dtype=np.int64),
        member_map=[[i] for i in range(k)],
    )


class TestConfig:
    def test_defaults_match_training_recipe(self):
        cfg = AugmentConfig()
        assert (cfg.scale_min, cfg.scale_max) == (0.9, 1.0)
        assert cfg.jitter_level == 0.01
        assert cfg.mixup_alpha == 0.2

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError):
            AugmentConfig(scale_min=0.0)
        with pytest.raises(ValueError):
            AugmentConfig(scale_min=1.1, scale_max=1.0)
        with pytest.raises(ValueError):
            AugmentConfig(jitter_level=-0.1)
        with pytest.raises(ValueError):
            AugmentConfig(mixup_alpha=0.0)


class TestScale:
    def test_degenerate_range_is_identity(self):
        bag = make_bag(np.arange(6.0).reshape(2, 3))
        cfg = AugmentConfig(scale_min=1.0, scale_max=1.0)
        out = augment.scale_bag(bag, cfg, np.random.default_rng(0))
        assert np.array_equal(out.means, bag.means)

    def test_known_factor(self):
        class FixedRng:
            def uniform(self, lo, hi):
                return 0.9

        out = augment.scale_matrix(np.array([[10.0]]), FixedRng(), 0.9, 1.0)
        assert out[0, 0] == pytest.approx(9.0)

    def test_shared_factor_across_bag(self):
        rng = np.random.default_rng(3)
        bag = make_bag(rng.normal(size=(4, 5)) + 3.0)
        out = augment.scale_bag(bag, AugmentConfig(), np.random.default_rng(1))
        ratios = out.means / bag.means
        assert np.allclose(ratios, ratios.flat[0])
        assert 0.9 <= ratios.flat[0] <= 1.0


class TestJitter:
    def test_zero_level_is_identity(self):
        bag = make_bag(np.ones((3, 3)))
        cfg = AugmentConfig(jitter_level=0.0)
        out = augment.jitter_bag(bag, cfg, np.random.default_rng(0))
        assert np.array_equal(out.means, bag.means)

    def test_monte_carlo_noise_statistics(self):
        # million-sample empirical moments of (out - in)
        m = np.zeros((1000, 1000))
        out = augment.jitter_matrix(m, np.random.default_rng(99), 0.01)
        noise = out - m
        assert abs(noise.std() - 0.01) < 0.0005
        assert abs(noise.mean()) < 0.0005


class TestMixup:
    def test_lambda_one_returns_first_bag_exactly(self):
        rng = np.random.default_rng(0)
        a = make_bag(rng.normal(size=(3, 4)), "a")
        b = make_bag(rng.normal(size=(3, 4)), "b")
        ya, yb = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        out, soft = augment.mixup_bags(a, ya, b, yb, AugmentConfig(), rng, lam=1.0)
        assert np.array_equal(out.means, a.means)
        assert np.array_equal(soft, ya)

    def test_lambda_zero_returns_second_bag_exactly(self):
        rng = np.random.default_rng(0)
        a = make_bag(rng.normal(size=(2, 2)), "a")
        b = make_bag(rng.normal(size=(2, 2)), "b")
        ya, yb = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        out, soft = augment.mixup_bags(a, ya, b, yb, AugmentConfig(), rng, lam=0.0)
        assert np.array_equal(out.means, b.means)
        assert np.array_equal(soft, yb)

    def test_quarter_convex_combination(self):
        out = augment.mix_matrices(np.array([[2.0]]), np.array([[6.0]]), 0.25)
        assert out[0, 0] == pytest.approx(5.0)

    def test_soft_label_sums_to_one(self):
        rng = np.random.default_rng(5)
        a = make_bag(rng.normal(size=(2, 3)), "a")
        b = make_bag(rng.normal(size=(2, 3)), "b")
        ya, yb = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        for _ in range(20):
            _, soft = augment.mixup_bags(a, ya, b, yb, AugmentConfig(), rng)
            assert soft.sum() == pytest.approx(1.0)
            assert (soft >= 0).all()

    def test_output_within_elementwise_interval(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4))
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        for _ in range(25):
            lam = float(rng.beta(0.2, 0.2))
            out = augment.mix_matrices(a, b, lam)
            assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(0)
        a = make_bag(np.zeros((2, 3)), "a")
        b = make_bag(np.zeros((3, 3)), "b")
        with pytest.raises(ValueError):
            augment.mixup_bags(a, np.array([1.0, 0.0]), b, np.array([0.0, 1.0]),
                               AugmentConfig(), rng, lam=0.5)


class TestPipelineBehaviour:
    def test_shape_preserved_by_all_augmentations(self):
        rng = np.random.default_rng(7)
        bag = make_bag(rng.normal(size=(5, 8)))
        cfg = AugmentConfig()
        assert augment.scale_bag(bag, cfg, rng).means.shape == (5, 8)
        assert augment.jitter_bag(bag, cfg, rng).means.shape == (5, 8)
        other = make_bag(rng.normal(size=(5, 8)), "o")
        mixed, _ = augment.mixup_bags(bag, np.array([1.0, 0.0]), other,
                                      np.array([0.0, 1.0]), cfg, rng)
        assert mixed.means.shape == (5, 8)

    def test_eval_mode_is_bitwise_noop(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=(4, 6))
        cfg = AugmentConfig()
        out = augment.augment_matrix(m, cfg, np.random.default_rng(0), training=False)
        assert out is m
        disabled = AugmentConfig(enabled=False)
        out2 = augment.augment_matrix(m, disabled, np.random.default_rng(0), training=True)
        assert out2 is m

    def test_fixed_seed_reproduces_stream(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(3, 3))
        cfg = AugmentConfig(rng_seed=42)
        runs = []
        for _ in range(2):
            outs = [
                augment.augment_matrix(m, cfg, augment.bag_rng(cfg, epoch, i), True)
                for epoch in range(3)
                for i in range(4)
            ]
            runs.append(np.stack(outs))
        assert np.array_equal(runs[0], runs[1])
        # distinct (epoch, bag) pairs draw distinct noise
        assert not np.array_equal(runs[0][0], runs[0][1])
