"""Contrastive loss, training loop, fine-tuning, and embedding helpers."""

import math

import numpy as np
import pytest

from semloc.contrastive import (
    Batch,
    TrainConfig,
    embed_mask,
    embed_similarity,
    finetune,
    info_nce_loss,
    load_train_config,
    pair_indices,
    train,
    with_finetune_mode,
)
from semloc.errors import ConfigError
from semloc.maskio import SemanticMask
from semloc.nn import EmbeddingModel, build_default_model, dense, l2_normalize, relu


def nce_oracle(z, pair, tau):
    """Per-anchor softmax cross-entropy, summed — scalar math only.

    Written independently of the production code: no log-sum-exp trick,
    no matrix algebra, just the definition of each anchor's term.
    """
    two_n = z.shape[0]
    total = 0.0
    for i in range(two_n):
        numer = math.exp(float(np.dot(z[i], z[pair[i]])) / tau)
        denom = 0.0
        for k in range(two_n):
            if k != i:
                denom += math.exp(float(np.dot(z[i], z[k])) / tau)
        total += -math.log(numer / denom)
    return total


def random_masks(rng, count, h=16, w=12, classes=4):
    return [
        SemanticMask(rng.integers(0, classes, (h, w), dtype=np.uint8))
        for _ in range(count)
    ]


def tiny_config(**overrides):
    """A config small enough to train in well under a second."""
    from semloc.augment import AugmentConfig

    base = dict(
        batch_n=2, epochs=3, seed=5, palette_size=4,
        embed_dim=8, proj_dim=6,
        augment=AugmentConfig(out_w=12, out_h=16, seed=5),
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestPairIndices:
    @pytest.mark.parametrize("n", [1, 2, 5, 16])
    def test_maps_each_view_to_its_partner(self, n):
        j = pair_indices(n)
        assert j.shape == (2 * n,)
        for i in range(n):
            assert j[i] == i + n and j[i + n] == i

    def test_is_fixed_point_free_involution(self):
        j = pair_indices(7)
        idx = np.arange(14)
        assert np.array_equal(j[j], idx)
        assert not np.any(j == idx)

    def test_rejects_nonpositive_n(self):
        with pytest.raises(ValueError):
            pair_indices(0)


class TestBatch:
    def test_odd_row_count_rejected(self):
        with pytest.raises(ValueError, match="2N"):
            Batch(np.zeros((3, 4)), np.array([1, 2, 0]))

    def test_pair_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            Batch(np.zeros((4, 2)), np.array([1, 0]))

    def test_fixed_point_rejected(self):
        with pytest.raises(ValueError, match="involution"):
            Batch(np.zeros((4, 2)), np.array([0, 3, 2, 1]))

    def test_non_involution_rejected(self):
        with pytest.raises(ValueError, match="involution"):
            Batch(np.zeros((4, 2)), np.array([1, 2, 3, 0]))


class TestInfoNCE:
    def test_matches_scalar_oracle(self, rng):
        for two_n in (2, 4, 8, 32):
            n = two_n // 2
            pair = pair_indices(n)
            for _ in range(10):
                z = l2_normalize(rng.standard_normal((two_n, 6)))
                loss, _ = info_nce_loss(Batch(z, pair), 0.07)
                assert abs(loss - nce_oracle(z, pair, 0.07)) <= 1e-10

    def test_single_pair_loss_is_exactly_zero(self, rng):
        # With 2N = 2 the only candidate is the positive: -log(1) = 0,
        # and the max-shifted evaluation must hit that exactly.
        for _ in range(20):
            z = rng.standard_normal((2, 5)) * 10.0
            loss, grad = info_nce_loss(Batch(z, pair_indices(1)), 0.07)
            assert loss == 0.0
            np.testing.assert_array_equal(grad, np.zeros_like(z))

    def test_loss_nonnegative_with_negatives(self, rng):
        # The positive is one of the candidates, so every anchor term is
        # log-sum-exp minus one of its own summands: >= 0.
        for _ in range(10):
            z = rng.standard_normal((8, 4))
            loss, _ = info_nce_loss(Batch(z, pair_indices(4)), 0.2)
            assert loss >= 0.0

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_nonpositive_temperature_rejected(self, tau, rng):
        z = rng.standard_normal((4, 3))
        with pytest.raises(ConfigError):
            info_nce_loss(Batch(z, pair_indices(2)), tau)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_nonfinite_embeddings_rejected(self, bad, rng):
        z = rng.standard_normal((4, 3))
        z[2, 1] = bad
        with pytest.raises(ValueError, match="finite"):
            info_nce_loss(Batch(z, pair_indices(2)), 0.1)

    def test_gradient_matches_finite_differences(self, rng):
        z = rng.standard_normal((8, 5))
        pair = pair_indices(4)
        _, grad = info_nce_loss(Batch(z, pair), 0.15)
        fd = np.zeros_like(z)
        step = 1e-6
        for i in range(z.shape[0]):
            for d in range(z.shape[1]):
                zp = z.copy(); zp[i, d] += step
                zm = z.copy(); zm[i, d] -= step
                hi, _ = info_nce_loss(Batch(zp, pair), 0.15)
                lo, _ = info_nce_loss(Batch(zm, pair), 0.15)
                fd[i, d] = (hi - lo) / (2 * step)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)

    def test_extreme_magnitudes_stay_finite(self):
        # Unnormalized embeddings with huge dot products must not overflow
        # thanks to the max shift.
        z = np.array([[300.0, 0.0], [0.0, 300.0], [300.0, 1.0], [1.0, 300.0]])
        loss, grad = info_nce_loss(Batch(z, pair_indices(2)), 1.0)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))


class TestTraining:
    def test_history_and_determinism(self, rng):
        masks = random_masks(np.random.default_rng(40), 8)
        config = tiny_config()
        model_a, hist_a = train(masks, config)
        model_b, hist_b = train(masks, config)
        assert len(hist_a) == config.epochs
        assert all(np.isfinite(v) for v in hist_a)
        assert hist_a == hist_b
        assert np.array_equal(model_a.params, model_b.params)

    def test_different_seed_changes_history(self):
        masks = random_masks(np.random.default_rng(41), 8)
        _, hist_a = train(masks, tiny_config(seed=1))
        _, hist_b = train(masks, tiny_config(seed=2))
        assert hist_a != hist_b

    def test_zero_epochs_returns_initialized_model(self):
        masks = random_masks(np.random.default_rng(42), 4)
        model, history = train(masks, tiny_config(epochs=0))
        assert history == []
        assert model.proj_dim == 6

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train([], tiny_config())

    def test_dataset_smaller_than_batch_rejected(self):
        masks = random_masks(np.random.default_rng(43), 3)
        with pytest.raises(ValueError, match="batch_n"):
            train(masks, tiny_config(batch_n=4))

    def test_training_moves_parameters(self):
        masks = random_masks(np.random.default_rng(44), 8)
        config = tiny_config(epochs=1)
        model = build_default_model(
            palette_size=4, in_h=16, in_w=12, embed_dim=8, proj_dim=6, seed=3)
        before = model.params.copy()
        trained, _ = train(masks, config, model=model)
        assert trained is model
        assert not np.array_equal(trained.params, before)


class TestFinetune:
    @staticmethod
    def labeled_pairs(count, seed):
        gen = np.random.default_rng(seed)
        return [
            (SemanticMask(gen.integers(0, 4, (16, 12), dtype=np.uint8)),
             SemanticMask(gen.integers(0, 4, (16, 12), dtype=np.uint8)))
            for _ in range(count)
        ]

    @staticmethod
    def base_model(seed=3):
        return build_default_model(
            palette_size=4, in_h=16, in_w=12, embed_dim=8, proj_dim=6, seed=seed)

    def test_mode_none_rejected(self):
        with pytest.raises(ConfigError, match="finetune_mode"):
            finetune(self.base_model(), self.labeled_pairs(4, 50), tiny_config())

    def test_input_model_is_untouched(self):
        model = self.base_model()
        before = model.params.copy()
        config = tiny_config(epochs=1, finetune_mode="all_layers")
        finetune(model, self.labeled_pairs(4, 51), config)
        assert np.array_equal(model.params, before)

    def test_add_two_dense_grows_and_freezes_base(self):
        model = self.base_model()
        config = tiny_config(epochs=2, finetune_mode="add_two_dense")
        tuned = finetune(model, self.labeled_pairs(4, 52), config)
        zdim = model.proj_dim
        added = 2 * (zdim * zdim + zdim)
        assert tuned.n_params == model.n_params + added
        # the pre-existing parameters must be bit-identical: frozen means frozen
        assert np.array_equal(tuned.params[: model.n_params], model.params)
        assert not np.all(tuned.params[model.n_params:] == 0.0)

    def test_last_two_dense_freezes_encoder(self):
        model = self.base_model()
        config = tiny_config(epochs=2, finetune_mode="last_two_dense")
        tuned = finetune(model, self.labeled_pairs(4, 53), config)
        encoder_extent = model.parameter_slice(len(model.encoder) - 1).stop
        assert np.array_equal(tuned.params[:encoder_extent],
                              model.params[:encoder_extent])
        assert not np.array_equal(tuned.params[encoder_extent:],
                                  model.params[encoder_extent:])

    def test_last_two_dense_needs_two_dense_layers(self):
        shallow = EmbeddingModel(
            (4, 16, 12),
            build_default_model(palette_size=4, in_h=16, in_w=12,
                                embed_dim=8, proj_dim=6).encoder,
            (dense(6),),
            seed=1,
        )
        config = tiny_config(finetune_mode="last_two_dense")
        with pytest.raises(ConfigError, match="two dense"):
            finetune(shallow, self.labeled_pairs(4, 54), config)

    def test_all_layers_moves_encoder(self):
        model = self.base_model()
        config = tiny_config(epochs=2, finetune_mode="all_layers")
        tuned = finetune(model, self.labeled_pairs(4, 55), config)
        encoder_extent = model.parameter_slice(len(model.encoder) - 1).stop
        assert not np.array_equal(tuned.params[:encoder_extent],
                                  model.params[:encoder_extent])

    def test_too_few_pairs_rejected(self):
        config = tiny_config(batch_n=8, finetune_mode="all_layers")
        with pytest.raises(ValueError, match="pairs"):
            finetune(self.base_model(), self.labeled_pairs(3, 56), config)

    def test_with_finetune_mode_helper(self):
        config = tiny_config()
        assert with_finetune_mode(config, "all_layers").finetune_mode == "all_layers"
        assert config.finetune_mode == "none"


class TestEmbedding:
    def test_embed_mask_is_unit_norm(self, rng):
        model = build_default_model(palette_size=4, in_h=16, in_w=12,
                                    embed_dim=8, proj_dim=6, seed=9)
        mask = SemanticMask(rng.integers(0, 4, (16, 12), dtype=np.uint8))
        z = embed_mask(model, mask)
        assert z.shape == (6,)
        assert abs(np.linalg.norm(z) - 1.0) <= 1e-12

    def test_unnormalized_model_returns_raw_output(self, rng):
        model = build_default_model(palette_size=4, in_h=16, in_w=12,
                                    embed_dim=8, proj_dim=6, seed=9,
                                    normalize=False)
        mask = SemanticMask(rng.integers(0, 4, (16, 12), dtype=np.uint8))
        z = embed_mask(model, mask)
        _, z_fwd = model.forward(
            np.eye(4)[mask.data].transpose(2, 0, 1)[None])
        np.testing.assert_array_equal(z, z_fwd[0])

    def test_wrong_raster_size_rejected(self, rng):
        model = build_default_model(palette_size=4, in_h=16, in_w=12)
        mask = SemanticMask(rng.integers(0, 4, (8, 8), dtype=np.uint8))
        with pytest.raises(ValueError, match="resize"):
            embed_mask(model, mask)

    def test_similarity_is_symmetric_cosine(self, rng):
        model = build_default_model(palette_size=4, in_h=16, in_w=12,
                                    embed_dim=8, proj_dim=6, seed=9)
        a = SemanticMask(rng.integers(0, 4, (16, 12), dtype=np.uint8))
        b = SemanticMask(rng.integers(0, 4, (16, 12), dtype=np.uint8))
        s_ab = embed_similarity(model, a, b)
        s_ba = embed_similarity(model, b, a)
        assert s_ab == s_ba
        assert -1.0 - 1e-12 <= s_ab <= 1.0 + 1e-12
        assert embed_similarity(model, a, a) == pytest.approx(1.0, abs=1e-12)


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(temperature=0.0),
        dict(temperature=-0.5),
        dict(lr=-0.01),
        dict(batch_n=1),
        dict(epochs=-1),
        dict(momentum=1.0),
        dict(momentum=-0.1),
        dict(finetune_mode="sideways"),
        dict(palette_size=1),
    ])
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            "# comment lines and blanks are fine\n"
            "\n"
            "batch_n = 4\n"
            "temperature = 0.1\n"
            "epochs = 7\n"
            "seed = 11\n"
            "min_crop_ratio = 0.5   # nested augmentation key\n"
            "out_w = 40\n"
            "out_h = 32\n"
        )
        config = load_train_config(path)
        assert config.batch_n == 4
        assert config.temperature == 0.1
        assert config.epochs == 7
        assert config.augment.min_crop_ratio == 0.5
        assert config.augment.out_w == 40 and config.augment.out_h == 32
        # the training seed feeds the augmentation stream too
        assert config.augment.seed == 11

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_train_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("epochs = soon\n")
        with pytest.raises(ConfigError):
            load_train_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_train_config(tmp_path / "absent.cfg")
