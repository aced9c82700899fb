"""
Unit tests for hash_model.py

Tests cover:
- Model initialization, hash / relaxed codes
- Pairwise loss value and gradient
- Training loop behavior and gradient hooks
- Checkpoint save/load
"""

import numpy as np
import pytest

from core import ArgumentError, ShapeError, FormatError, ConfigMismatchError
from tensor_core import AffineLayer, SgdSchedule, numeric_gradient
from hash_model import (
    HashModel, HashModelConfig, PairwiseLossConfig,
    hash_forward, relaxed_forward, pairwise_similarity, similarity_matrix,
    pairwise_batch_loss, train, save_checkpoint, load_checkpoint,
)
from poison_pipeline import Dataset


# ===== Tests: Model =====

class TestHashModel:
    """Tests for HashModel construction and forward passes"""

    def test_init_is_seeded(self, tiny_model_config):
        """Test that the same seed gives identical parameters"""
        a = HashModel.init(tiny_model_config)
        b = HashModel.init(tiny_model_config)
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p, q)

    def test_config_validation(self):
        """Test that code_length < 4 is rejected"""
        with pytest.raises(ArgumentError):
            HashModelConfig(code_length=2)

    def test_codes_are_binary(self, tiny_model, tiny_splits):
        """Test that hash codes are ±1 and agree with the relaxed sign"""
        train_set, _, _ = tiny_splits
        codes = hash_forward(tiny_model, train_set.images)
        relaxed = relaxed_forward(tiny_model, train_set.images)
        assert codes.shape == (len(train_set), 8)
        assert set(np.unique(codes).tolist()) <= {-1, 1}
        assert np.all(np.abs(relaxed) < 1.0)
        nonzero = relaxed != 0
        np.testing.assert_array_equal(np.sign(relaxed[nonzero]), codes[nonzero])

    def test_sign_zero_is_plus_one(self, tiny_model_config):
        """Test that an all-zero head maps every image to the all-ones code"""
        model = HashModel.init(tiny_model_config)
        head = model.layers[-1]
        model.layers[-1] = AffineLayer(np.zeros_like(head.weights), np.zeros_like(head.bias))
        code = hash_forward(model, np.full((8, 8, 1), 0.5))
        np.testing.assert_array_equal(code, np.ones(8, dtype=np.int8))

    def test_wrong_image_shape(self, tiny_model):
        """Test that a mismatched image raises ShapeError"""
        with pytest.raises(ShapeError):
            hash_forward(tiny_model, np.zeros((4, 4, 1)))

    def test_copy_is_independent(self, tiny_model):
        """Test that mutating a copy leaves the original intact"""
        clone = tiny_model.copy()
        clone.layers[0].weights[:] = 0.0
        assert np.any(tiny_model.layers[0].weights != 0.0)


# ===== Tests: Similarity and loss =====

class TestPairwiseLoss:
    """Tests for similarity and pairwise_batch_loss"""

    def test_similarity(self):
        """Test that sharing one label is enough for similarity"""
        assert pairwise_similarity(np.array([1, 0, 1]), np.array([0, 0, 1])) == 1
        assert pairwise_similarity(np.array([1, 0, 0]), np.array([0, 1, 0])) == 0
        np.testing.assert_array_equal(similarity_matrix(np.eye(2), np.eye(2)), np.eye(2))

    def test_gradient_matches_finite_differences(self, rng):
        """Test the analytic gradient against central differences"""
        labels = np.array([[1, 0], [1, 0], [0, 1], [0, 1], [1, 1]])
        cfg = PairwiseLossConfig(quantization_weight=0.05)
        for _ in range(50):
            u = rng.uniform(-0.9, 0.9, size=(5, 6))
            _, grad = pairwise_batch_loss(u, labels, cfg)
            numeric = numeric_gradient(lambda z: pairwise_batch_loss(z, labels, cfg)[0], u, h=1e-6)
            assert np.linalg.norm(grad - numeric) / (np.linalg.norm(numeric) + 1e-12) < 1e-4

    def test_similar_pair_pulled_together(self):
        """Test that identical codes of similar items give zero contrastive loss"""
        u = np.array([[1.0, 1.0, -1.0, -1.0]] * 2) * 0.999
        loss, _ = pairwise_batch_loss(u, np.array([[1], [1]]), PairwiseLossConfig(quantization_weight=0.0))
        assert loss == pytest.approx(4 * (1 - 0.999 ** 2) / 2)

    def test_permutation_invariant(self, rng):
        """Test that shuffling the batch leaves the loss unchanged"""
        u = rng.uniform(-0.9, 0.9, size=(6, 4))
        labels = np.eye(3)[[0, 1, 2, 0, 1, 2]]
        perm = rng.permutation(6)
        a, _ = pairwise_batch_loss(u, labels, PairwiseLossConfig())
        b, _ = pairwise_batch_loss(u[perm], labels[perm], PairwiseLossConfig())
        assert a == pytest.approx(b)

    def test_single_code_rejected(self):
        """Test that a batch of one raises ArgumentError"""
        with pytest.raises(ArgumentError):
            pairwise_batch_loss(np.zeros((1, 4)), np.ones((1, 1)), PairwiseLossConfig())

    def test_margin_range(self):
        """Test that a margin above K is rejected"""
        with pytest.raises(ArgumentError):
            PairwiseLossConfig(margin=9.0).resolved_margin(8)


# ===== Tests: Training =====

class TestTrain:
    """Tests for the training loop"""

    def test_zero_epochs_returns_copy(self, tiny_model, tiny_splits):
        """Test that epochs=0 returns the same parameters"""
        model, trace = train(tiny_model, tiny_splits[0], SgdSchedule(epochs=0), PairwiseLossConfig())
        assert trace == []
        assert model is not tiny_model
        for p, q in zip(model.params(), tiny_model.params()):
            np.testing.assert_array_equal(p, q)

    def test_loss_decreases(self, tiny_model, tiny_splits):
        """Test that training lowers the epoch loss"""
        _, trace = train(tiny_model, tiny_splits[0], SgdSchedule(epochs=15, batch_size=10), PairwiseLossConfig())
        assert len(trace) == 15
        assert trace[-1] < trace[0]

    def test_input_model_untouched(self, tiny_model, tiny_splits):
        """Test that training does not mutate the starting model"""
        before = [p.copy() for p in tiny_model.params()]
        train(tiny_model, tiny_splits[0], SgdSchedule(epochs=2, batch_size=8), PairwiseLossConfig())
        for p, q in zip(before, tiny_model.params()):
            np.testing.assert_array_equal(p, q)

    def test_summing_hook_matches_plain(self, tiny_model, tiny_splits):
        """Test that a hook which just sums per-sample gradients reproduces plain training"""
        schedule = SgdSchedule(epochs=2, batch_size=8)
        plain, _ = train(tiny_model, tiny_splits[0], schedule, PairwiseLossConfig())
        hooked, _ = train(tiny_model, tiny_splits[0], schedule, PairwiseLossConfig(), hook=lambda g: g.summed())
        for p, q in zip(plain.params(), hooked.params()):
            np.testing.assert_allclose(p, q, atol=1e-10)

    def test_empty_dataset(self, tiny_model):
        """Test that an empty dataset raises ArgumentError"""
        empty = Dataset(np.zeros(0), np.zeros((0, 8, 8, 1)), np.zeros((0, 3)))
        with pytest.raises(ArgumentError):
            train(tiny_model, empty, SgdSchedule(epochs=1), PairwiseLossConfig())

    def test_batch_of_one_rejected(self, tiny_model, tiny_splits):
        """Test that batch_size=1 raises ArgumentError"""
        with pytest.raises(ArgumentError):
            train(tiny_model, tiny_splits[0], SgdSchedule(epochs=1, batch_size=1), PairwiseLossConfig())


# ===== Tests: Checkpoints =====

class TestCheckpoint:
    """Tests for save_checkpoint / load_checkpoint"""

    def test_round_trip_bitwise(self, tiny_model, tmp_path):
        """Test that a reloaded model has identical parameters"""
        path = tmp_path / "m.hpl"
        save_checkpoint(tiny_model, path)
        loaded = load_checkpoint(path, expected=tiny_model.config)
        assert loaded.config == tiny_model.config
        for p, q in zip(loaded.params(), tiny_model.params()):
            np.testing.assert_array_equal(p, q)

    def test_architecture_mismatch(self, tiny_model, tmp_path):
        """Test that a different expected code length raises ConfigMismatchError"""
        path = tmp_path / "m.hpl"
        save_checkpoint(tiny_model, path)
        other = HashModelConfig(input_dims=(8, 8, 1), hidden_sizes=(6,), code_length=16)
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(path, expected=other)

    def test_truncated(self, tiny_model, tmp_path):
        """Test that a truncated file raises FormatError"""
        path = tmp_path / "m.hpl"
        save_checkpoint(tiny_model, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        """Test that a foreign file raises FormatError"""
        path = tmp_path / "m.hpl"
        path.write_bytes(b"XXXX" + bytes(32))
        with pytest.raises(FormatError):
            load_checkpoint(path)


"""
Summary:
- Seeded init, ±1 codes with sign(0)=+1, relaxed codes in (-1, 1)
- Pairwise loss gradient checked against finite differences
- Training: zero epochs, decreasing loss, no mutation, hook equivalence
- Checkpoints: bitwise round trip, mismatch, truncation, magic
"""
