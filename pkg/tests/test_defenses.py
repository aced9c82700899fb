"""
Unit tests for defenses.py

Tests cover:
- Power iteration and spectral outlier scores
- Spectral-signature filtering with confusion counts
- Dormant-unit pruning
- Per-sample clipping and DP training
"""

import csv

import numpy as np
import pytest

from core import ArgumentError
from tensor_core import GradStore, SgdSchedule
from hash_model import HashModel, HashModelConfig, PairwiseLossConfig, hash_forward, train
from hamming_space import encode_database
from eval_metrics import map_score
from poison_pipeline import label_vector
from defenses import (
    top_singular_direction, spectral_scores, default_remove_count, confusion_counts,
    spectral_signature_filter, write_spectral_csv,
    dormant_order, pruned_copy, prune_dormant, write_prune_csv,
    DpConfig, clip_per_sample, dp_gradient_hook, dp_train, write_dp_csv,
)


# ===== Tests: Spectral signatures =====

class TestSpectral:
    """Tests for top_singular_direction and spectral_scores"""

    def test_matches_eigh(self, rng):
        """Test the power iteration against the dense eigendecomposition"""
        basis, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        x = (rng.normal(size=(200, 5)) * np.array([5.0, 1.0, 0.8, 0.6, 0.4])) @ basis.T
        v = top_singular_direction(x)
        centered = x - x.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        assert abs(float(v @ vecs[:, -1])) >= 1 - 1e-6
        assert np.linalg.norm(v) == pytest.approx(1.0)

    def test_sign_convention(self, rng):
        """Test that the largest-magnitude component is positive"""
        v = top_singular_direction(rng.normal(size=(30, 4)))
        assert v[np.argmax(np.abs(v))] > 0

    def test_shifted_cluster_scores_highest(self, rng):
        """Test that a small shifted cluster occupies the top scores"""
        x = rng.normal(size=(100, 6))
        x[90:, 0] += 8.0
        top = np.argsort(-spectral_scores(x))[:15]
        assert set(range(90, 100)) <= set(top.tolist())

    def test_centering_invariance(self, rng):
        """Test that adding a constant offset leaves scores unchanged"""
        x = rng.normal(size=(40, 5))
        np.testing.assert_allclose(spectral_scores(x + 3.0), spectral_scores(x), rtol=1e-8, atol=1e-10)

    def test_constant_features(self):
        """Test that zero-variance features give zero scores"""
        assert np.all(spectral_scores(np.ones((5, 3))) == 0.0)

    def test_default_remove_count(self):
        """Test the 1.5x rounding-up rule"""
        assert default_remove_count(60) == 90
        assert default_remove_count(5) == 8
        assert default_remove_count(0) == 0


class TestSpectralFilter:
    """Tests for spectral_signature_filter and confusion counts"""

    def test_filter_bounds(self, tiny_model, tiny_splits):
        """Test removed ids come from the subset and counts add up"""
        train_set = tiny_splits[0]
        subset = train_set.subset(train_set.class_indices(label_vector(0, 3)))
        poisoned = subset.ids[:2].tolist()
        report = spectral_signature_filter(tiny_model, subset, 3, poisoned)
        assert report.removed.size == 3
        assert set(report.removed.tolist()) <= set(subset.ids.tolist())
        c = report.counts
        assert c["poisoned_removed"] + c["poisoned_remained"] == 2
        assert sum(c.values()) == len(subset)

    def test_removal_order(self, tiny_model, tiny_splits):
        """Test that removed ids are in descending score order"""
        train_set = tiny_splits[0]
        subset = train_set.subset(train_set.class_indices(label_vector(1, 3)))
        report = spectral_signature_filter(tiny_model, subset, 4)
        score_of = dict(zip(report.ids.tolist(), report.scores.tolist()))
        removed_scores = [score_of[i] for i in report.removed.tolist()]
        assert removed_scores == sorted(removed_scores, reverse=True)
        assert report.counts == {}

    def test_remove_everything_rejected(self, tiny_model, tiny_splits):
        """Test that remove_count >= subset size raises ArgumentError"""
        train_set = tiny_splits[0]
        subset = train_set.subset(train_set.class_indices(label_vector(0, 3)))
        with pytest.raises(ArgumentError):
            spectral_signature_filter(tiny_model, subset, len(subset))

    def test_confusion_counts(self):
        """Test the four tallies on a hand example"""
        counts = confusion_counts(np.array([1, 2, 3, 4, 5]), np.array([1, 4]), [1, 2])
        assert counts == {"clean_removed": 1, "clean_remained": 2, "poisoned_removed": 1, "poisoned_remained": 1}

    def test_spectral_csv(self, tiny_model, tiny_splits, tmp_path):
        """Test the per-sample CSV columns"""
        train_set = tiny_splits[0]
        subset = train_set.subset(train_set.class_indices(label_vector(0, 3)))
        report = spectral_signature_filter(tiny_model, subset, 2, subset.ids[:1])
        write_spectral_csv(report, subset.ids[:1], tmp_path / "spectral.csv")
        with open(tmp_path / "spectral.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["id", "score", "removed", "is_poisoned"]
        assert len(rows) == len(subset) + 1
        assert sum(int(r[2]) for r in rows[1:]) == 2


# ===== Tests: Pruning =====

class TestPruning:
    """Tests for dormant-unit pruning"""

    @staticmethod
    def _scores(query, database):
        def evaluate(model):
            db = encode_database(model, database)
            return map_score(model, query, db, top_n=10), 0.0
        return evaluate

    def test_zero_count_is_unpruned(self, tiny_model, tiny_splits):
        """Test that pruning 0 units reproduces the unpruned score"""
        train_set, query, database = tiny_splits
        evaluate = self._scores(query, database)
        report = prune_dormant(tiny_model, train_set, [0, 2], evaluate)
        assert report.rows[0][0] == 0
        assert report.rows[0][1] == evaluate(tiny_model)[0]

    def test_pruned_sets_nest(self, tiny_model, tiny_splits):
        """Test that each pruned set contains the previous one"""
        train_set, query, database = tiny_splits
        report = prune_dormant(tiny_model, train_set, [4, 0, 2, 4], self._scores(query, database))
        assert [r[0] for r in report.rows] == [0, 2, 4]
        for smaller, larger in zip(report.pruned_units, report.pruned_units[1:]):
            assert set(smaller) <= set(larger)

    def test_dormant_order_is_permutation(self, tiny_model, tiny_splits):
        """Test that every hidden unit is ranked exactly once"""
        assert sorted(dormant_order(tiny_model, tiny_splits[0]).tolist()) == list(range(6))

    def test_all_units_pruned(self, tiny_model, tiny_splits):
        """Test that pruning the whole layer collapses every code to one"""
        pruned = pruned_copy(tiny_model, range(6))
        codes = hash_forward(pruned, tiny_splits[0].images)
        assert np.all(codes == codes[0])

    def test_no_hidden_layer(self, tiny_splits):
        """Test that a model without hidden layers prunes nothing and keeps its score"""
        train_set, query, database = tiny_splits
        model = HashModel.init(HashModelConfig(input_dims=(8, 8, 1), hidden_sizes=(), code_length=8, seed=3))
        evaluate = self._scores(query, database)
        report = prune_dormant(model, train_set, [0], evaluate)
        assert report.rows == [(0, evaluate(model)[0], 0.0)]
        assert report.pruned_units == [[]]
        with pytest.raises(ArgumentError):
            prune_dormant(model, train_set, [1], evaluate)

    def test_original_untouched(self, tiny_model):
        """Test that pruned_copy leaves the source model intact"""
        before = [p.copy() for p in tiny_model.params()]
        pruned_copy(tiny_model, [0, 1, 2])
        for a, b in zip(before, tiny_model.params()):
            np.testing.assert_array_equal(a, b)

    def test_count_above_width(self, tiny_model, tiny_splits):
        """Test that counts larger than the layer width raise ArgumentError"""
        with pytest.raises(ArgumentError):
            prune_dormant(tiny_model, tiny_splits[0], [7], lambda m: (0.0, 0.0))

    def test_prune_csv(self, tmp_path):
        """Test the prune CSV header"""
        from defenses import PruneReport
        write_prune_csv(PruneReport(rows=[(0, 0.5, 0.25)]), tmp_path / "prune.csv")
        with open(tmp_path / "prune.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["pruned_count", "map", "tmap"]
        assert rows[1][0] == "0"


# ===== Tests: Differential privacy =====

class TestDp:
    """Tests for per-sample clipping and DP training"""

    def _per_sample(self, rng, scale=1.0):
        return GradStore([rng.normal(size=(5, 3, 2)) * scale, rng.normal(size=(5, 3)) * scale], None,
                         per_sample=True)

    def test_clip_bounds_norms(self, rng):
        """Test that clipped per-sample norms stay within the bound"""
        clipped = clip_per_sample(self._per_sample(rng), 0.5)
        assert np.all(clipped.sample_norms() <= 0.5)

    def test_small_gradients_unchanged(self, rng):
        """Test that gradients already inside the bound are not rescaled"""
        grads = self._per_sample(rng, scale=1e-3)
        clipped = clip_per_sample(grads, 10.0)
        for a, b in zip(grads.params, clipped.params):
            np.testing.assert_array_equal(a, b)

    def test_noise_free_hook_is_mean(self, rng):
        """Test that sigma=0 and a huge bound reduce the hook to the plain batch gradient"""
        grads = self._per_sample(rng)
        out = dp_gradient_hook(DpConfig(clip_bound=1e9, noise_scale=0.0))(grads)
        for a, b in zip(out.params, grads.summed().params):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_dp_train_matches_plain(self, tiny_model_config, tiny_splits):
        """Test that DP training without noise or clipping follows plain SGD"""
        schedule = SgdSchedule(epochs=2, batch_size=8, seed=5)
        plain, _ = train(HashModel.init(tiny_model_config), tiny_splits[0], schedule, PairwiseLossConfig())
        dp = dp_train(tiny_splits[0], schedule, DpConfig(clip_bound=1e9), tiny_model_config)
        for a, b in zip(plain.params(), dp.params()):
            np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-10)

    def test_noise_is_seeded(self, tiny_model_config, tiny_splits):
        """Test that noisy DP training is reproducible and differs from the noise-free run"""
        schedule = SgdSchedule(epochs=1, batch_size=8, seed=5)
        noisy = DpConfig(clip_bound=0.3, noise_scale=0.5, seed=2)
        a = dp_train(tiny_splits[0], schedule, noisy, tiny_model_config)
        b = dp_train(tiny_splits[0], schedule, noisy, tiny_model_config)
        c = dp_train(tiny_splits[0], schedule, DpConfig(clip_bound=0.3), tiny_model_config)
        np.testing.assert_array_equal(a.params()[0], b.params()[0])
        assert not np.array_equal(a.params()[0], c.params()[0])

    @pytest.mark.parametrize("kwargs", [{"clip_bound": 0.0}, {"noise_scale": -0.1}])
    def test_config_validation(self, kwargs):
        """Test that a non-positive bound or negative noise raises ArgumentError"""
        with pytest.raises(ArgumentError):
            DpConfig(**kwargs)

    def test_dp_csv(self, tmp_path):
        """Test the DP CSV header"""
        write_dp_csv([(0.0, 0.5, 0.1)], tmp_path / "dp.csv")
        with open(tmp_path / "dp.csv") as f:
            assert next(csv.reader(f)) == ["sigma", "map", "tmap"]


"""
Summary:
- Power iteration agrees with eigh; shifted clusters dominate the scores
- Spectral filtering removes the top-scoring ids and tallies confusion counts
- Pruning is cumulative and never touches the source model
- Clipping bounds per-sample norms; noise-free DP training follows plain SGD
"""
