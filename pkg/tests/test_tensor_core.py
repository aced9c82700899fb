"""
Unit tests for tensor_core.py

Tests cover:
- Affine and tanh forward passes
- Taped backward against finite differences
- Per-sample gradients
- Momentum SGD update rule
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core import ShapeError, ArgumentError, NumericError, StateError
from tensor_core import (
    AffineLayer, GradStore, SgdSchedule, Tape,
    affine_forward, tanh_forward, backward, numeric_gradient, sgd_step,
)


def _layers(rng, sizes):
    return [AffineLayer(rng.normal(0, 0.5, (o, i)), rng.normal(0, 0.1, o)) for i, o in zip(sizes[:-1], sizes[1:])]


def _forward(layers, x, tape=None):
    h = x
    for i, layer in enumerate(layers):
        h = tape.affine(h, layer, i) if tape is not None else affine_forward(h, layer)
        h = tape.tanh(h) if tape is not None else tanh_forward(h)
    return h


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


# ===== Tests: Forward ops =====

class TestForward:
    """Tests for affine_forward and tanh_forward"""

    def test_affine_single_and_batch(self, rng):
        """Test that a batch row equals the single-sample result"""
        layer = _layers(rng, [4, 3])[0]
        x = rng.normal(size=(5, 4))
        out = affine_forward(x, layer)
        assert out.shape == (5, 3)
        np.testing.assert_allclose(out[2], affine_forward(x[2], layer))

    def test_affine_computes_wx_plus_b(self):
        """Test the affine map on a hand case"""
        layer = AffineLayer(np.array([[1.0, 2.0], [0.0, -1.0]]), np.array([0.5, 0.0]))
        np.testing.assert_allclose(affine_forward(np.array([1.0, 1.0]), layer), [3.5, -1.0])

    def test_affine_shape_mismatch(self, rng):
        """Test that a wrong input width raises ShapeError"""
        layer = _layers(rng, [4, 3])[0]
        with pytest.raises(ShapeError):
            affine_forward(np.ones(5), layer)

    def test_bias_shape_validated(self):
        """Test that a bias of the wrong length is rejected"""
        with pytest.raises(ShapeError):
            AffineLayer(np.ones((3, 2)), np.ones(2))

    def test_tanh_open_interval(self):
        """Test that saturated inputs stay strictly inside (-1, 1)"""
        y = tanh_forward(np.array([50.0, -50.0, 0.0]))
        assert np.all(np.abs(y) < 1.0)
        assert y[2] == 0.0

    def test_tanh_rejects_nan(self):
        """Test that NaN input raises NumericError"""
        with pytest.raises(NumericError):
            tanh_forward(np.array([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
    def test_tanh_bounded(self, v):
        """Test that tanh output magnitude is below 1 for any finite input"""
        assert abs(float(tanh_forward(np.array([v]))[0])) < 1.0


# ===== Tests: Backward =====

class TestBackward:
    """Tests for taped reverse-mode gradients"""

    def test_input_gradient_matches_finite_differences(self, rng):
        """Test that the input gradient agrees with central differences"""
        layers = _layers(rng, [5, 4, 3])
        upstream = rng.normal(size=3)
        for _ in range(50):
            x = rng.normal(size=5)
            tape = Tape()
            _forward(layers, x, tape)
            grads = backward(tape, upstream)
            numeric = numeric_gradient(lambda z: float(upstream @ _forward(layers, z)), x, h=1e-5)
            assert _rel_err(grads.input, numeric) < 1e-4

    def test_weight_gradient_matches_finite_differences(self, rng):
        """Test that first-layer weight gradients agree with central differences"""
        layers = _layers(rng, [4, 3, 2])

        def loss_of_w0(w, x, upstream):
            patched = [AffineLayer(w, layers[0].bias), layers[1]]
            return float(np.sum(upstream * _forward(patched, x)))

        for _ in range(50):
            x = rng.normal(size=(6, 4))
            upstream = rng.normal(size=(6, 2))
            tape = Tape()
            _forward(layers, x, tape)
            grads = backward(tape, upstream)
            numeric = numeric_gradient(lambda w: loss_of_w0(w, x, upstream), layers[0].weights, h=1e-5)
            assert _rel_err(grads.params[0], numeric) < 1e-4

    def test_per_sample_sums_to_batch(self, rng):
        """Test that per-sample gradients sum to the batched gradient"""
        layers = _layers(rng, [4, 3, 2])
        x = rng.normal(size=(7, 4))
        upstream = rng.normal(size=(7, 2))
        tape = Tape()
        _forward(layers, x, tape)
        batch = backward(tape, upstream)
        per = backward(tape, upstream, per_sample=True)
        assert per.params[0].shape == (7, 3, 4)
        for b, p in zip(batch.params, per.summed().params):
            np.testing.assert_allclose(b, p, atol=1e-12)

    def test_per_sample_needs_batch(self, rng):
        """Test that per_sample on an unbatched pass raises ShapeError"""
        layers = _layers(rng, [3, 2])
        tape = Tape()
        _forward(layers, rng.normal(size=3), tape)
        with pytest.raises(ShapeError):
            backward(tape, np.ones(2), per_sample=True)

    def test_backward_before_forward(self):
        """Test that backward on an empty tape raises StateError"""
        with pytest.raises(StateError):
            backward(Tape(), np.ones(2))

    def test_upstream_shape_checked(self, rng):
        """Test that a mismatched upstream raises ShapeError"""
        layers = _layers(rng, [3, 2])
        tape = Tape()
        _forward(layers, rng.normal(size=3), tape)
        with pytest.raises(ShapeError):
            backward(tape, np.ones(3))


# ===== Tests: Gradient oracle =====

class TestNumericGradient:
    """Tests for numeric_gradient"""

    def test_quadratic(self):
        """Test central differences on sum(x^2)"""
        x = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(numeric_gradient(lambda z: float(np.sum(z * z)), x), 2 * x, rtol=1e-6)

    @pytest.mark.parametrize("h", [1e-7, 0.1])
    def test_step_range(self, h):
        """Test that steps outside [1e-6, 1e-2] are rejected"""
        with pytest.raises(ArgumentError):
            numeric_gradient(lambda z: 0.0, np.zeros(2), h=h)

    def test_non_finite_function(self):
        """Test that a non-finite function value raises NumericError"""
        with pytest.raises(NumericError):
            numeric_gradient(lambda z: float("inf"), np.zeros(2))


# ===== Tests: SGD =====

class TestSgd:
    """Tests for sgd_step and SgdSchedule"""

    def test_plain_step(self):
        """Test that momentum=0, weight_decay=0 gives p - lr*g"""
        schedule = SgdSchedule(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
        params = [np.array([1.0, 2.0])]
        new_p, new_v = sgd_step(params, GradStore([np.array([0.5, -1.0])]), schedule)
        np.testing.assert_allclose(new_p[0], [0.95, 2.1])
        np.testing.assert_allclose(new_v[0], [0.5, -1.0])
        np.testing.assert_array_equal(params[0], [1.0, 2.0])

    def test_momentum_and_decay(self):
        """Test v = m*v + g + wd*p and p = p - lr*v"""
        schedule = SgdSchedule(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
        params = [np.array([1.0])]
        new_p, new_v = sgd_step(params, GradStore([np.array([1.0])]), schedule, [np.array([2.0])])
        np.testing.assert_allclose(new_v[0], [0.9 * 2.0 + 1.0 + 0.01])
        np.testing.assert_allclose(new_p[0], [1.0 - 0.1 * 2.81])

    def test_incongruent_gradients(self):
        """Test that gradient/parameter shape mismatch raises ShapeError"""
        with pytest.raises(ShapeError):
            sgd_step([np.ones(2)], GradStore([np.ones(3)]), SgdSchedule())

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0},
        {"momentum": 1.0},
        {"weight_decay": -1.0},
        {"epochs": -1},
        {"batch_size": 0},
    ])
    def test_schedule_validation(self, kwargs):
        """Test that invalid schedule fields raise ArgumentError"""
        with pytest.raises(ArgumentError):
            SgdSchedule(**kwargs)

    def test_reference_defaults(self):
        """Test the reference optimizer settings"""
        s = SgdSchedule()
        assert (s.learning_rate, s.momentum, s.weight_decay, s.batch_size) == (0.01, 0.9, 0.0005, 24)


"""
Summary:
- Forward ops, including the open-interval tanh clamp
- Backward against finite differences for inputs and weights
- Per-sample gradients sum to the batch gradient
- SGD update rule and schedule validation
"""
