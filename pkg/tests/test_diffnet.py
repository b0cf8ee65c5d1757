"""Forward/backward/Adam checks against independent naive oracles."""

import numpy as np
import pytest

from fedclust import diffnet
from fedclust.diffnet import GradientSet, MlpSpec, init_model
from fedclust.errors import NumericError, ShapeError, StateError


def naive_forward(weights, biases, x, relu_on_last=False):
    """Loop-based reference forward pass, independent of the library path."""
    out = []
    for row in x:
        a = list(row)
        for li, (w, b) in enumerate(zip(weights, biases)):
            nxt = []
            for j in range(w.shape[1]):
                s = b[j]
                for i in range(w.shape[0]):
                    s += a[i] * w[i, j]
                if li < len(weights) - 1 and s < 0:
                    s = 0.0
                nxt.append(s)
            a = nxt
        out.append(a)
    return np.array(out)


def make_model(enc_dims=(4, 8, 3), pred_dims=(3, 5, 3), seed=0):
    return init_model(MlpSpec(enc_dims), MlpSpec(pred_dims), seed)


class TestForward:
    def test_zero_weights_give_zero_output(self):
        model = make_model()
        for w in model.encoder.weights:
            w[:] = 0.0
        x = np.random.default_rng(0).normal(size=(5, 4))
        assert np.all(diffnet.forward_encoder(model, x) == 0.0)

    def test_identity_single_layer(self):
        model = init_model(MlpSpec((3, 3)), MlpSpec((3, 3)), seed=0)
        model.encoder.weights[0][:] = np.eye(3)
        model.encoder.biases[0][:] = 0.0
        x = np.random.default_rng(1).normal(size=(6, 3))
        np.testing.assert_array_equal(diffnet.forward_encoder(model, x), x)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(42)
        model = make_model(seed=3)
        x = rng.normal(size=(7, 4))
        z = diffnet.forward_encoder(model, x)
        expected = naive_forward(model.encoder.weights, model.encoder.biases, x)
        np.testing.assert_allclose(z, expected, rtol=0, atol=1e-12)

        p = diffnet.forward_predictor(model, z)
        expected_p = naive_forward(model.predictor.weights, model.predictor.biases, z)
        np.testing.assert_allclose(p, expected_p, rtol=0, atol=1e-12)

    def test_predictor_zero_and_identity(self):
        model = make_model(pred_dims=(3, 3), seed=1)
        z = np.random.default_rng(2).normal(size=(4, 3))
        model.predictor.weights[0][:] = 0.0
        assert np.all(diffnet.forward_predictor(model, z) == 0.0)
        model.predictor.weights[0][:] = np.eye(3)
        model.predictor.biases[0][:] = 0.0
        np.testing.assert_array_equal(diffnet.forward_predictor(model, z), z)

    def test_dimension_mismatch(self):
        model = make_model()
        with pytest.raises(ShapeError):
            diffnet.forward_encoder(model, np.zeros((2, 5)))
        with pytest.raises(ShapeError):
            diffnet.forward_predictor(model, np.zeros((2, 4)))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        model = make_model()
        x = np.random.default_rng(0).normal(size=(5, 4))
        _, p, taps = diffnet.forward_full(model, x)
        grads = diffnet.backward(model, taps, np.zeros_like(p))
        assert all(np.all(g == 0.0) for g in grads.arrays)

    def test_linear_layer_sum_loss(self):
        # Loss = sum of outputs of a single linear predictor layer:
        # weight gradient is the column-sums of its inputs.
        model = make_model(pred_dims=(3, 3), seed=5)
        x = np.random.default_rng(3).normal(size=(6, 4))
        z, p, taps = diffnet.forward_full(model, x)
        grads = diffnet.backward(model, taps, np.ones_like(p))
        names = model.param_names()
        gw = grads.arrays[names.index("predictor.W0")]
        np.testing.assert_allclose(gw, z.sum(axis=0)[:, None] * np.ones((1, 3)), atol=1e-12)
        gb = grads.arrays[names.index("predictor.b0")]
        np.testing.assert_allclose(gb, np.full(3, 6.0), atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        model = make_model(seed=11)
        x = rng.normal(size=(4, 4))
        direction = rng.normal(size=(4, 3))  # fixed loss direction: L = <direction, p>

        def loss(m):
            zz = diffnet.forward_encoder(m, x)
            pp = diffnet.forward_predictor(m, zz)
            return float((direction * pp).sum())

        _, p, taps = diffnet.forward_full(model, x)
        grads = diffnet.backward(model, taps, direction)

        h = 1e-5
        for arr, g in zip(model.param_arrays(), grads.arrays):
            flat, gflat = arr.ravel(), g.ravel()
            for idx in range(flat.size):
                keep = flat[idx]
                flat[idx] = keep + h
                up = loss(model)
                flat[idx] = keep - h
                down = loss(model)
                flat[idx] = keep
                numeric = (up - down) / (2 * h)
                denom = max(abs(numeric), abs(gflat[idx]), 1e-3)
                assert abs(numeric - gflat[idx]) / denom < 1e-4

    def test_incongruent_taps_rejected(self):
        model = make_model()
        other = make_model(enc_dims=(5, 8, 3))
        x = np.random.default_rng(1).normal(size=(3, 5))
        _, p, taps = diffnet.forward_full(other, x)
        with pytest.raises(StateError):
            diffnet.backward(model, taps, np.zeros_like(p))


class TestAdam:
    def test_zero_gradients_keep_parameters(self):
        model = make_model()
        before = [a.copy() for a in model.param_arrays()]
        diffnet.adam_step(model, GradientSet.zeros_like(model), lr=0.1)
        assert model.adam_t == 1
        for a, b in zip(model.param_arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_first_step_is_scaled_sign_descent(self):
        model = make_model()
        grads = GradientSet.zeros_like(model)
        grads.arrays[0][0, 0] = 1.0
        start = model.param_arrays()[0][0, 0]
        diffnet.adam_step(model, grads, lr=0.1)
        moved = start - model.param_arrays()[0][0, 0]
        assert abs(moved - 0.1) < 1e-8

    def test_three_step_trajectory_matches_recurrence_table(self):
        # Scalar quadratic loss 0.5*theta^2 (gradient = theta) starting at 1.0,
        # lr=0.1 and default betas; expected values from an independently
        # executed high-precision Adam recurrence.
        expected = [0.90000000099999999, 0.80041222971233739, 0.70158627450441421]
        model = make_model()
        model.param_arrays()[0][0, 0] = 1.0
        for step in range(3):
            grads = GradientSet.zeros_like(model)
            grads.arrays[0][0, 0] = model.param_arrays()[0][0, 0]
            diffnet.adam_step(model, grads, lr=0.1)
            assert abs(model.param_arrays()[0][0, 0] - expected[step]) < 1e-10

    def test_nonfinite_gradient_names_layer(self):
        model = make_model()
        grads = GradientSet.zeros_like(model)
        grads.arrays[2][0, 0] = np.nan
        with pytest.raises(NumericError, match="encoder.W1"):
            diffnet.adam_step(model, grads, lr=0.1)

    def test_training_stays_finite(self):
        # 100 steps on a fixed random objective with lr <= 0.01.
        rng = np.random.default_rng(0)
        model = make_model()
        x = rng.normal(size=(8, 4))
        direction = rng.normal(size=(8, 3))
        for _ in range(100):
            _, p, taps = diffnet.forward_full(model, x)
            grads = diffnet.backward(model, taps, direction)
            diffnet.adam_step(model, grads, lr=0.01)
        assert all(np.isfinite(a).all() for a in model.param_arrays())


class TestInit:
    def test_deterministic_per_seed(self):
        a = make_model(seed=9)
        b = make_model(seed=9)
        for x, y in zip(a.param_arrays(), b.param_arrays()):
            np.testing.assert_array_equal(x, y)

    def test_different_seeds_differ(self):
        a = make_model(seed=1)
        b = make_model(seed=2)
        assert any(np.any(x != y) for x, y in zip(a.param_arrays(), b.param_arrays()))

    def test_param_count(self):
        spec = MlpSpec((4, 8, 2))
        assert spec.param_count == 4 * 8 + 8 + 8 * 2 + 2  # 58
        model = init_model(MlpSpec((4, 8, 2)), MlpSpec((2, 2)), seed=0)
        assert model.param_count == 58 + 2 * 2 + 2

    def test_weight_bound(self):
        model = make_model(seed=4)
        w = model.encoder.weights[0]
        bound = np.sqrt(6.0 / (4 + 8))
        assert np.all(np.abs(w) <= bound)
        assert np.all(model.encoder.biases[0] == 0.0)

    def test_incompatible_specs_rejected(self):
        with pytest.raises(ShapeError):
            init_model(MlpSpec((4, 8, 3)), MlpSpec((5, 5)), seed=0)
        with pytest.raises(ShapeError):
            init_model(MlpSpec((4, 8, 3)), MlpSpec((3, 4)), seed=0)

    def test_spec_validation(self):
        with pytest.raises(ShapeError):
            MlpSpec((4,))
        with pytest.raises(ShapeError):
            MlpSpec((4, 0, 2))


class TestDeterminism:
    def test_identical_schedules_are_bit_identical(self):
        def train():
            model = make_model(seed=42)
            rng = np.random.default_rng(11)
            for _ in range(10):
                x = rng.normal(size=(5, 4))
                _, p, taps = diffnet.forward_full(model, x)
                grads = diffnet.backward(model, taps, np.ones_like(p))
                diffnet.adam_step(model, grads, lr=0.005)
            return model

        a, b = train(), train()
        for x, y in zip(a.param_arrays(), b.param_arrays()):
            np.testing.assert_array_equal(x, y)
