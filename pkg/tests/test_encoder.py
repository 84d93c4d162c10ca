"""Tests for the spectrally-normalized encoder and random Fourier features."""

import numpy as np
import pytest

from uqroute.encoder import (
    INIT_POWER_ITERATIONS,
    Encoder,
    RandomFeatureMap,
    encode,
    gaussian_kernel,
    power_iteration,
    random_features,
    spectral_normalize,
)
from uqroute.utils.config import EncoderConfig
from uqroute.utils.errors import InvalidInputError


# ── Spectral normalization ──────────────────────────────────────────────────


class TestSpectralNormalize:
    def test_diagonal_rescaled_uniformly(self):
        out = spectral_normalize(np.diag([3.0, 0.5]), 1.0, 50)
        np.testing.assert_allclose(out, np.diag([1.0, 1.0 / 6.0]), rtol=1e-9)

    def test_identity_unchanged(self):
        out = spectral_normalize(np.eye(4), 1.0, 5)
        np.testing.assert_allclose(out, np.eye(4), rtol=1e-12)

    def test_never_scales_up(self):
        weight = 0.5 * np.eye(3)
        np.testing.assert_array_equal(spectral_normalize(weight, 1.0, 5), weight)

    def test_random_matrix_against_svd(self):
        weight = np.random.default_rng(42).standard_normal((8, 8))
        out = spectral_normalize(weight, 1.0, INIT_POWER_ITERATIONS)
        assert np.linalg.svd(out, compute_uv=False)[0] <= 1.01

    def test_scale_is_uniform(self):
        weight = np.random.default_rng(1).standard_normal((5, 3))
        out = spectral_normalize(weight, 0.5, 20)
        ratio = out / weight
        np.testing.assert_allclose(ratio, ratio[0, 0])

    def test_power_iteration_zero_matrix(self):
        sigma, _ = power_iteration(np.zeros((3, 3)), 5)
        assert sigma == 0.0

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_rejected(self, bad):
        weight = np.eye(2)
        weight[0, 1] = bad
        with pytest.raises(InvalidInputError):
            spectral_normalize(weight, 1.0, 5)

    def test_bad_bound(self):
        with pytest.raises(InvalidInputError):
            spectral_normalize(np.eye(2), 0.0, 5)

    def test_bad_iterations(self):
        with pytest.raises(InvalidInputError):
            spectral_normalize(np.eye(2), 1.0, 0)


# ── Encoder ─────────────────────────────────────────────────────────────────


class TestEncoder:
    def test_zero_weights_give_zero(self):
        config = EncoderConfig(input_dim=3, hidden_dims=[4], hidden_dim_out=2)
        encoder = Encoder(config, [np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
        np.testing.assert_array_equal(encode(config, encoder, np.array([1.0, -2.0, 3.0])), np.zeros(2))

    def test_identity_layer_is_tanh(self):
        config = EncoderConfig(input_dim=3, hidden_dims=[], hidden_dim_out=3)
        encoder = Encoder(config, [np.eye(3)], [np.zeros(3)])
        x = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(encode(config, encoder, x), np.tanh(x))

    def test_output_length(self, small_encoder_config):
        encoder = Encoder.initialize(small_encoder_config)
        h = encode(small_encoder_config, encoder, np.ones(small_encoder_config.input_dim))
        assert h.shape == (small_encoder_config.hidden_dim_out,)

    def test_deterministic_initialization(self, small_encoder_config):
        a = Encoder.initialize(small_encoder_config)
        b = Encoder.initialize(small_encoder_config)
        x = np.random.default_rng(0).standard_normal((5, small_encoder_config.input_dim))
        np.testing.assert_array_equal(a.forward(x), b.forward(x))

    def test_lipschitz_bound_on_random_inputs(self, small_encoder_config):
        encoder = Encoder.initialize(small_encoder_config)
        rng = np.random.default_rng(9)
        x1 = rng.standard_normal((200, small_encoder_config.input_dim)) * 2.0
        x2 = x1 + rng.standard_normal(x1.shape) * 0.5
        out = np.linalg.norm(encoder.forward(x1) - encoder.forward(x2), axis=1)
        bound = encoder.lipschitz_bound * 1.01 ** encoder.num_layers
        assert np.all(out <= bound * np.linalg.norm(x1 - x2, axis=1) + 1e-12)

    def test_initialized_layers_within_bound(self, small_encoder_config):
        encoder = Encoder.initialize(small_encoder_config)
        for w in encoder.weights:
            assert np.linalg.svd(w, compute_uv=False)[0] <= small_encoder_config.spectral_bound * 1.01

    def test_update_keeps_bound(self):
        config = EncoderConfig(input_dim=6, hidden_dims=[10], hidden_dim_out=4, power_iterations=30)
        encoder = Encoder.initialize(config)
        rng = np.random.default_rng(4)
        for _ in range(5):
            encoder.apply_update([(rng.standard_normal(w.shape), rng.standard_normal(b.shape))
                                  for w, b in zip(encoder.weights, encoder.biases)])
            assert encoder.within_bound()
            assert all(s <= config.spectral_bound * 1.01 for s in encoder.spectral_estimates())

    def test_dimension_mismatch(self, small_encoder_config):
        encoder = Encoder.initialize(small_encoder_config)
        with pytest.raises(InvalidInputError):
            encode(small_encoder_config, encoder, np.ones(small_encoder_config.input_dim + 1))

    def test_wrong_layer_shapes(self):
        config = EncoderConfig(input_dim=3, hidden_dims=[], hidden_dim_out=2)
        with pytest.raises(InvalidInputError):
            Encoder(config, [np.zeros((3, 3))], [np.zeros(3)])


# ── Random features ─────────────────────────────────────────────────────────


class TestRandomFeatureMap:
    def test_zero_hidden_state(self):
        fm = RandomFeatureMap.from_seed(32, 4, sigma_k=1.5, seed=2)
        np.testing.assert_allclose(random_features(fm, np.zeros(4)), fm.amplitude * np.cos(fm.b))

    def test_entries_bounded(self):
        fm = RandomFeatureMap.from_seed(128, 5, sigma_k=2.0, seed=0)
        h = np.random.default_rng(1).standard_normal((50, 5)) * 3.0
        phi = fm.transform(h)
        assert np.all(np.abs(phi) <= fm.amplitude + 1e-15)
        assert np.all(np.sum(phi ** 2, axis=1) <= 2.0 * fm.sigma_k ** 2 + 1e-12)

    def test_same_seed_reproduces(self):
        a = RandomFeatureMap.from_seed(64, 3, seed=8)
        b = RandomFeatureMap.from_seed(64, 3, seed=8)
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.b, b.b)

    def test_parameters_read_only(self):
        fm = RandomFeatureMap.from_seed(8, 2, seed=0)
        with pytest.raises(ValueError):
            fm.W[0, 0] = 1.0
        with pytest.raises(ValueError):
            fm.b[0] = 1.0

    def test_phase_range(self):
        fm = RandomFeatureMap.from_seed(1000, 2, seed=3)
        assert fm.b.min() >= 0.0
        assert fm.b.max() < 2.0 * np.pi

    def test_dimension_mismatch(self):
        fm = RandomFeatureMap.from_seed(8, 3, seed=0)
        with pytest.raises(InvalidInputError):
            random_features(fm, np.zeros(4))

    def test_kernel_approximation(self):
        rng = np.random.default_rng(2026)
        n_seeds, d_h = 100, 4
        outliers = 0
        for _ in range(20):
            h1 = rng.standard_normal(d_h)
            direction = rng.standard_normal(d_h)
            h2 = h1 + direction / np.linalg.norm(direction) * rng.uniform(0.0, 4.0)
            samples = np.array([
                random_features(fm, h1) @ random_features(fm, h2)
                for fm in (RandomFeatureMap.from_seed(512, d_h, seed=s) for s in range(n_seeds))
            ])
            se = samples.std(ddof=1) / np.sqrt(n_seeds)
            error = abs(samples.mean() - gaussian_kernel(h1, h2))
            assert error < 4.0 * se + 1e-12
            outliers += error >= 3.0 * se
        assert outliers <= 1
