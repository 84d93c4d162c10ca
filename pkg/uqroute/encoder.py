"""Spectrally-normalized feed-forward encoder and random Fourier feature map.

The encoder maps a pair encoding x to a hidden state h of length D_h; every
linear layer is kept under a spectral-norm bound so the map is Lipschitz and
distances between inputs survive into h. The random feature map turns h into

    phi(h) = sqrt(2 * sigma_k**2 / D_r) * cos(W h + b)

with W ~ N(0, 1) and b ~ Unif[0, 2*pi) frozen at construction, which
approximates a Gaussian kernel sigma_k**2 * exp(-|h1 - h2|**2 / 2).
"""

import logging
from typing import Optional

import numpy as np

from uqroute.utils.config import EncoderConfig, FeatureMapConfig
from uqroute.utils.errors import InvalidInputError
from uqroute.utils.models import Activation

logger = logging.getLogger(__name__)

# Relative slack allowed between the bound and a layer's estimated top singular value.
SPECTRAL_TOLERANCE = 0.01

# Cold-start power iterations used once when weights are first projected.
INIT_POWER_ITERATIONS = 100


# ---------------------------------------------------------------------------
# Spectral normalization
# ---------------------------------------------------------------------------


def _initial_left_vector(rows: int, seed: int = 0) -> np.ndarray:
    vec = np.random.default_rng(seed).standard_normal(rows)
    return vec / np.linalg.norm(vec)


def power_iteration(
    weight: np.ndarray,
    iterations: int,
    u: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Estimate the top singular value of a matrix.

    Args:
        weight: Matrix of shape (rows, cols).
        iterations: Number of power-iteration rounds (>= 1).
        u: Warm-start estimate of the top left singular vector.

    Returns:
        Tuple of (sigma estimate, updated left singular vector).
    """
    rows = weight.shape[0]
    if u is None or u.shape != (rows,):
        u = _initial_left_vector(rows)
    sigma = 0.0
    for _ in range(iterations):
        v = weight.T @ u
        v_norm = np.linalg.norm(v)
        if v_norm == 0.0:
            return 0.0, u
        v /= v_norm
        wv = weight @ v
        u_norm = np.linalg.norm(wv)
        if u_norm == 0.0:
            return 0.0, u
        u = wv / u_norm
        sigma = float(u @ weight @ v)
    return sigma, u


def spectral_normalize(
    weight_matrix: np.ndarray,
    bound: float,
    iterations: int,
    u: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Rescale a matrix so its top singular value is at most ``bound``.

    The returned matrix is ``weight_matrix * min(1, bound / sigma_max)`` where
    sigma_max is the power-iteration estimate.

    Raises:
        InvalidInputError: On NaN/Inf entries, bound <= 0 or iterations < 1.
    """
    normalized, _, _ = _spectral_normalize_with_state(weight_matrix, bound, iterations, u)
    return normalized


def _spectral_normalize_with_state(
    weight_matrix: np.ndarray,
    bound: float,
    iterations: int,
    u: Optional[np.ndarray],
) -> tuple[np.ndarray, float, np.ndarray]:
    weight = np.asarray(weight_matrix, dtype=np.float64)
    if weight.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {weight.shape}")
    if not np.all(np.isfinite(weight)):
        raise InvalidInputError("weight matrix contains NaN or Inf")
    if bound <= 0:
        raise InvalidInputError(f"spectral bound must be positive, got {bound}")
    if iterations < 1:
        raise InvalidInputError(f"power iterations must be >= 1, got {iterations}")

    sigma, u = power_iteration(weight, iterations, u)
    scale = 1.0 if sigma <= bound else bound / sigma
    return weight * scale, sigma, u


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def _activate(pre: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(pre)
    return np.maximum(pre, 0.0)


def _activation_grad(pre: np.ndarray, post: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return 1.0 - post * post
    return (pre > 0.0).astype(np.float64)


class Encoder:
    """Feed-forward encoder whose layers all satisfy the spectral bound.

    Layer l computes ``act(W_l a_{l-1} + b_l)``; the activation is applied after
    the last layer as well, so the output is bounded for tanh.
    """

    def __init__(
        self,
        config: EncoderConfig,
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        left_vectors: Optional[list[np.ndarray]] = None,
    ) -> None:
        dims = [config.input_dim, *config.hidden_dims, config.hidden_dim_out]
        if len(weights) != len(dims) - 1 or len(biases) != len(weights):
            raise InvalidInputError(
                f"encoder needs {len(dims) - 1} layers, got {len(weights)} weights / {len(biases)} biases"
            )
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise InvalidInputError(
                    f"layer {i} expects W {(dims[i + 1], dims[i])} and b {(dims[i + 1],)}, "
                    f"got {w.shape} and {b.shape}"
                )
        self.config = config
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        if left_vectors is None:
            left_vectors = [_initial_left_vector(w.shape[0], config.seed + i) for i, w in enumerate(self.weights)]
        elif [u.shape for u in left_vectors] != [(w.shape[0],) for w in self.weights]:
            raise InvalidInputError("power-iteration vectors do not match the encoder layers")
        self._left_vectors = [np.array(u, dtype=np.float64) for u in left_vectors]

    @classmethod
    def initialize(cls, config: EncoderConfig) -> "Encoder":
        """Glorot-normal weights, zero biases, projected onto the spectral bound."""
        rng = np.random.default_rng(config.seed)
        dims = [config.input_dim, *config.hidden_dims, config.hidden_dim_out]
        weights = []
        biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.standard_normal((fan_out, fan_in)) * std)
            biases.append(np.zeros(fan_out))
        encoder = cls(config, weights, biases)
        encoder.renormalize(iterations=INIT_POWER_ITERATIONS)
        return encoder

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def lipschitz_bound(self) -> float:
        """Product of the per-layer spectral bounds (activations are 1-Lipschitz)."""
        return float(self.config.spectral_bound ** self.num_layers)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.config.input_dim:
            raise InvalidInputError(
                f"expected inputs of length {self.config.input_dim}, got shape {np.shape(x)}"
            )
        return arr

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Encode a batch of shape (n, input_dim) to hidden states (n, D_h)."""
        hidden, _ = self.forward_with_cache(x)
        return hidden

    def forward_with_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray, np.ndarray]]]:
        """Forward pass that keeps (input, pre-activation, output) per layer."""
        act = self._check_input(x)
        cache = []
        for w, b in zip(self.weights, self.biases):
            pre = act @ w.T + b
            post = _activate(pre, self.config.activation)
            cache.append((act, pre, post))
            act = post
        return act, cache

    def backward(
        self,
        cache: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
        grad_hidden: np.ndarray,
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        """Backpropagate dL/dh through the layers.

        Returns:
            Per-layer (dL/dW, dL/db), in layer order.
        """
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        delta = grad_hidden
        for layer in reversed(range(self.num_layers)):
            inputs, pre, post = cache[layer]
            delta = delta * _activation_grad(pre, post, self.config.activation)
            grads.append((delta.T @ inputs, delta.sum(axis=0)))
            delta = delta @ self.weights[layer]
        grads.reverse()
        return grads

    def apply_update(self, updates: list[tuple[np.ndarray, np.ndarray]]) -> None:
        """Add per-layer (dW, db) updates, then re-project onto the bound."""
        for layer, (dw, db) in enumerate(updates):
            self.weights[layer] += dw
            self.biases[layer] += db
        self.renormalize()

    def renormalize(self, iterations: Optional[int] = None) -> list[float]:
        """Project every layer onto the spectral bound with warm-started power iteration.

        Returns:
            Per-layer sigma estimates before rescaling.
        """
        sigmas = []
        for layer, w in enumerate(self.weights):
            normalized, sigma, u = _spectral_normalize_with_state(
                w,
                self.config.spectral_bound,
                iterations or self.config.power_iterations,
                self._left_vectors[layer],
            )
            self.weights[layer] = normalized
            self._left_vectors[layer] = u
            sigmas.append(sigma)
        return sigmas

    @property
    def left_vectors(self) -> list[np.ndarray]:
        """Warm-start vectors carried between renormalizations, one per layer."""
        return [u.copy() for u in self._left_vectors]

    def spectral_estimates(self) -> list[float]:
        """Current power-iteration estimates of each layer's top singular value."""
        return [
            power_iteration(w, self.config.power_iterations, u.copy())[0]
            for w, u in zip(self.weights, self._left_vectors)
        ]

    def within_bound(self) -> bool:
        """True when every layer estimate is within SPECTRAL_TOLERANCE of the bound."""
        limit = self.config.spectral_bound * (1.0 + SPECTRAL_TOLERANCE)
        return all(sigma <= limit for sigma in self.spectral_estimates())


def encode(config: EncoderConfig, encoder: Encoder, x: np.ndarray) -> np.ndarray:
    """Encode one pair encoding to its hidden state of length D_h."""
    if config.input_dim != encoder.config.input_dim:
        raise InvalidInputError("config does not match encoder parameters")
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"expected a single feature vector, got shape {arr.shape}")
    return encoder.forward(arr)[0]


# ---------------------------------------------------------------------------
# Random Fourier features
# ---------------------------------------------------------------------------


class RandomFeatureMap:
    """Frozen random projection (W, b) with amplitude sigma_k."""

    def __init__(self, W: np.ndarray, b: np.ndarray, sigma_k: float, seed: int) -> None:
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise InvalidInputError(f"incompatible W {W.shape} and b {b.shape}")
        if sigma_k <= 0:
            raise InvalidInputError(f"sigma_k must be positive, got {sigma_k}")
        self._W = np.array(W, dtype=np.float64)
        self._b = np.array(b, dtype=np.float64)
        self._W.flags.writeable = False
        self._b.flags.writeable = False
        self.sigma_k = float(sigma_k)
        self.seed = int(seed)

    @classmethod
    def from_seed(cls, num_features: int, input_dim: int, sigma_k: float = 1.0, seed: int = 0) -> "RandomFeatureMap":
        """Draw W ~ N(0, 1) of shape (D_r, D_h) and b ~ Unif[0, 2*pi)."""
        if num_features < 1 or input_dim < 1:
            raise InvalidInputError("feature map dims must be positive")
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((num_features, input_dim))
        b = rng.uniform(0.0, 2.0 * np.pi, size=num_features)
        return cls(W, b, sigma_k, seed)

    @classmethod
    def from_config(cls, config: FeatureMapConfig, input_dim: int) -> "RandomFeatureMap":
        return cls.from_seed(config.num_features, input_dim, config.sigma_k, config.seed)

    @property
    def W(self) -> np.ndarray:
        return self._W

    @property
    def b(self) -> np.ndarray:
        return self._b

    @property
    def num_features(self) -> int:
        return self._W.shape[0]

    @property
    def input_dim(self) -> int:
        return self._W.shape[1]

    @property
    def amplitude(self) -> float:
        """sqrt(2 sigma_k^2 / D_r): the largest absolute feature value."""
        return float(np.sqrt(2.0 * self.sigma_k ** 2 / self.num_features))

    def transform(self, hidden: np.ndarray) -> np.ndarray:
        """Features for a batch (n, D_h) -> (n, D_r), or a single vector."""
        arr = np.asarray(hidden, dtype=np.float64)
        if arr.shape[-1] != self.input_dim or arr.ndim not in (1, 2):
            raise InvalidInputError(
                f"expected hidden states of length {self.input_dim}, got shape {arr.shape}"
            )
        return self.amplitude * np.cos(arr @ self._W.T + self._b)

    def phase_grad(self, hidden: np.ndarray) -> np.ndarray:
        """d phi / d(Wh + b) for a batch: -amplitude * sin(Wh + b)."""
        return -self.amplitude * np.sin(hidden @ self._W.T + self._b)


def random_features(feature_map: RandomFeatureMap, h: np.ndarray) -> np.ndarray:
    """phi(h) for a single hidden state of length D_h."""
    arr = np.asarray(h, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"expected a single hidden state, got shape {arr.shape}")
    return feature_map.transform(arr)


def gaussian_kernel(h1: np.ndarray, h2: np.ndarray, sigma_k: float = 1.0) -> float:
    """Kernel the feature map approximates: sigma_k^2 * exp(-|h1 - h2|^2 / 2)."""
    diff = np.asarray(h1, dtype=np.float64) - np.asarray(h2, dtype=np.float64)
    return float(sigma_k ** 2 * np.exp(-0.5 * diff @ diff))
