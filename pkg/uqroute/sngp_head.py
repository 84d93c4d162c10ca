"""SNGP preference head: GP output layer, Laplace covariance and scaled prediction.

The head scores an ordered pair encoding x as the raw logit

    g = phi(h(x))^T beta

It is trained as a pairwise classifier with the strength-scaled BT loss on a
swap-augmented dataset. After training, one extra frozen pass accumulates the
posterior precision

    Sigma^-1 = tau I + sum_i s(g_i)(1 - s(g_i)) phi_i phi_i^T

and prediction returns u = sqrt(1 + lambda phi^T Sigma phi) and p = g / u.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from uqroute.encoder import Encoder, RandomFeatureMap
from uqroute.utils.config import EncoderConfig, FeatureMapConfig, GpHeadConfig
from uqroute.utils.errors import DivergenceError, InvalidInputError, SingularityError, StateError
from uqroute.utils.models import PairScore, PreferenceRecord

logger = logging.getLogger(__name__)

# Floor on s(g)(1 - s(g)) so precision updates stay finite for extreme logits.
MIN_CURVATURE = 1e-12

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class PosteriorCovariance:
    """Laplace posterior over beta: Sigma plus the Cholesky factor of its inverse."""

    sigma: np.ndarray
    precision_chol: np.ndarray
    n_samples: int


@dataclass
class TrainingHistory:
    """Loss trajectory of one training run."""

    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    steps: int = 0


class GpHead:
    """Encoder + frozen random features + trainable output weights beta."""

    def __init__(
        self,
        config: GpHeadConfig,
        encoder: Encoder,
        feature_map: RandomFeatureMap,
        beta: Optional[np.ndarray] = None,
        covariance: Optional[PosteriorCovariance] = None,
    ) -> None:
        if feature_map.input_dim != encoder.config.hidden_dim_out:
            raise InvalidInputError(
                f"feature map expects D_h={feature_map.input_dim}, encoder produces {encoder.config.hidden_dim_out}"
            )
        self.config = config
        self.encoder = encoder
        self.feature_map = feature_map
        self.beta = np.zeros(feature_map.num_features) if beta is None else np.array(beta, dtype=np.float64)
        if self.beta.shape != (feature_map.num_features,):
            raise InvalidInputError(f"beta must have length {feature_map.num_features}")
        self.covariance = covariance
        self.training_history: Optional[TrainingHistory] = None

    @classmethod
    def initialize(
        cls,
        encoder_config: EncoderConfig,
        feature_map_config: FeatureMapConfig,
        head_config: GpHeadConfig,
    ) -> "GpHead":
        """Fresh head with an initialized encoder and zero output weights."""
        encoder = Encoder.initialize(encoder_config)
        feature_map = RandomFeatureMap.from_config(feature_map_config, encoder_config.hidden_dim_out)
        return cls(head_config, encoder, feature_map)

    @property
    def input_dim(self) -> int:
        return self.encoder.config.input_dim

    @property
    def num_features(self) -> int:
        return self.feature_map.num_features

    @property
    def is_finalized(self) -> bool:
        return self.covariance is not None

    def features(self, x: np.ndarray) -> np.ndarray:
        """phi(h(x)) for a batch of pair encodings."""
        return self.feature_map.transform(self.encoder.forward(x))

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Raw logits g for a batch of pair encodings."""
        return self.features(x) @ self.beta


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def records_to_arrays(records: Sequence[PreferenceRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into (X, labels, strengths) arrays."""
    if not records:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0)
    x = np.asarray([r.x_pair for r in records], dtype=np.float64)
    z = np.asarray([r.label for r in records], dtype=np.float64)
    s = np.asarray([r.strength for r in records], dtype=np.float64)
    return x, z, s


def pair_loss(
    g: np.ndarray,
    labels: np.ndarray,
    strengths: np.ndarray,
    use_strength_scaling: bool = True,
) -> tuple[float, np.ndarray]:
    """Mean strength-scaled BT loss and its gradient w.r.t. the logits.

    Per record: -s * [z log s(g) + (1 - z) log s(-g)], where the second term is
    the swapped-order probability of the augmented twin.

    Returns:
        Tuple of (mean loss, dL/dg per record).
    """
    weights = strengths if use_strength_scaling else np.ones_like(strengths)
    per_record = weights * (labels * np.logaddexp(0.0, -g) + (1.0 - labels) * np.logaddexp(0.0, g))
    n = max(len(g), 1)
    grad = weights * (expit(g) - labels) / n
    return float(per_record.sum() / n), grad


def loss_and_gradients(
    head: GpHead,
    x: np.ndarray,
    labels: np.ndarray,
    strengths: np.ndarray,
) -> tuple[float, np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss with gradients for beta and every encoder layer.

    Returns:
        Tuple of (loss, dL/dbeta, per-layer (dL/dW, dL/db)).
    """
    hidden, cache = head.encoder.forward_with_cache(x)
    phi = head.feature_map.transform(hidden)
    g = phi @ head.beta
    loss, grad_g = pair_loss(g, labels, strengths, head.config.use_strength_scaling)

    grad_beta = phi.T @ grad_g
    # dg/dh = (dphi/d(Wh+b) * beta) @ W
    grad_hidden = (grad_g[:, None] * head.feature_map.phase_grad(hidden) * head.beta) @ head.feature_map.W
    encoder_grads = head.encoder.backward(cache, grad_hidden)
    return loss, grad_beta, encoder_grads


def dataset_loss(head: GpHead, records: Sequence[PreferenceRecord]) -> float:
    """Mean training loss of the head on a dataset."""
    x, z, s = records_to_arrays(records)
    if len(x) == 0:
        raise InvalidInputError("cannot evaluate the loss on an empty dataset")
    loss, _ = pair_loss(head.logits(x), z, s, head.config.use_strength_scaling)
    return loss


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class _Adam:
    """Adam state for a list of parameter arrays."""

    def __init__(self, shapes: list[tuple[int, ...]]) -> None:
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def direction(self, grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        b1, b2 = ADAM_BETAS
        out = []
        for i, grad in enumerate(grads):
            self.m[i] = b1 * self.m[i] + (1 - b1) * grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * grad * grad
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            out.append(m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        return out


def _learning_rate(config: GpHeadConfig, step: int, total_steps: int) -> float:
    if not config.cosine_decay or total_steps <= 1:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


def train(head: GpHead, data: Sequence[PreferenceRecord]) -> GpHead:
    """Fit beta and the encoder by mini-batch gradient descent.

    Logits are used unscaled during training; the random feature map stays
    frozen and every step re-projects the encoder onto its spectral bound.

    Args:
        head: Head to train in place.
        data: Swap-augmented preference records.

    Returns:
        The trained head, with ``training_history`` populated.

    Raises:
        InvalidInputError: If the dataset is empty or has the wrong width.
        DivergenceError: If the loss becomes non-finite.
    """
    if not data:
        raise InvalidInputError("training dataset is empty")
    x, z, s = records_to_arrays(data)
    if x.shape[1] != head.input_dim:
        raise InvalidInputError(f"records have x_pair length {x.shape[1]}, head expects {head.input_dim}")

    config = head.config
    rng = np.random.default_rng(config.seed)
    n = len(x)
    batches_per_epoch = int(np.ceil(n / config.batch_size))
    total_steps = batches_per_epoch * config.epochs

    initial_loss, _ = pair_loss(head.logits(x), z, s, config.use_strength_scaling)
    history = TrainingHistory(initial_loss=initial_loss)
    logger.info(
        "Training head on %d records: %d epochs x %d batches, lr=%g (%s), initial loss %.4f",
        n, config.epochs, batches_per_epoch, config.learning_rate, config.optimizer, initial_loss,
    )

    adam = None
    if config.optimizer == "adam":
        shapes = [head.beta.shape]
        for w, b in zip(head.encoder.weights, head.encoder.biases):
            shapes.extend([w.shape, b.shape])
        adam = _Adam(shapes)

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad_beta, encoder_grads = loss_and_gradients(head, x[idx], z[idx], s[idx])
            if not np.isfinite(loss):
                raise DivergenceError(
                    "training loss became non-finite",
                    {"epoch": epoch, "step": step, "beta_norm": float(np.linalg.norm(head.beta))},
                )
            lr = _learning_rate(config, step, total_steps)
            if adam is not None:
                flat = [grad_beta]
                for dw, db in encoder_grads:
                    flat.extend([dw, db])
                directions = adam.direction(flat)
                grad_beta = directions[0]
                encoder_grads = list(zip(directions[1::2], directions[2::2]))
            head.beta = head.beta - lr * grad_beta
            head.encoder.apply_update([(-lr * dw, -lr * db) for dw, db in encoder_grads])
            epoch_total += loss * len(idx)
            step += 1
        epoch_loss = epoch_total / n
        history.epoch_losses.append(epoch_loss)
        logger.info("Epoch %d/%d: mean loss %.4f", epoch + 1, config.epochs, epoch_loss)

    history.final_loss, _ = pair_loss(head.logits(x), z, s, config.use_strength_scaling)
    history.steps = step
    if not np.isfinite(history.final_loss):
        raise DivergenceError("final training loss is non-finite", {"steps": step})
    if history.final_loss > history.initial_loss:
        logger.warning(
            "Final training loss %.4f exceeds initial loss %.4f", history.final_loss, history.initial_loss
        )
    if not head.encoder.within_bound():
        logger.warning("Encoder layers exceed the spectral bound: %s", head.encoder.spectral_estimates())
    head.training_history = history
    # Weights changed; any earlier covariance is stale.
    head.covariance = None
    return head


# ---------------------------------------------------------------------------
# Posterior covariance
# ---------------------------------------------------------------------------


def accumulate_precision(
    precision: np.ndarray,
    phi: np.ndarray,
    logits: np.ndarray,
) -> np.ndarray:
    """Add sum_i s(g_i)(1 - s(g_i)) phi_i phi_i^T for one chunk, in place."""
    curvature = np.maximum(expit(logits) * expit(-logits), MIN_CURVATURE)
    precision += (phi * curvature[:, None]).T @ phi
    return precision


def covariance_from_precision(precision: np.ndarray, n_samples: int) -> PosteriorCovariance:
    """Invert a precision matrix through its Cholesky factor."""
    precision = 0.5 * (precision + precision.T)
    try:
        factor = cho_factor(precision, lower=True)
    except LinAlgError as exc:
        raise SingularityError(f"posterior precision is not positive definite: {exc}") from exc
    sigma = cho_solve(factor, np.eye(len(precision)))
    sigma = 0.5 * (sigma + sigma.T)
    return PosteriorCovariance(sigma=sigma, precision_chol=np.tril(factor[0]), n_samples=n_samples)


def compute_covariance(
    head: GpHead,
    data: Sequence[PreferenceRecord],
    batch_size: Optional[int] = None,
) -> PosteriorCovariance:
    """Frozen pass over the data accumulating the Laplace posterior precision.

    Records are streamed in dataset order; the logits used for the curvature
    weights are the raw g, since no covariance exists yet.

    Returns:
        The posterior covariance. The head is not modified.
    """
    chunk = batch_size or head.config.batch_size
    precision = head.config.tau * np.eye(head.num_features)
    x, _, _ = records_to_arrays(data)
    n = len(x)
    if n and x.shape[1] != head.input_dim:
        raise InvalidInputError(f"records have x_pair length {x.shape[1]}, head expects {head.input_dim}")
    for start in range(0, n, chunk):
        phi = head.features(x[start:start + chunk])
        accumulate_precision(precision, phi, phi @ head.beta)
    covariance = covariance_from_precision(precision, n)
    logger.info(
        "Posterior covariance from %d records (D_r=%d, tau=%g, max diag %.4g)",
        n, head.num_features, head.config.tau, float(np.max(np.diag(covariance.sigma))),
    )
    return covariance


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _predict_chunk(head: GpHead, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    phi = head.features(x)
    g = phi @ head.beta
    quad = np.maximum(np.sum((phi @ head.covariance.sigma) * phi, axis=1), 0.0)
    u = np.sqrt(1.0 + head.config.uncertainty_scale * quad)
    return g / u, u, g


def predict_batch(head: GpHead, x: np.ndarray, threads: int = 1, chunk_size: int = 1024) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scaled predictions for a batch of pair encodings.

    Chunks are scored on a thread pool and reassembled in input order.

    Returns:
        Arrays (p, u, g), each of length n.

    Raises:
        StateError: If the head has no covariance yet.
    """
    if head.covariance is None:
        raise StateError("prediction with uncertainty requires compute_covariance first")
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != head.input_dim:
        raise InvalidInputError(f"expected pair encodings of length {head.input_dim}, got shape {arr.shape}")
    if len(arr) == 0:
        empty = np.zeros(0)
        return empty, empty.copy(), empty.copy()
    chunks = [arr[i:i + chunk_size] for i in range(0, len(arr), chunk_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _predict_chunk(head, c), chunks))
    else:
        parts = [_predict_chunk(head, c) for c in chunks]
    p, u, g = (np.concatenate([part[k] for part in parts]) for k in range(3))
    return p, u, g


def predict_pair(head: GpHead, x_pair: np.ndarray) -> PairScore:
    """Uncertainty-scaled reward difference for one ordered pair."""
    arr = np.asarray(x_pair, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"expected one pair encoding, got shape {arr.shape}")
    p, u, g = predict_batch(head, arr[None, :])
    return PairScore(p=float(p[0]), u=float(u[0]), g=float(g[0]))
