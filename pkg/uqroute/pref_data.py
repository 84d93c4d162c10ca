"""Synthetic Bradley-Terry preference data with controlled ID/OOD structure.

Items live in a latent space drawn from a fixed Gaussian mixture. OOD items
come from the same mixture shifted along a held-out direction that is
orthogonal to every component mean. A fixed random two-layer network r*
scores (context, item) and labels are Bernoulli(sigmoid(r*(A) - r*(B))).

Pair encodings are concat(context, item_A, item_B); label 1 means A wins.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from uqroute.utils.config import DataConfig
from uqroute.utils.errors import InvalidInputError
from uqroute.utils.models import (
    DatasetManifest,
    PreferenceRecord,
    PromptManifest,
    PromptRecord,
    Split,
)

logger = logging.getLogger(__name__)

TRUTH_HIDDEN = 16
COMPONENT_SPREAD = 2.0
COMPONENT_STD = 0.5
SWAP_SUFFIX = "~swap"

# Sizing presets for gen-data. helpsteer2-scale yields 6,766 train / 352 val pairs.
DATA_PRESETS: dict[str, dict] = {
    "helpsteer2-scale": {
        "n_prompts": 7118,
        "responses_per_prompt": 2,
        "ood_fraction": 0.0,
        "val_fraction": 352 / 7118,
    },
    "desk": {
        "n_prompts": 400,
        "responses_per_prompt": 4,
        "ood_fraction": 0.3,
        "ood_shift": 4.0,
        "val_fraction": 0.1,
    },
}


def apply_preset(config: DataConfig, preset: str) -> DataConfig:
    """Return a copy of ``config`` with a named sizing preset applied."""
    if preset not in DATA_PRESETS:
        raise InvalidInputError(f"unknown data preset {preset!r}; choose from {sorted(DATA_PRESETS)}")
    return config.model_copy(update=DATA_PRESETS[preset])


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


class GroundTruth:
    """Fixed random reward network r*(context, item) = scale * v^T tanh(A [c; y] + a).

    Rebuilt bit-exactly from (seed, context_dim, item_dim, reward_scale), so
    only the seed needs to travel in manifests.
    """

    def __init__(self, seed: int, context_dim: int, item_dim: int, reward_scale: float = 3.0) -> None:
        if context_dim < 0 or item_dim < 1:
            raise InvalidInputError(f"invalid dims context_dim={context_dim}, item_dim={item_dim}")
        self.seed = seed
        self.context_dim = context_dim
        self.item_dim = item_dim
        self.reward_scale = reward_scale
        rng = np.random.default_rng([seed, 1])
        in_dim = context_dim + item_dim
        self._a_weight = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(TRUTH_HIDDEN, in_dim))
        self._a_bias = rng.normal(0.0, 0.5, size=TRUTH_HIDDEN)
        self._v = rng.normal(0.0, 1.0 / np.sqrt(TRUTH_HIDDEN), size=TRUTH_HIDDEN)

    def reward(self, context: np.ndarray, items: np.ndarray) -> np.ndarray:
        """r* for one context and a stack of items (or a single item)."""
        ctx = np.asarray(context, dtype=np.float64).reshape(-1)
        arr = np.asarray(items, dtype=np.float64)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if ctx.shape != (self.context_dim,) or arr.shape[1] != self.item_dim:
            raise InvalidInputError(
                f"expected context of length {self.context_dim} and items of length {self.item_dim}"
            )
        inputs = np.hstack([np.broadcast_to(ctx, (len(arr), self.context_dim)), arr])
        out = self.reward_scale * (np.tanh(inputs @ self._a_weight.T + self._a_bias) @ self._v)
        return out[0] if single else out

    def delta(self, context: np.ndarray, item_a: np.ndarray, item_b: np.ndarray) -> float:
        """r*(x, A) - r*(x, B)."""
        return float(self.reward(context, item_a) - self.reward(context, item_b))

    def delta_from_pair(self, x_pair: np.ndarray) -> float:
        """Reward difference recovered from a concatenated pair encoding."""
        ctx, a, b = split_pair(x_pair, self.context_dim, self.item_dim)
        return self.delta(ctx, a, b)


class LatentDistribution:
    """Gaussian mixture over item latents plus the held-out OOD direction."""

    def __init__(self, seed: int, item_dim: int, n_components: int) -> None:
        rng = np.random.default_rng([seed, 2])
        direction = rng.normal(size=item_dim)
        self.direction = direction / np.linalg.norm(direction)
        means = rng.normal(0.0, COMPONENT_SPREAD, size=(n_components, item_dim))
        # Component means carry no mass along the held-out direction.
        self.means = means - np.outer(means @ self.direction, self.direction)
        self.item_dim = item_dim
        self.n_components = n_components

    def sample(self, rng: np.random.Generator, n: int, shift: float = 0.0) -> np.ndarray:
        """Draw n items; a nonzero shift moves them along the held-out direction."""
        components = rng.integers(self.n_components, size=n)
        noise = rng.normal(0.0, COMPONENT_STD, size=(n, self.item_dim))
        return self.means[components] + noise + shift * self.direction

    def distance_to_support(self, items: np.ndarray) -> np.ndarray:
        """Distance of each item to its nearest component mean."""
        diffs = np.atleast_2d(items)[:, None, :] - self.means[None, :, :]
        return np.linalg.norm(diffs, axis=2).min(axis=1)


# ---------------------------------------------------------------------------
# Pair encodings
# ---------------------------------------------------------------------------


def split_pair(x_pair, context_dim: int, item_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split concat(context, A, B) into its three parts."""
    arr = np.asarray(x_pair, dtype=np.float64)
    if arr.shape != (context_dim + 2 * item_dim,):
        raise InvalidInputError(
            f"pair encoding has length {arr.size}, expected {context_dim + 2 * item_dim}"
        )
    return arr[:context_dim], arr[context_dim:context_dim + item_dim], arr[context_dim + item_dim:]


def encode_pair(context, item_a, item_b) -> np.ndarray:
    return np.concatenate([np.asarray(context, dtype=np.float64), item_a, item_b])


def swap_pair(x_pair, context_dim: int, item_dim: int) -> np.ndarray:
    """Same pair with the A and B roles exchanged."""
    ctx, a, b = split_pair(x_pair, context_dim, item_dim)
    return encode_pair(ctx, b, a)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class PreferenceDataset:
    """Records plus the manifest that describes them."""

    records: list[PreferenceRecord]
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.records)

    def split(self, *splits: Split) -> "PreferenceDataset":
        """Subset restricted to the given splits, manifest updated."""
        wanted = set(splits)
        kept = [r for r in self.records if r.split in wanted]
        return PreferenceDataset(kept, _manifest_for(self.manifest, kept))

    def truth(self) -> GroundTruth:
        """Ground truth rebuilt from the manifest."""
        return GroundTruth(
            self.manifest.truth_seed,
            self.manifest.context_dim,
            self.manifest.item_dim,
            self.manifest.reward_scale,
        )


def split_counts(records: list[PreferenceRecord]) -> dict[str, int]:
    """Record count per split, with every split present."""
    sizes = {s.value: 0 for s in Split}
    for r in records:
        sizes[r.split.value] += 1
    return sizes


def _manifest_for(base: DatasetManifest, records: list[PreferenceRecord], **updates) -> DatasetManifest:
    return base.model_copy(update={"count": len(records), "split_sizes": split_counts(records), **updates})


@dataclass
class GeneratedData:
    """Output of one generator run."""

    dataset: PreferenceDataset
    truth: GroundTruth
    latents: LatentDistribution
    prompt_splits: dict[str, Split] = field(default_factory=dict)


def _validate_generation(n_prompts: int, responses_per_prompt: int, ood_fraction: float, ood_shift: float,
                         val_fraction: float, context_dim: int, item_dim: int, n_components: int) -> None:
    if n_prompts < 1:
        raise InvalidInputError("n_prompts must be at least 1")
    if responses_per_prompt < 2:
        raise InvalidInputError("responses_per_prompt must be at least 2")
    if not 0.0 <= ood_fraction <= 1.0:
        raise InvalidInputError(f"ood_fraction must be in [0, 1], got {ood_fraction}")
    if ood_shift < 0:
        raise InvalidInputError(f"ood_shift must be non-negative, got {ood_shift}")
    if not 0.0 <= val_fraction < 1.0:
        raise InvalidInputError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if context_dim < 0 or item_dim < 1 or n_components < 1:
        raise InvalidInputError("context_dim >= 0, item_dim >= 1 and n_components >= 1 are required")


def _assign_prompt_splits(rng: np.random.Generator, n_prompts: int, ood_fraction: float,
                          val_fraction: float) -> list[Split]:
    n_ood = int(round(ood_fraction * n_prompts))
    n_val = int(round(val_fraction * (n_prompts - n_ood)))
    order = rng.permutation(n_prompts)
    splits = [Split.ID_TRAIN] * n_prompts
    for rank, idx in enumerate(order):
        if rank < n_ood:
            splits[idx] = Split.OOD
        elif rank < n_ood + n_val:
            splits[idx] = Split.ID_VAL
    return splits


def sample_label(rng: np.random.Generator, delta: float) -> int:
    """BT label: 1 with probability sigmoid(delta)."""
    return int(rng.random() < expit(delta))


def assign_strengths(deltas: np.ndarray) -> np.ndarray:
    """Strength 1..3 by terciles of |delta| (1 = smallest third)."""
    n = len(deltas)
    if n == 0:
        return np.zeros(0, dtype=int)
    ranks = np.empty(n, dtype=int)
    ranks[np.argsort(np.abs(deltas), kind="stable")] = np.arange(n)
    return 1 + (3 * ranks) // n


def generate(
    n_prompts: int,
    responses_per_prompt: int,
    ood_fraction: float,
    ood_shift: float,
    seed: int,
    *,
    context_dim: int = 4,
    item_dim: int = 4,
    n_components: int = 3,
    reward_scale: float = 3.0,
    val_fraction: float = 0.1,
    truth_seed: Optional[int] = None,
    preset: Optional[str] = None,
) -> GeneratedData:
    """Generate a BT preference dataset with ID train/val and OOD splits.

    Every prompt contributes all K(K-1)/2 unordered response pairs, each with
    a random A/B orientation.

    Args:
        n_prompts: Number of contexts.
        responses_per_prompt: Responses K drawn per context.
        ood_fraction: Fraction of prompts whose items are shifted OOD.
        ood_shift: Shift magnitude along the held-out direction.
        seed: Sampling seed.
        truth_seed: Seed of r* and the latent mixture; defaults to ``seed``.

    Returns:
        The dataset (with true_delta filled in), r* and the latent mixture.
    """
    _validate_generation(n_prompts, responses_per_prompt, ood_fraction, ood_shift,
                         val_fraction, context_dim, item_dim, n_components)
    truth_seed = seed if truth_seed is None else truth_seed
    truth = GroundTruth(truth_seed, context_dim, item_dim, reward_scale)
    latents = LatentDistribution(truth_seed, item_dim, n_components)
    rng = np.random.default_rng(seed)

    prompt_splits = _assign_prompt_splits(rng, n_prompts, ood_fraction, val_fraction)
    pending: list[dict] = []
    splits_by_prompt: dict[str, Split] = {}
    for p, split in enumerate(prompt_splits):
        prompt_id = f"p{p:06d}"
        splits_by_prompt[prompt_id] = split
        context = rng.normal(size=context_dim)
        items = latents.sample(rng, responses_per_prompt, ood_shift if split is Split.OOD else 0.0)
        rewards = truth.reward(context, items)
        for i in range(responses_per_prompt):
            for j in range(i + 1, responses_per_prompt):
                a, b = (i, j) if rng.random() < 0.5 else (j, i)
                delta = float(rewards[a] - rewards[b])
                label = sample_label(rng, delta)
                pending.append({
                    "id": f"{prompt_id}-{a}-{b}",
                    "group_id": prompt_id,
                    "x_pair": encode_pair(context, items[a], items[b]).tolist(),
                    "label": label,
                    "split": split,
                    "true_delta": delta,
                })

    strengths = assign_strengths(np.array([r["true_delta"] for r in pending]))
    records = [PreferenceRecord(strength=int(s), **r) for r, s in zip(pending, strengths)]
    manifest = DatasetManifest(
        context_dim=context_dim,
        item_dim=item_dim,
        truth_seed=truth_seed,
        data_seed=seed,
        count=len(records),
        split_sizes=split_counts(records),
        preset=preset,
        ood_shift=ood_shift,
        n_components=n_components,
        reward_scale=reward_scale,
    )
    logger.info(
        "Generated %d pairs from %d prompts (K=%d): %s",
        len(records), n_prompts, responses_per_prompt, manifest.split_sizes,
    )
    return GeneratedData(PreferenceDataset(records, manifest), truth, latents, splits_by_prompt)


def generate_from_config(config: DataConfig, preset: Optional[str] = None) -> GeneratedData:
    """Run the generator with every knob taken from a DataConfig."""
    if preset:
        config = apply_preset(config, preset)
    return generate(
        config.n_prompts,
        config.responses_per_prompt,
        config.ood_fraction,
        config.ood_shift,
        config.seed,
        context_dim=config.context_dim,
        item_dim=config.item_dim,
        n_components=config.n_components,
        reward_scale=config.reward_scale,
        val_fraction=config.val_fraction,
        preset=preset,
    )


def augment_swap(dataset: PreferenceDataset) -> PreferenceDataset:
    """Append a swapped twin with flipped label after every record.

    Strengths are preserved and true_delta (if present) changes sign.
    """
    ctx_dim, item_dim = dataset.manifest.context_dim, dataset.manifest.item_dim
    out: list[PreferenceRecord] = []
    for record in dataset.records:
        out.append(record)
        out.append(record.model_copy(update={
            "id": record.id + SWAP_SUFFIX,
            "x_pair": swap_pair(record.x_pair, ctx_dim, item_dim).tolist(),
            "label": 1 - record.label,
            "true_delta": None if record.true_delta is None else -record.true_delta,
        }))
    return PreferenceDataset(out, _manifest_for(dataset.manifest, out))


def redact(dataset: PreferenceDataset) -> PreferenceDataset:
    """Strip the generator-only true_delta before a dataset reaches training."""
    out = [r.model_copy(update={"true_delta": None}) for r in dataset.records]
    return PreferenceDataset(out, _manifest_for(dataset.manifest, out, redacted=True))


# ---------------------------------------------------------------------------
# Prompt sets for the alignment loop
# ---------------------------------------------------------------------------


@dataclass
class PromptSet:
    """Contexts with fixed candidate pools, plus their manifest."""

    records: list[PromptRecord]
    manifest: PromptManifest

    def __len__(self) -> int:
        return len(self.records)

    def truth(self) -> GroundTruth:
        return GroundTruth(
            self.manifest.truth_seed,
            self.manifest.context_dim,
            self.manifest.item_dim,
            self.manifest.reward_scale,
        )


def generate_prompts(
    n_prompts: int,
    pool_size: int,
    ood_fraction: float,
    ood_shift: float,
    seed: int,
    *,
    context_dim: int = 4,
    item_dim: int = 4,
    n_components: int = 3,
    reward_scale: float = 3.0,
    truth_seed: Optional[int] = None,
) -> PromptSet:
    """Draw contexts, each with M candidate items (ID or OOD)."""
    _validate_generation(n_prompts, pool_size, ood_fraction, ood_shift, 0.0,
                         context_dim, item_dim, n_components)
    truth_seed = seed if truth_seed is None else truth_seed
    latents = LatentDistribution(truth_seed, item_dim, n_components)
    # Offset stream so prompts never replay the preference-pair draws.
    rng = np.random.default_rng([seed, 3])
    splits = _assign_prompt_splits(rng, n_prompts, ood_fraction, 0.0)
    records = []
    for p, split in enumerate(splits):
        context = rng.normal(size=context_dim)
        pool = latents.sample(rng, pool_size, ood_shift if split is Split.OOD else 0.0)
        records.append(PromptRecord(
            id=f"q{p:06d}", context=context.tolist(), candidates=pool.tolist(), split=split,
        ))
    manifest = PromptManifest(
        context_dim=context_dim,
        item_dim=item_dim,
        truth_seed=truth_seed,
        data_seed=seed,
        count=len(records),
        pool_size=pool_size,
        ood_shift=ood_shift,
        n_components=n_components,
        reward_scale=reward_scale,
    )
    logger.info("Generated %d alignment prompts with pools of %d candidates", len(records), pool_size)
    return PromptSet(records, manifest)


def prompts_from_config(config: DataConfig, truth_seed: Optional[int] = None) -> PromptSet:
    return generate_prompts(
        config.n_align_prompts,
        config.pool_size,
        config.ood_fraction,
        config.ood_shift,
        config.seed,
        context_dim=config.context_dim,
        item_dim=config.item_dim,
        n_components=config.n_components,
        reward_scale=config.reward_scale,
        truth_seed=truth_seed,
    )
