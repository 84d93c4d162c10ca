"""Tests for the synthetic Bradley-Terry data generator."""

import numpy as np
import pytest
from scipy.special import expit

from uqroute.pref_data import (
    SWAP_SUFFIX,
    GroundTruth,
    LatentDistribution,
    PreferenceDataset,
    apply_preset,
    assign_strengths,
    augment_swap,
    generate,
    generate_from_config,
    generate_prompts,
    redact,
    sample_label,
    split_pair,
    swap_pair,
)
from uqroute.utils.config import DataConfig
from uqroute.utils.errors import InvalidInputError
from uqroute.utils.models import Split

from .conftest import CONTEXT_DIM, INPUT_DIM, ITEM_DIM


# ── Generation ──────────────────────────────────────────────────────────────


class TestGenerate:
    def test_deterministic(self):
        a = generate(20, 3, 0.2, 3.0, seed=5).dataset
        b = generate(20, 3, 0.2, 3.0, seed=5).dataset
        assert [r.model_dump() for r in a.records] == [r.model_dump() for r in b.records]

    def test_different_seed_differs(self):
        a = generate(20, 3, 0.2, 3.0, seed=5).dataset
        b = generate(20, 3, 0.2, 3.0, seed=6).dataset
        assert a.records[0].x_pair != b.records[0].x_pair

    def test_pair_count_and_width(self, dataset):
        assert len(dataset) == 80 * 6
        assert dataset.manifest.count == len(dataset)
        assert all(len(r.x_pair) == INPUT_DIM for r in dataset.records)
        assert dataset.manifest.input_dim == INPUT_DIM

    def test_split_sizes(self, dataset):
        # 20 OOD prompts, then round(0.1 * 60) = 6 validation prompts.
        assert dataset.manifest.split_sizes == {"id_train": 54 * 6, "id_val": 6 * 6, "ood": 20 * 6}

    def test_groups_share_split(self, dataset):
        by_group = {}
        for record in dataset.records:
            by_group.setdefault(record.group_id, set()).add(record.split)
        assert all(len(splits) == 1 for splits in by_group.values())

    def test_true_delta_matches_truth(self, generated):
        truth = generated.truth
        for record in generated.dataset.records[:30]:
            assert truth.delta_from_pair(record.x_pair) == pytest.approx(record.true_delta, abs=1e-12)

    def test_truth_rebuilt_from_manifest(self, dataset, generated):
        rebuilt = dataset.truth()
        x = np.array(dataset.records[0].x_pair)
        assert rebuilt.delta_from_pair(x) == generated.truth.delta_from_pair(x)

    def test_truth_seed_decoupled(self):
        a = generate(10, 2, 0.0, 0.0, seed=1, truth_seed=9)
        b = generate(10, 2, 0.0, 0.0, seed=2, truth_seed=9)
        x = np.ones(CONTEXT_DIM + 2 * ITEM_DIM)
        assert a.truth.delta_from_pair(x) == b.truth.delta_from_pair(x)
        assert a.dataset.manifest.data_seed == 1

    def test_label_calibration(self):
        data = generate(2000, 4, 0.0, 0.0, seed=21).dataset
        deltas = np.array([r.true_delta for r in data.records])
        labels = np.array([r.label for r in data.records])
        edges = np.quantile(deltas, np.linspace(0.0, 1.0, 7))
        bins = np.clip(np.searchsorted(edges, deltas, side="right") - 1, 0, 5)
        for b in range(6):
            mask = bins == b
            probs = expit(deltas[mask])
            se = np.sqrt(np.sum(probs * (1 - probs))) / mask.sum()
            assert abs(labels[mask].mean() - probs.mean()) < 3.0 * se

    def test_strength_terciles(self, dataset):
        strengths = np.array([r.strength for r in dataset.records])
        deltas = np.abs([r.true_delta for r in dataset.records])
        n = len(strengths)
        for s in (1, 2, 3):
            assert abs(np.sum(strengths == s) - n / 3) <= 1
        assert deltas[strengths == 1].max() <= deltas[strengths == 2].min()
        assert deltas[strengths == 2].max() <= deltas[strengths == 3].min()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_prompts": 0},
            {"responses_per_prompt": 1},
            {"ood_fraction": 1.5},
            {"ood_shift": -1.0},
            {"val_fraction": 1.0},
        ],
    )
    def test_invalid_parameters(self, kwargs):
        params = {"n_prompts": 5, "responses_per_prompt": 2, "ood_fraction": 0.0, "ood_shift": 0.0, "seed": 0}
        params.update(kwargs)
        with pytest.raises(InvalidInputError):
            generate(**params)


class TestSampleLabel:
    def test_zero_delta_is_fair(self):
        rng = np.random.default_rng(0)
        rate = np.mean([sample_label(rng, 0.0) for _ in range(10_000)])
        assert abs(rate - 0.5) < 0.015

    def test_large_delta_almost_always_wins(self):
        rng = np.random.default_rng(1)
        rate = np.mean([sample_label(rng, 6.0) for _ in range(10_000)])
        assert rate >= 0.99


class TestAssignStrengths:
    def test_empty(self):
        assert len(assign_strengths(np.zeros(0))) == 0

    def test_three_values(self):
        np.testing.assert_array_equal(assign_strengths(np.array([-3.0, 0.1, 1.0])), [3, 1, 2])

    @pytest.mark.parametrize("n", [1, 2, 4, 10, 11])
    def test_near_equal_thirds(self, n):
        strengths = assign_strengths(np.arange(n, dtype=float))
        for s in (1, 2, 3):
            assert abs(np.sum(strengths == s) - n / 3) <= 1


# ── Latents and truth ───────────────────────────────────────────────────────


class TestLatents:
    def test_ood_distance_increases_with_shift(self):
        latents = LatentDistribution(seed=4, item_dim=ITEM_DIM, n_components=3)
        distances = [
            latents.distance_to_support(latents.sample(np.random.default_rng(0), 2000, shift)).mean()
            for shift in (0.0, 1.0, 2.0, 4.0, 8.0)
        ]
        assert all(b > a for a, b in zip(distances, distances[1:]))

    def test_means_orthogonal_to_direction(self):
        latents = LatentDistribution(seed=4, item_dim=ITEM_DIM, n_components=3)
        np.testing.assert_allclose(latents.means @ latents.direction, 0.0, atol=1e-12)
        assert np.linalg.norm(latents.direction) == pytest.approx(1.0)


class TestGroundTruth:
    def test_delta_antisymmetric(self):
        truth = GroundTruth(3, CONTEXT_DIM, ITEM_DIM)
        rng = np.random.default_rng(2)
        ctx, a, b = rng.standard_normal(CONTEXT_DIM), rng.standard_normal(ITEM_DIM), rng.standard_normal(ITEM_DIM)
        assert truth.delta(ctx, a, b) == -truth.delta(ctx, b, a)
        assert truth.delta(ctx, a, a) == 0.0

    def test_batch_matches_single(self):
        truth = GroundTruth(3, CONTEXT_DIM, ITEM_DIM)
        items = np.random.default_rng(2).standard_normal((5, ITEM_DIM))
        ctx = np.zeros(CONTEXT_DIM)
        batch = truth.reward(ctx, items)
        assert batch[2] == pytest.approx(truth.reward(ctx, items[2]))

    def test_wrong_dims(self):
        truth = GroundTruth(3, CONTEXT_DIM, ITEM_DIM)
        with pytest.raises(InvalidInputError):
            truth.reward(np.zeros(CONTEXT_DIM + 1), np.zeros(ITEM_DIM))


class TestPairEncoding:
    def test_swap_exchanges_items(self):
        x = np.arange(INPUT_DIM, dtype=float)
        ctx, a, b = split_pair(swap_pair(x, CONTEXT_DIM, ITEM_DIM), CONTEXT_DIM, ITEM_DIM)
        np.testing.assert_array_equal(ctx, x[:CONTEXT_DIM])
        np.testing.assert_array_equal(a, x[CONTEXT_DIM + ITEM_DIM:])
        np.testing.assert_array_equal(b, x[CONTEXT_DIM:CONTEXT_DIM + ITEM_DIM])

    def test_wrong_length(self):
        with pytest.raises(InvalidInputError):
            split_pair(np.zeros(INPUT_DIM - 1), CONTEXT_DIM, ITEM_DIM)


# ── Augmentation and redaction ──────────────────────────────────────────────


class TestAugmentSwap:
    def test_empty(self, dataset):
        empty = PreferenceDataset([], dataset.manifest.model_copy(update={"count": 0}))
        assert len(augment_swap(empty)) == 0

    def test_single_record(self, dataset):
        single = dataset.split(Split.ID_TRAIN)
        single = PreferenceDataset(single.records[:1], single.manifest)
        out = augment_swap(single).records
        assert len(out) == 2
        original, twin = out
        assert twin.id == original.id + SWAP_SUFFIX
        assert twin.label == 1 - original.label
        assert twin.strength == original.strength
        assert twin.true_delta == -original.true_delta
        np.testing.assert_array_equal(twin.x_pair, swap_pair(original.x_pair, CONTEXT_DIM, ITEM_DIM))

    def test_labels_balanced(self, dataset):
        out = augment_swap(dataset)
        assert len(out) == 2 * len(dataset)
        assert sum(r.label for r in out.records) == len(dataset)
        assert out.manifest.count == len(out)

    def test_redact_strips_true_delta(self, dataset):
        out = redact(dataset)
        assert all(r.true_delta is None for r in out.records)
        assert out.manifest.redacted
        assert not dataset.manifest.redacted
        assert dataset.records[0].true_delta is not None


# ── Presets and prompts ─────────────────────────────────────────────────────


class TestPresets:
    def test_helpsteer2_scale_sizes(self):
        data = generate_from_config(DataConfig(), preset="helpsteer2-scale").dataset
        assert data.manifest.split_sizes == {"id_train": 6766, "id_val": 352, "ood": 0}
        assert data.manifest.preset == "helpsteer2-scale"

    def test_unknown_preset(self):
        with pytest.raises(InvalidInputError):
            apply_preset(DataConfig(), "nonexistent")

    def test_preset_overrides_fields(self):
        config = apply_preset(DataConfig(n_prompts=3), "desk")
        assert config.n_prompts == 400
        assert config.responses_per_prompt == 4


class TestPrompts:
    def test_pool_shapes(self):
        prompts = generate_prompts(12, 5, 0.25, 4.0, seed=3)
        assert len(prompts) == 12
        assert all(len(p.candidates) == 5 for p in prompts.records)
        assert all(len(p.context) == CONTEXT_DIM for p in prompts.records)
        assert sum(p.split is Split.OOD for p in prompts.records) == 3

    def test_shares_truth_with_dataset(self):
        data = generate(5, 2, 0.0, 0.0, seed=1, truth_seed=9)
        prompts = generate_prompts(4, 3, 0.0, 0.0, seed=2, truth_seed=9)
        ctx, item = np.zeros(CONTEXT_DIM), np.ones(ITEM_DIM)
        assert prompts.truth().reward(ctx, item) == data.truth.reward(ctx, item)
