"""Shared pytest fixtures for the routing harness tests."""

import numpy as np
import pytest
import yaml

from uqroute.pref_data import augment_swap, generate, redact
from uqroute.sngp_head import GpHead, compute_covariance, train
from uqroute.utils.config import EncoderConfig, FeatureMapConfig, GpHeadConfig
from uqroute.utils.models import PreferenceRecord, Split

CONTEXT_DIM = 4
ITEM_DIM = 4
INPUT_DIM = CONTEXT_DIM + 2 * ITEM_DIM
TRUTH_SEED = 7


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end checks that train full-size heads")


@pytest.fixture
def small_encoder_config():
    """Encoder small enough for brute-force checks."""
    return EncoderConfig(input_dim=INPUT_DIM, hidden_dims=[16], hidden_dim_out=8, seed=3)


@pytest.fixture
def small_feature_config():
    return FeatureMapConfig(num_features=64, sigma_k=1.0, seed=5)


@pytest.fixture
def small_head_config():
    return GpHeadConfig(epochs=3, batch_size=32, learning_rate=1.0, seed=11)


@pytest.fixture(scope="session")
def generated():
    """Desk-sized ID/OOD dataset: 80 prompts, K=4, a quarter shifted OOD."""
    return generate(80, 4, 0.25, 4.0, seed=TRUTH_SEED)


@pytest.fixture(scope="session")
def dataset(generated):
    return generated.dataset


@pytest.fixture(scope="session")
def train_records(dataset):
    """Redacted, swap-augmented id_train records."""
    return augment_swap(redact(dataset.split(Split.ID_TRAIN))).records


@pytest.fixture(scope="session")
def trained_head(train_records):
    """Finalized head shared by read-only tests; never mutate it."""
    head = GpHead.initialize(
        EncoderConfig(input_dim=INPUT_DIM, hidden_dims=[16], hidden_dim_out=8, seed=3),
        FeatureMapConfig(num_features=64, sigma_k=1.0, seed=5),
        GpHeadConfig(epochs=3, batch_size=32, learning_rate=1.0, seed=11),
    )
    train(head, train_records)
    head.covariance = compute_covariance(head, train_records)
    return head


@pytest.fixture
def fresh_head(small_encoder_config, small_feature_config, small_head_config):
    """Untrained head that tests may modify."""
    return GpHead.initialize(small_encoder_config, small_feature_config, small_head_config)


def make_records(x, labels, strengths=None, split=Split.ID_TRAIN):
    """PreferenceRecords from arrays of pair encodings and labels."""
    x = np.asarray(x, dtype=np.float64)
    strengths = np.ones(len(x), dtype=int) if strengths is None else strengths
    return [
        PreferenceRecord(
            id=f"r{i}", group_id=f"g{i}", x_pair=row.tolist(), label=int(z), strength=int(s), split=split,
        )
        for i, (row, z, s) in enumerate(zip(x, labels, strengths))
    ]


@pytest.fixture
def record_factory():
    return make_records


@pytest.fixture
def small_config_dict(tmp_path):
    """Experiment config with tiny dims, writing into tmp_path."""
    return {
        "name": "test",
        "output_dir": str(tmp_path / "run"),
        "seed": 0,
        "threads": 1,
        "data": {
            "n_prompts": 40,
            "responses_per_prompt": 4,
            "ood_fraction": 0.25,
            "ood_shift": 4.0,
            "pool_size": 6,
            "n_align_prompts": 8,
        },
        "encoder": {"hidden_dims": [8], "hidden_dim_out": 6},
        "feature_map": {"num_features": 32},
        "head": {"epochs": 2, "batch_size": 32},
        "router": {"threshold": 1.35},
        "align": {"K": 3, "batch_size": 4, "epochs": 1},
        "sweep": {"thresholds": [10.0, 1.3], "modes": ["uncertainty", "random"], "call_budgets": [0.2]},
    }


@pytest.fixture
def config_yaml_file(small_config_dict, tmp_path):
    """Write the small config dict to a temp YAML file and return its Path."""
    path = tmp_path / "config.yaml"
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(small_config_dict, f, default_flow_style=False)
    return path
