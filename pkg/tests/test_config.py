"""Tests for config loader and validation."""

import pytest
import yaml
from pydantic import ValidationError

from uqroute.utils.config import (
    CONFIG_PATH,
    RESOLVED_CONFIG_NAME,
    AlignConfig,
    DataConfig,
    EncoderConfig,
    ExperimentConfig,
    GpHeadConfig,
    RouterConfig,
    SimJudgeConfig,
    get_secret,
    load_config,
    save_resolved_config,
)
from uqroute.utils.models import Activation, RoutingMode


# ── Section Model Tests ─────────────────────────────────────────────────────


class TestEncoderConfig:
    def test_defaults(self):
        c = EncoderConfig()
        assert c.input_dim == 12
        assert c.hidden_dims == [64, 64]
        assert c.spectral_bound == 1.0
        assert c.activation is Activation.TANH

    def test_relu(self):
        assert EncoderConfig(activation="relu").activation is Activation.RELU

    def test_non_positive_hidden_dim(self):
        with pytest.raises(ValidationError):
            EncoderConfig(hidden_dims=[16, 0])

    def test_non_positive_bound(self):
        with pytest.raises(ValidationError):
            EncoderConfig(spectral_bound=0.0)


class TestGpHeadConfig:
    def test_defaults(self):
        c = GpHeadConfig()
        assert c.tau == 0.001
        assert c.uncertainty_scale == 10.0
        assert c.use_strength_scaling is True
        assert c.optimizer == "sgd"

    def test_unknown_optimizer(self):
        with pytest.raises(ValidationError):
            GpHeadConfig(optimizer="lbfgs")

    def test_tau_must_be_positive(self):
        with pytest.raises(ValidationError):
            GpHeadConfig(tau=0.0)

    def test_lambda_zero_allowed(self):
        assert GpHeadConfig(uncertainty_scale=0.0).uncertainty_scale == 0.0


class TestRouterConfig:
    def test_defaults(self):
        c = RouterConfig()
        assert c.threshold == 1.35
        assert c.epsilon == 0.01
        assert c.mode is RoutingMode.UNCERTAINTY
        assert c.judge_reward is None

    @pytest.mark.parametrize("epsilon", [0.0, 0.5, 0.7])
    def test_epsilon_range(self, epsilon):
        with pytest.raises(ValidationError):
            RouterConfig(epsilon=epsilon)

    def test_mode_from_string(self):
        assert RouterConfig(mode="random").mode is RoutingMode.RANDOM

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            RouterConfig(mode="greedy")

    def test_call_budget_range(self):
        with pytest.raises(ValidationError):
            RouterConfig(call_budget=1.5)


class TestOtherSections:
    def test_judge_accuracy_below_chance(self):
        with pytest.raises(ValidationError):
            SimJudgeConfig(accuracy=0.4)

    def test_data_ood_fraction_range(self):
        with pytest.raises(ValidationError):
            DataConfig(ood_fraction=1.2)

    def test_align_k_at_least_two(self):
        with pytest.raises(ValidationError):
            AlignConfig(K=1)

    def test_align_zero_learning_rate_allowed(self):
        assert AlignConfig(learning_rate=0.0).learning_rate == 0.0


# ── Loader Tests ────────────────────────────────────────────────────────────


class TestLoadConfig:
    def test_load_valid(self, config_yaml_file):
        cfg = load_config(config_yaml_file)
        assert isinstance(cfg, ExperimentConfig)
        assert cfg.name == "test"
        assert cfg.data.n_prompts == 40
        assert cfg.feature_map.num_features == 32
        assert cfg.align.K == 3
        assert cfg.sweep.modes == [RoutingMode.UNCERTAINTY, RoutingMode.RANDOM]

    def test_omitted_sections_use_defaults(self, config_yaml_file):
        cfg = load_config(config_yaml_file)
        assert cfg.sim_judge == SimJudgeConfig()
        assert cfg.head.tau == 0.001

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nonexistent.yaml")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValueError):
            load_config(path)

    def test_invalid_value(self, small_config_dict, tmp_path):
        small_config_dict["router"]["epsilon"] = 0.9
        path = tmp_path / "bad.yaml"
        with open(path, "w", encoding="utf-8") as f:
            yaml.dump(small_config_dict, f)
        with pytest.raises(ValidationError):
            load_config(path)

    def test_real_config_loads(self):
        """The shipped config.yaml should validate."""
        if not CONFIG_PATH.exists():
            pytest.skip("config.yaml not present")
        cfg = load_config(CONFIG_PATH)
        assert cfg.sweep.thresholds

    def test_resolved_config_round_trip(self, config_yaml_file, tmp_path):
        cfg = load_config(config_yaml_file)
        path = save_resolved_config(cfg, tmp_path / "run")
        assert path.name == RESOLVED_CONFIG_NAME
        assert load_config(path) == cfg


class TestGetSecret:
    def test_reads_environment(self, monkeypatch):
        monkeypatch.setenv("UQROUTE_TEST_SECRET", "s3cret")
        assert get_secret("UQROUTE_TEST_SECRET") == "s3cret"

    def test_default(self, monkeypatch):
        monkeypatch.delenv("UQROUTE_TEST_MISSING", raising=False)
        assert get_secret("UQROUTE_TEST_MISSING", "fallback") == "fallback"
