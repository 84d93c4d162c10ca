"""Configuration loader and validator for experiment YAML files.

Loads config.yaml (or a user-supplied file) and provides typed access to every
module's settings via Pydantic models. Also loads .env for secrets such as the
remote judge API key.
"""

import logging
import os
from pathlib import Path
from typing import Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

from uqroute.utils.models import Activation, RoutingMode

logger = logging.getLogger(__name__)

# Project root: two levels up from uqroute/utils/config.py
PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent
CONFIG_PATH = PROJECT_ROOT / "config.yaml"
ENV_PATH = PROJECT_ROOT / ".env"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"

JUDGE_API_KEY_ENV = "UQROUTE_JUDGE_API_KEY"


# ---------------------------------------------------------------------------
# Config section models
# ---------------------------------------------------------------------------

class EncoderConfig(BaseModel):
    """Spectrally-normalized feed-forward encoder producing D_h hidden states."""
    input_dim: int = Field(12, ge=1)
    hidden_dims: list[int] = [64, 64]
    hidden_dim_out: int = Field(32, ge=1)
    spectral_bound: float = Field(1.0, gt=0)
    power_iterations: int = Field(5, ge=1)
    activation: Activation = Activation.TANH
    seed: int = 0

    @model_validator(mode="after")
    def _check_hidden_dims(self) -> "EncoderConfig":
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("hidden_dims entries must be positive")
        return self


class FeatureMapConfig(BaseModel):
    """Random Fourier feature map settings (D_r, sigma_k)."""
    num_features: int = Field(512, ge=1)
    sigma_k: float = Field(1.0, gt=0)
    seed: int = 0


class GpHeadConfig(BaseModel):
    """GP output layer training and posterior settings."""
    tau: float = Field(0.001, gt=0)
    uncertainty_scale: float = Field(10.0, ge=0)  # lambda
    learning_rate: float = Field(1.0, gt=0)
    epochs: int = Field(2, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    use_strength_scaling: bool = True
    optimizer: str = Field("sgd", pattern="^(sgd|adam)$")
    cosine_decay: bool = True


class DataConfig(BaseModel):
    """Synthetic Bradley-Terry data generation settings."""
    n_prompts: int = Field(400, ge=1)
    responses_per_prompt: int = Field(4, ge=2)
    ood_fraction: float = Field(0.3, ge=0, le=1)
    ood_shift: float = Field(4.0, ge=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    context_dim: int = Field(4, ge=0)
    item_dim: int = Field(4, ge=1)
    n_components: int = Field(3, ge=1)
    reward_scale: float = Field(3.0, gt=0)
    pool_size: int = Field(16, ge=2)
    n_align_prompts: int = Field(128, ge=1)
    seed: int = 0


class SimJudgeConfig(BaseModel):
    """Simulated strong judge: symmetric sign flips plus a tie band."""
    accuracy: float = Field(0.95, ge=0.5, le=1.0)
    tie_threshold: float = Field(0.25, ge=0)
    latency_ms_mean: float = Field(0.0, ge=0)
    seed: int = 0


class RemoteJudgeConfig(BaseModel):
    """HTTP judge client settings."""
    endpoint: str = "http://127.0.0.1:8089/judge"
    requests_per_minute: int = Field(200, ge=1)
    window_seconds: float = Field(60.0, gt=0)
    max_in_flight: int = Field(64, ge=1)
    max_attempts: int = Field(4, ge=1)
    backoff_base_s: float = Field(0.5, gt=0)
    backoff_max_s: float = Field(30.0, gt=0)
    timeout_ms: float = Field(120_000.0, gt=0)


class RouterConfig(BaseModel):
    """Routing between the preference model and the judge."""
    threshold: float = 1.35
    epsilon: float = Field(0.01, gt=0, lt=0.5)
    mode: RoutingMode = RoutingMode.UNCERTAINTY
    seed: int = 0
    call_budget: float = Field(0.1, gt=0, le=1)
    judge_reward: Optional[float] = Field(None, gt=0)
    batch_size: int = Field(256, ge=1)


class AlignConfig(BaseModel):
    """Toy RLOO alignment loop settings."""
    K: int = Field(4, ge=2)
    kl_beta: float = Field(0.01, ge=0)
    learning_rate: float = Field(0.5, ge=0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(1, ge=1)
    clip_ratio: Optional[float] = Field(None, gt=0)
    inner_steps: int = Field(1, ge=1)
    seed: int = 0
    router: RouterConfig = Field(default_factory=RouterConfig)


class SweepConfig(BaseModel):
    """Threshold sweep grid."""
    thresholds: list[float] = [10.0, 1.45, 1.40, 1.35, 1.30]
    modes: list[RoutingMode] = [RoutingMode.UNCERTAINTY, RoutingMode.RANDOM]
    call_budgets: list[float] = []


# ---------------------------------------------------------------------------
# Top-level config model
# ---------------------------------------------------------------------------

class ExperimentConfig(BaseModel):
    """Complete experiment configuration loaded from YAML."""
    name: str = "uqroute"
    output_dir: str = "runs/default"
    seed: int = 0
    threads: int = Field(1, ge=1)
    data: DataConfig = Field(default_factory=DataConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    feature_map: FeatureMapConfig = Field(default_factory=FeatureMapConfig)
    head: GpHeadConfig = Field(default_factory=GpHeadConfig)
    sim_judge: SimJudgeConfig = Field(default_factory=SimJudgeConfig)
    remote_judge: RemoteJudgeConfig = Field(default_factory=RemoteJudgeConfig)
    router: RouterConfig = Field(default_factory=RouterConfig)
    align: AlignConfig = Field(default_factory=AlignConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)


# ---------------------------------------------------------------------------
# Singleton loader
# ---------------------------------------------------------------------------

_config: Optional[ExperimentConfig] = None


def load_config(config_path: Optional[Path] = None) -> ExperimentConfig:
    """Load and validate configuration from a YAML file.

    Also loads environment variables from .env if the file exists.

    Args:
        config_path: Path to a config YAML. Defaults to PROJECT_ROOT/config.yaml.

    Returns:
        A validated ExperimentConfig instance.

    Raises:
        FileNotFoundError: If the config file does not exist.
        yaml.YAMLError: If the YAML is malformed.
        pydantic.ValidationError: If the config fails validation.
    """
    global _config

    path = config_path or CONFIG_PATH

    if ENV_PATH.exists():
        load_dotenv(ENV_PATH)
        logger.debug("Loaded environment variables from %s", ENV_PATH)

    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)

    if raw is None:
        raise ValueError(f"Config file is empty: {path}")

    _config = ExperimentConfig.model_validate(raw)
    logger.info(
        "Config loaded: experiment %s (D_r=%d, tau=%g, lambda=%g, threshold=%g, mode=%s)",
        _config.name,
        _config.feature_map.num_features,
        _config.head.tau,
        _config.head.uncertainty_scale,
        _config.router.threshold,
        _config.router.mode.value,
    )
    return _config


def get_config() -> ExperimentConfig:
    """Return the cached config, loading it if necessary.

    Falls back to built-in defaults when no config.yaml exists.
    """
    global _config
    if _config is None:
        if CONFIG_PATH.exists():
            _config = load_config()
        else:
            logger.warning("%s not found, using built-in defaults", CONFIG_PATH.name)
            _config = ExperimentConfig()
    return _config


def save_resolved_config(config: ExperimentConfig, out_dir: Path) -> Path:
    """Write the fully resolved config next to a run's outputs.

    Args:
        config: The config actually used by the run.
        out_dir: Output directory of the run.

    Returns:
        Path of the written YAML file.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    tmp_path = path.with_suffix(".tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)
    tmp_path.replace(path)
    logger.info("Resolved config written to %s", path)
    return path


def get_secret(key: str, default: Optional[str] = None) -> Optional[str]:
    """Read a secret from environment variables, loading .env first.

    Args:
        key: Environment variable name (e.g. "UQROUTE_JUDGE_API_KEY").
        default: Fallback value if the variable is not set.

    Returns:
        The secret value or the default.
    """
    if ENV_PATH.exists():
        load_dotenv(ENV_PATH)
    return os.environ.get(key, default)
