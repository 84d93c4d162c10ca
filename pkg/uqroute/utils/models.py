"""Pydantic v2 data models shared across the routing pipeline.

Defines the enums (activation, split, verdict, score source, routing mode),
the on-disk dataset and prompt-set records with their manifests, the judge
wire-protocol messages, the per-pair scores and the cost ledger.
"""

import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class Activation(str, Enum):
    """Encoder nonlinearity."""

    TANH = "tanh"
    RELU = "relu"


class Split(str, Enum):
    """Dataset split a record belongs to."""

    ID_TRAIN = "id_train"
    ID_VAL = "id_val"
    OOD = "ood"


class RoutingMode(str, Enum):
    """How pairs are selected for the judge."""

    UNCERTAINTY = "uncertainty"
    RANDOM = "random"
    ADAPTIVE = "adaptive"


class ScoreSource(str, Enum):
    """Where a routed reward difference came from."""

    PM = "PM"
    JUDGE = "JUDGE"
    PM_FALLBACK = "PM_FALLBACK"


class Verdict(str, Enum):
    """Judge verdict on an ordered pair (A, B)."""

    A_BETTER = "A_BETTER"
    B_BETTER = "B_BETTER"
    TIE = "TIE"

    @classmethod
    def from_label(cls, label: int) -> "Verdict":
        """Map a wire label (1 = A better, 2 = B better, 0 = tie) to a verdict."""
        try:
            return _LABEL_TO_VERDICT[label]
        except KeyError:
            raise ValueError(f"unknown judge label: {label!r}") from None

    @property
    def label(self) -> int:
        """Wire label for this verdict."""
        return _VERDICT_TO_LABEL[self]

    def flipped(self) -> "Verdict":
        """Verdict for the same pair with A and B swapped."""
        if self is Verdict.A_BETTER:
            return Verdict.B_BETTER
        if self is Verdict.B_BETTER:
            return Verdict.A_BETTER
        return Verdict.TIE


_LABEL_TO_VERDICT = {1: Verdict.A_BETTER, 2: Verdict.B_BETTER, 0: Verdict.TIE}
_VERDICT_TO_LABEL = {v: k for k, v in _LABEL_TO_VERDICT.items()}


# ---------------------------------------------------------------------------
# Dataset records
# ---------------------------------------------------------------------------


class PreferenceRecord(BaseModel):
    """One ordered comparison: pair encoding, BT label and strength."""

    id: str
    group_id: str
    x_pair: list[float]
    label: int = Field(ge=0, le=1)
    strength: int = Field(1, ge=1, le=3)
    split: Split
    true_delta: Optional[float] = None  # generator-only

    @field_validator("x_pair")
    @classmethod
    def finite_features(cls, v: list[float]) -> list[float]:
        """Reject NaN/Inf features."""
        if not all(math.isfinite(x) for x in v):
            raise ValueError("x_pair contains non-finite values")
        return v


class DatasetManifest(BaseModel):
    """Sidecar manifest describing a dataset file."""

    format_version: int = 1
    context_dim: int = Field(ge=0)
    item_dim: int = Field(ge=1)
    truth_seed: int
    data_seed: int
    count: int = Field(ge=0)
    split_sizes: dict[str, int] = {}
    redacted: bool = False
    preset: Optional[str] = None
    ood_shift: float = 0.0
    n_components: int = 3
    reward_scale: float = 3.0

    @property
    def input_dim(self) -> int:
        """Length of every x_pair."""
        return self.context_dim + 2 * self.item_dim


class PromptRecord(BaseModel):
    """A context with its fixed candidate pool, used by the alignment loop."""

    id: str
    context: list[float]
    candidates: list[list[float]]
    split: Split


class PromptManifest(BaseModel):
    """Sidecar manifest describing a prompt-set file."""

    format_version: int = 1
    context_dim: int = Field(ge=0)
    item_dim: int = Field(ge=1)
    truth_seed: int
    data_seed: int
    count: int = Field(ge=0)
    pool_size: int = Field(ge=2)
    ood_shift: float = 0.0
    n_components: int = 3
    reward_scale: float = 3.0


# ---------------------------------------------------------------------------
# Judge wire protocol
# ---------------------------------------------------------------------------


class JudgeRequest(BaseModel):
    """Body of a judge POST: opaque context and responses."""

    id: str
    context: str
    response_a: str
    response_b: str


class JudgeReply(BaseModel):
    """Judge reply carrying a single integer label."""

    id: str
    label: int

    @field_validator("label")
    @classmethod
    def known_label(cls, v: int) -> int:
        """Only 0, 1 and 2 are valid labels."""
        if v not in (0, 1, 2):
            raise ValueError(f"label must be 0, 1 or 2, got {v}")
        return v


# ---------------------------------------------------------------------------
# Scores and accounting
# ---------------------------------------------------------------------------


class PairScore(BaseModel):
    """Preference model output for one ordered pair."""

    p: float
    u: float = Field(ge=1.0)
    g: float


class RoutedScore(BaseModel):
    """Reward difference after routing."""

    p_tilde: float
    source: ScoreSource
    u: float
    verdict: Optional[Verdict] = None

    @model_validator(mode="after")
    def _judge_has_verdict(self) -> "RoutedScore":
        if self.source is ScoreSource.JUDGE and self.verdict is None:
            raise ValueError("JUDGE-sourced scores must carry a verdict")
        return self


class CostLedger(BaseModel):
    """Per-run accounting of model evaluations, judge calls and wall time."""

    comparisons: int = 0
    pm_evals: int = 0
    routed: int = 0
    judge_calls: int = 0
    fallbacks: int = 0
    judge_attempts: int = 0
    judge_latency_ms: float = 0.0
    wall_time: dict[str, float] = {}
    effective_threshold: Optional[float] = None

    @property
    def calls_ratio(self) -> float:
        """Fraction of comparisons answered by the judge."""
        if self.comparisons == 0:
            return 0.0
        return self.judge_calls / self.comparisons

    def add_wall_time(self, phase: str, seconds: float) -> None:
        """Accumulate wall time spent in a phase."""
        self.wall_time[phase] = self.wall_time.get(phase, 0.0) + seconds

    @property
    def total_wall_time(self) -> float:
        """Wall time summed over phases."""
        return sum(self.wall_time.values())

    def merge(self, other: "CostLedger") -> None:
        """Fold another ledger's counts into this one."""
        self.comparisons += other.comparisons
        self.pm_evals += other.pm_evals
        self.routed += other.routed
        self.judge_calls += other.judge_calls
        self.fallbacks += other.fallbacks
        self.judge_attempts += other.judge_attempts
        self.judge_latency_ms += other.judge_latency_ms
        for phase, seconds in other.wall_time.items():
            self.add_wall_time(phase, seconds)
        if other.effective_threshold is not None:
            self.effective_threshold = other.effective_threshold
