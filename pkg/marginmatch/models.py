"""Pydantic records shared across the selection engine, trainer and artifacts."""

from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class PolicyVariant(str, Enum):
    """Masking policy applied to unlabeled examples."""

    FIXMATCH = "fixmatch"
    FLEXMATCH = "flexmatch"
    MARGINMATCH = "marginmatch"


class GateMode(str, Enum):
    """How a gate's cutoff is obtained."""

    FIXED = "fixed"
    FLEXIBLE = "flexible"
    DISABLED = "disabled"


class AugmentationKind(str, Enum):
    """Augmentation strength."""

    WEAK = "weak"
    STRONG = "strong"


class _Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)


class LogitRecord(_Record):
    """Raw pre-softmax scores of one example at one pass, C genuine classes plus the virtual one."""

    example_id: int = Field(..., description="Opaque example identifier")
    iteration: int = Field(..., ge=0, description="Pass index t")
    logits: tuple[float, ...] = Field(..., min_length=2, description="C+1 logits")


class AumTracker(_Record):
    """EMA-smoothed per-class margins of one example."""

    example_id: int = Field(..., description="Opaque example identifier")
    aum: tuple[float, ...] = Field(..., min_length=2, description="AUM per class, length C+1")
    last_t: int = Field(0, ge=0, description="Last pass index incorporated")
    update_count: int = Field(0, ge=0, description="Number of margin observations incorporated")

    @classmethod
    def fresh(cls, example_id: int, num_outputs: int) -> "AumTracker":
        """Create a zero-initialized tracker for ``num_outputs`` classes."""
        return cls(example_id=example_id, aum=(0.0,) * num_outputs)


class LearningStatus(_Record):
    """Per-class count of unlabeled examples confidently predicted in that class."""

    counts: tuple[int, ...] = Field(..., description="alpha_c per genuine class")
    total_unlabeled: int = Field(..., ge=0, description="Number of unlabeled examples counted")

    @field_validator("counts")
    @classmethod
    def _non_negative(cls, counts: tuple[int, ...]) -> tuple[int, ...]:
        if any(c < 0 for c in counts):
            raise ValueError("learning-status counts must be non-negative")
        return counts

    @model_validator(mode="after")
    def _bounded_by_total(self) -> "LearningStatus":
        if sum(self.counts) > self.total_unlabeled:
            raise ValueError("learning-status counts exceed the number of unlabeled examples")
        return self


class ThresholdState(_Record):
    """Confidence thresholds and AUM cutoff in force during one pass."""

    pass_index: int = Field(..., ge=0)
    tau: float = Field(..., gt=0.0, lt=1.0)
    per_class: tuple[float, ...] = Field(..., description="Per-class confidence thresholds")
    gamma: Optional[float] = Field(None, description="AUM cutoff; None disables the AUM gate")

    @model_validator(mode="after")
    def _within_tau(self) -> "ThresholdState":
        for value in self.per_class:
            if not 0.0 <= value <= self.tau:
                raise ValueError(f"per-class threshold {value} outside [0, tau={self.tau}]")
        return self

    @property
    def aum_gate_enabled(self) -> bool:
        return self.gamma is not None


class MaskDecision(_Record):
    """Verdict for one unlabeled example."""

    example_id: int
    pseudo_label: int = Field(..., ge=0)
    confidence: float = Field(..., ge=0.0, le=1.0)
    conf_pass: bool
    aum_pass: bool
    selected: bool

    @model_validator(mode="after")
    def _gates_factorize(self) -> "MaskDecision":
        if self.selected != (self.conf_pass and self.aum_pass):
            raise ValueError("selected must equal conf_pass AND aum_pass")
        return self


class PassMetrics(_Record):
    """Diagnostics emitted once per pass through the unlabeled set."""

    pass_index: int = Field(..., ge=1)
    mask_rate: float = Field(..., ge=0.0, le=1.0)
    impurity: Optional[float] = Field(None, ge=0.0, le=1.0)
    test_error: float = Field(..., ge=0.0, le=1.0)
    per_class_thresholds: tuple[float, ...]
    gamma: Optional[float] = None
    selected_count: int = Field(..., ge=0)
    masked_count: int = Field(..., ge=0)
    supervised_loss: float
    unsupervised_loss: float
    total_loss: float
    learning_rate: float
    labeled_aum: Optional[float] = None
    threshold_aum: Optional[float] = None
    lockstep: Optional[dict[str, int]] = None


class TraceRecord(_Record):
    """Weak-branch logits of one example at one pass."""

    example_id: int
    pass_index: int = Field(..., ge=1)
    logits: tuple[float, ...] = Field(..., min_length=2)
    gold_label: Optional[int] = Field(None, ge=0)


class TraceHeader(_Record):
    """Header of a binary logit trace."""

    version: int
    num_classes: int = Field(..., ge=1, description="C, genuine classes only")
    example_count: int = Field(..., ge=0)
    pass_count: int = Field(..., ge=0)
    record_count: int = Field(..., ge=0)
    config_hash: str = ""
    threshold_ids: tuple[int, ...] = ()

    @property
    def num_outputs(self) -> int:
        return self.num_classes + 1

