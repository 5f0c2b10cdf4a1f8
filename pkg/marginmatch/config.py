"""Run configuration: YAML file, dotted overrides, hashing and seed expansion."""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvalidConfigError
from .models import GateMode, PolicyVariant

OUTPUT_ROOT_ENV = "MARGINMATCH_OUTPUT_ROOT"
SEED_STREAMS = ("data", "threshold", "init", "sampling", "augmentation")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class GatingConfig(_Section):
    """How confidence and AUM cutoffs are produced for the selected policy."""

    confidence_gate: Optional[GateMode] = Field(
        None, description="fixed or flexible; defaults to the policy's own gate"
    )
    aum_gate: Optional[GateMode] = Field(
        None, description="fixed, flexible or disabled; defaults to the policy's own gate"
    )
    fixed_gamma: float = Field(-1.25, description="AUM cutoff used when aum_gate is fixed")
    gamma_freeze_after: Optional[int] = Field(
        None, ge=1, description="Stop recalibrating gamma after this many calibrations"
    )
    renormalize_confidence: bool = Field(
        False, description="Renormalize the C genuine-class probabilities before gating"
    )
    unlabeled_loss_reduction: str = Field("mean_over_batch", pattern="^(mean_over_batch|sum)$")

    @model_validator(mode="after")
    def _confidence_gate_has_a_cutoff(self) -> "GatingConfig":
        if self.confidence_gate == GateMode.DISABLED:
            raise ValueError("confidence_gate cannot be disabled")
        return self


class ModelConfig(_Section):
    """Classifier architecture and optimizer."""

    hidden_widths: list[int] = Field(default_factory=lambda: [64, 64])
    activation: str = Field("relu", pattern="^(relu|tanh)$")
    learning_rate: float = Field(0.03, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _positive_widths(self) -> "ModelConfig":
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        return self


class DataConfig(_Section):
    """Synthetic bundle generation and threshold-sample assignment."""

    num_classes: int = Field(3, ge=2)
    feature_dim: int = Field(8, ge=1)
    per_class_labeled: int = Field(4, ge=1)
    unlabeled_count: int = Field(3000, ge=1)
    test_count: int = Field(1000, ge=1)
    separation: float = Field(4.0, gt=0.0)
    cluster_std: float = Field(1.0, gt=0.0)
    overlap: float = Field(0.6, ge=0.0)
    hard_fraction: float = Field(0.15, ge=0.0, lt=1.0)
    threshold_samples: bool = True
    threshold_fraction: float = Field(0.01, gt=0.0, lt=1.0)
    threshold_min_count: int = Field(10, ge=0)
    supervised_weighting: str = Field("balanced", pattern="^(balanced|uniform)$")

    @model_validator(mode="after")
    def _room_for_means(self) -> "DataConfig":
        if self.feature_dim < self.num_classes:
            raise ValueError("feature_dim must be at least num_classes")
        return self


class AugmentationSpec(_Section):
    """Weak and strong feature-space perturbations."""

    weak_sigma: float = Field(0.1, ge=0.0)
    strong_sigma: float = Field(0.8, ge=0.0)
    mask_rate: float = Field(0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _strong_is_stronger(self) -> "AugmentationSpec":
        if self.weak_sigma > self.strong_sigma:
            raise ValueError("weak_sigma must not exceed strong_sigma")
        return self


class OutputConfig(_Section):
    """Where and how much a run writes."""

    directory: str = "runs/default"
    decision_log_interval: int = Field(25, ge=1)
    record_trace: bool = False
    checkpoint_interval: int = Field(0, ge=0)
    lockstep: bool = False


class StatsConfig(_Section):
    """Optional heare-stats-client destination."""

    protocol: str = ""
    host: str = ""
    port: Optional[int] = None
    secret: str = ""


class RunConfig(_Section):
    """Complete description of one experiment."""

    policy: PolicyVariant = PolicyVariant.MARGINMATCH
    tau: float = Field(0.95, gt=0.0, lt=1.0)
    lambda_u: float = Field(1.0, ge=0.0)
    nu: int = Field(7, ge=1)
    batch_size: int = Field(64, ge=1)
    delta: float = Field(0.997, gt=0.0, le=1.0)
    percentile: float = Field(95.0, gt=0.0, le=100.0)
    total_steps: int = Field(20_000, ge=1)
    seed: int = Field(0, ge=0)
    gating: GatingConfig = Field(default_factory=GatingConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    outputs: OutputConfig = Field(default_factory=OutputConfig)
    stats: StatsConfig = Field(default_factory=StatsConfig)

    @property
    def confidence_gate(self) -> GateMode:
        if self.gating.confidence_gate is not None:
            return self.gating.confidence_gate
        return GateMode.FIXED if self.policy == PolicyVariant.FIXMATCH else GateMode.FLEXIBLE

    @property
    def aum_gate(self) -> GateMode:
        if self.policy != PolicyVariant.MARGINMATCH:
            return GateMode.DISABLED
        return self.gating.aum_gate or GateMode.FLEXIBLE

    @property
    def unlabeled_batch_size(self) -> int:
        return self.nu * self.batch_size

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON config, output directory and stats sink excluded."""
        data = self.model_dump(mode="json", exclude={"outputs": {"directory"}, "stats": True})
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def output_path(self) -> Path:
        """Resolve the output directory, honoring the output-root environment override."""
        directory = Path(self.outputs.directory)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not directory.is_absolute():
            return Path(root) / directory
        return directory


def derive_seeds(master_seed: int) -> dict[str, int]:
    """
    Expand a master seed into independent sub-seeds.

    Args:
        master_seed: The run's master seed

    Returns:
        Mapping from stream name to a 32-bit seed
    """
    children = np.random.SeedSequence(master_seed).spawn(len(SEED_STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_STREAMS, children)}


def parse_override(text: str) -> tuple[list[str], Any]:
    """
    Split a ``dotted.key=value`` override into its key path and YAML-typed value.

    Raises:
        InvalidConfigError: If the text has no ``=`` or an empty key
    """
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise InvalidConfigError(f"override must look like key=value: {text!r}")
    return key.split("."), yaml.safe_load(raw) if raw.strip() else ""


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted overrides to a nested mapping, returning a new mapping."""
    merged = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node = merged
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise InvalidConfigError(f"cannot set {text!r}: {part} is not a section")
            node = child
        node[path[-1]] = value
    return merged


def format_validation_error(error: ValidationError) -> str:
    """Render pydantic errors as ``key.path: message`` lines."""
    lines = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "\n".join(lines)


def build_config(data: dict, overrides: Optional[list[str]] = None) -> RunConfig:
    """
    Validate a mapping (plus overrides) into a RunConfig.

    Raises:
        InvalidConfigError: With one ``key.path: message`` line per problem
    """
    merged = apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise InvalidConfigError(format_validation_error(e)) from None


def load_config(path: Optional[str | Path], overrides: Optional[list[str]] = None) -> RunConfig:
    """
    Load a YAML config file (or the defaults when ``path`` is None) and apply overrides.

    Raises:
        InvalidConfigError: If the file is not a mapping or fails validation
    """
    data: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise InvalidConfigError(f"config file {path} must contain a mapping")
        data = loaded
    return build_config(data, overrides)


def dump_config(config: RunConfig, path: str | Path) -> None:
    """Write the effective config as YAML."""
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)
