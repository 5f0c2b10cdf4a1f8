"""Learning status, flexible per-class confidence thresholds and the per-pass gate schedule."""

from typing import Optional

import numpy as np
import structlog

from .aum import calibrate_gamma
from .errors import CalibrationUnavailableError, InvalidConfigError, InvalidInputError
from .models import GateMode, LearningStatus, ThresholdState

logger = structlog.get_logger(__name__)

PROBABILITY_TOLERANCE = 1e-6


def _validate_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise InvalidConfigError(f"tau must lie in (0, 1), got {tau}")


def validate_probabilities(
    probs, num_classes: Optional[int] = None, strict: bool = False
) -> np.ndarray:
    """
    Check a batch of class-probability rows.

    Rows may be sub-stochastic: confidences truncated from a softmax that also covers the
    virtual class sum to at most one. With ``strict`` every row must sum to one.

    Args:
        probs: Array of shape (N, C), or (C,) for a single example
        num_classes: Expected C, if known
        strict: Require complete distributions instead of truncated ones

    Returns:
        Float64 array of shape (N, C)

    Raises:
        InvalidInputError: On wrong shape, entries outside [0, 1], or rows summing above 1
            (or anywhere but 1 when strict)
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] < 1:
        raise InvalidInputError(f"probabilities must have shape (N, C), got {p.shape}")
    if num_classes is not None and p.shape[1] != num_classes:
        raise InvalidInputError(f"expected {num_classes} classes, got {p.shape[1]}")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidInputError("probabilities must be finite and lie in [0, 1]")
    if np.any(p.sum(axis=1) > 1.0 + PROBABILITY_TOLERANCE):
        raise InvalidInputError("probability rows must not sum above 1")
    if strict and np.any(np.abs(p.sum(axis=1) - 1.0) > PROBABILITY_TOLERANCE):
        raise InvalidInputError("probability rows must sum to 1")
    return p


def learning_status(
    weak_confidences, tau: float, num_classes: Optional[int] = None
) -> LearningStatus:
    """
    Count, per class, the examples predicted in that class with confidence above tau.

    Args:
        weak_confidences: Probability rows from the weak branch, shape (N, C)
        tau: Base confidence threshold
        num_classes: C; required when there are no rows

    Returns:
        LearningStatus with one count per genuine class
    """
    _validate_tau(tau)
    p = np.asarray(weak_confidences, dtype=np.float64)
    if p.size == 0:
        if num_classes is None:
            if p.ndim == 2:
                num_classes = p.shape[1]
            else:
                raise InvalidInputError("num_classes is required for an empty example set")
        return LearningStatus(counts=(0,) * num_classes, total_unlabeled=0)
    p = validate_probabilities(p, num_classes)
    confident = p.max(axis=1) > tau
    counts = np.bincount(p.argmax(axis=1)[confident], minlength=p.shape[1])
    return LearningStatus(counts=tuple(int(c) for c in counts), total_unlabeled=p.shape[0])


def flexible_thresholds(status: LearningStatus, tau: float) -> np.ndarray:
    """
    Scale tau by each class's learning status relative to the best-learned class.

    ``T_c = alpha_c / max(alpha) * tau``; every class gets tau while no count is positive.
    """
    _validate_tau(tau)
    counts = np.asarray(status.counts, dtype=np.float64)
    peak = counts.max() if counts.size else 0.0
    if peak == 0:
        return np.full(counts.shape, tau)
    return counts / peak * tau


class ThresholdSchedule:
    """
    Produces the ThresholdState in force for each pass.

    Shared by the trainer and trace replay so both derive identical cutoffs from identical
    evidence. The AUM gate stays off during pass 1, before any margin has been observed.
    """

    def __init__(
        self,
        tau: float,
        num_classes: int,
        confidence_gate: GateMode = GateMode.FLEXIBLE,
        aum_gate: GateMode = GateMode.FLEXIBLE,
        percentile: float = 95.0,
        fixed_gamma: float = -1.25,
        gamma_freeze_after: Optional[int] = None,
    ):
        _validate_tau(tau)
        if confidence_gate == GateMode.DISABLED:
            raise InvalidConfigError("the confidence gate cannot be disabled")
        self.tau = tau
        self.num_classes = num_classes
        self.confidence_gate = confidence_gate
        self.aum_gate = aum_gate
        self.percentile = percentile
        self.fixed_gamma = fixed_gamma
        self.gamma_freeze_after = gamma_freeze_after
        self._last_gamma: Optional[float] = None
        self._warned = False

    @classmethod
    def from_config(cls, config) -> "ThresholdSchedule":
        """Build the schedule described by a RunConfig."""
        return cls(
            tau=config.tau,
            num_classes=config.data.num_classes,
            confidence_gate=config.confidence_gate,
            aum_gate=config.aum_gate,
            percentile=config.percentile,
            fixed_gamma=config.gating.fixed_gamma,
            gamma_freeze_after=config.gating.gamma_freeze_after,
        )

    def per_class(self, previous_confidences: Optional[np.ndarray]) -> tuple[float, ...]:
        """Confidence thresholds from the previous pass's weak-branch predictions."""
        if self.confidence_gate == GateMode.FIXED or previous_confidences is None:
            return (self.tau,) * self.num_classes
        status = learning_status(previous_confidences, self.tau, self.num_classes)
        return tuple(float(v) for v in flexible_thresholds(status, self.tau))

    def gamma(self, t: int, threshold_aums: np.ndarray) -> Optional[float]:
        """AUM cutoff for pass ``t``; None disables the AUM gate."""
        if self.aum_gate == GateMode.DISABLED or t <= 1:
            return None
        if self.aum_gate == GateMode.FIXED:
            return self.fixed_gamma
        if self.gamma_freeze_after is not None and t > self.gamma_freeze_after + 1:
            return self._last_gamma
        try:
            self._last_gamma = calibrate_gamma(threshold_aums, self.percentile)
        except CalibrationUnavailableError:
            if not self._warned:
                logger.warning("gamma_calibration_unavailable", pass_index=t)
                self._warned = True
            self._last_gamma = None
        return self._last_gamma

    def state_for_pass(
        self,
        t: int,
        previous_confidences: Optional[np.ndarray],
        threshold_aums: np.ndarray,
    ) -> ThresholdState:
        """
        Assemble the thresholds for pass ``t``.

        Args:
            t: Pass index (1-based)
            previous_confidences: Weak-branch probability rows from pass t-1, or None at t=1
            threshold_aums: Virtual-class AUMs of the threshold samples through pass t-1
        """
        return ThresholdState(
            pass_index=t,
            tau=self.tau,
            per_class=self.per_class(previous_confidences),
            gamma=self.gamma(t, threshold_aums),
        )
