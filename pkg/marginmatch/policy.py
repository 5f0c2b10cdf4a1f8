"""FixMatch, FlexMatch and MarginMatch masking policies as pure decision functions."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .aum import aum_of_class
from .errors import InvalidInputError
from .models import AumTracker, MaskDecision, PolicyVariant, ThresholdState
from .network import softmax
from .thresholds import validate_probabilities


def weak_confidences(logits, num_classes: int, renormalize: bool = False) -> np.ndarray:
    """
    Genuine-class probabilities from (C+1)-way logits.

    Softmax runs over all C+1 outputs and the virtual class is dropped. Without
    renormalization the rows sum to less than one, so an example drawn towards the virtual
    class reads as less confident. With renormalization the softmax runs over the C genuine
    logits alone, which is the same distribution without dividing by a vanishing row sum.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if renormalize:
        return softmax(z[:, :num_classes])
    return softmax(z)[:, :num_classes]


def _single(weak_probs, strict: bool) -> tuple[int, float]:
    p = validate_probabilities(weak_probs, strict=strict)
    if p.shape[0] != 1:
        raise InvalidInputError("expected a single probability vector")
    label = int(np.argmax(p[0]))
    return label, float(p[0, label])


def decide_fixmatch(
    weak_probs, tau: float, example_id: int = 0, *, strict: bool = True
) -> MaskDecision:
    """
    Select when the top probability exceeds the fixed threshold tau.

    Scalar rules expect a complete distribution unless ``strict`` is off, which admits the
    truncated rows produced by :func:`weak_confidences`.
    """
    label, confidence = _single(weak_probs, strict)
    conf_pass = confidence > tau
    return MaskDecision(
        example_id=example_id,
        pseudo_label=label,
        confidence=confidence,
        conf_pass=conf_pass,
        aum_pass=True,
        selected=conf_pass,
    )


def decide_flexmatch(
    weak_probs, thresholds: ThresholdState, example_id: int = 0, *, strict: bool = True
) -> MaskDecision:
    """Select when the top probability exceeds the flexible threshold of its class."""
    label, confidence = _single(weak_probs, strict)
    if len(thresholds.per_class) != np.size(weak_probs):
        raise InvalidInputError("threshold vector length does not match the class count")
    conf_pass = confidence > thresholds.per_class[label]
    return MaskDecision(
        example_id=example_id,
        pseudo_label=label,
        confidence=confidence,
        conf_pass=conf_pass,
        aum_pass=True,
        selected=conf_pass,
    )


def decide_marginmatch(
    weak_probs, thresholds: ThresholdState, tracker: AumTracker, *, strict: bool = True
) -> MaskDecision:
    """FlexMatch's confidence gate plus: AUM of the pseudo-label class must exceed gamma."""
    flex = decide_flexmatch(weak_probs, thresholds, tracker.example_id, strict=strict)
    aum_pass = True
    if thresholds.gamma is not None:
        aum_pass = aum_of_class(tracker, flex.pseudo_label) > thresholds.gamma
    return flex.model_copy(update={"aum_pass": aum_pass, "selected": flex.conf_pass and aum_pass})


@dataclass(frozen=True)
class PolicyEvidence:
    """
    Everything a policy looks at for a batch of unlabeled examples.

    ``aum`` holds one tracker row (length C+1) per example; it is only read by MarginMatch.
    """

    example_ids: np.ndarray
    probs: np.ndarray
    thresholds: ThresholdState
    aum: Optional[np.ndarray] = None


@dataclass(frozen=True)
class DecisionBatch:
    """Column form of a sequence of MaskDecisions."""

    example_ids: np.ndarray
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    conf_pass: np.ndarray
    aum_pass: np.ndarray

    @property
    def selected(self) -> np.ndarray:
        return self.conf_pass & self.aum_pass

    def __len__(self) -> int:
        return int(self.example_ids.size)

    def to_decisions(self) -> list[MaskDecision]:
        selected = self.selected
        return [
            MaskDecision(
                example_id=int(self.example_ids[i]),
                pseudo_label=int(self.pseudo_labels[i]),
                confidence=float(self.confidences[i]),
                conf_pass=bool(self.conf_pass[i]),
                aum_pass=bool(self.aum_pass[i]),
                selected=bool(selected[i]),
            )
            for i in range(len(self))
        ]


def decide_arrays(policy: PolicyVariant, evidence: PolicyEvidence) -> DecisionBatch:
    """
    Vectorized decisions; row i equals the scalar decision for example i.

    Raises:
        InvalidInputError: If the evidence arrays disagree in length
    """
    ids = np.asarray(evidence.example_ids, dtype=np.int64)
    num_classes = len(evidence.thresholds.per_class)
    p = np.asarray(evidence.probs, dtype=np.float64).reshape(-1, num_classes)
    if p.size:
        p = validate_probabilities(p, num_classes)
    if ids.size != p.shape[0]:
        raise InvalidInputError(f"{ids.size} example ids for {p.shape[0]} probability rows")
    labels = p.argmax(axis=1) if p.shape[0] else np.zeros(0, dtype=np.int64)
    rows = np.arange(p.shape[0])
    confidences = p[rows, labels]
    if policy == PolicyVariant.FIXMATCH:
        conf_pass = confidences > evidence.thresholds.tau
    else:
        per_class = np.asarray(evidence.thresholds.per_class, dtype=np.float64)
        conf_pass = confidences > per_class[labels]
    aum_pass = np.ones(p.shape[0], dtype=bool)
    if policy == PolicyVariant.MARGINMATCH and evidence.thresholds.gamma is not None:
        if evidence.aum is None:
            raise InvalidInputError("MarginMatch needs AUM rows")
        aum = np.asarray(evidence.aum, dtype=np.float64)
        if aum.ndim != 2 or aum.shape[0] != p.shape[0] or aum.shape[1] <= num_classes - 1:
            raise InvalidInputError(f"AUM rows of shape {aum.shape} do not cover the batch")
        aum_pass = aum[rows, labels] > evidence.thresholds.gamma
    return DecisionBatch(
        example_ids=ids,
        pseudo_labels=labels.astype(np.int64),
        confidences=confidences,
        conf_pass=np.asarray(conf_pass, dtype=bool),
        aum_pass=aum_pass,
    )


def decide_batch(policy: PolicyVariant, evidence: PolicyEvidence) -> list[MaskDecision]:
    """Order-preserving decisions for a batch of examples."""
    return decide_arrays(policy, evidence).to_decisions()
