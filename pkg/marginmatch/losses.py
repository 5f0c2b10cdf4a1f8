"""Supervised, unlabeled (consistency) and aggregate losses with analytic gradients."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError, NumericalFailureError
from .models import PolicyVariant, ThresholdState
from .network import (
    ClassifierParams,
    backward,
    forward_with_cache,
    log_softmax,
    softmax,
    zero_grads,
)
from .policy import DecisionBatch, PolicyEvidence, decide_arrays, weak_confidences

REDUCTIONS = ("mean_over_batch", "sum")


@dataclass
class LossResult:
    value: float
    grads: list[np.ndarray]


@dataclass
class UnlabeledLossResult(LossResult):
    decisions: DecisionBatch
    probs: np.ndarray


def _cross_entropy(
    params: ClassifierParams, features: np.ndarray, labels: np.ndarray, scale: float
) -> LossResult:
    """``scale * sum_i H(onehot(y_i), softmax(f(x_i)))`` and its gradient."""
    logits, cache = forward_with_cache(params, features)
    rows = np.arange(labels.size)
    value = float(-log_softmax(logits)[rows, labels].sum() * scale)
    if not np.isfinite(value):
        raise NumericalFailureError("cross-entropy is not finite")
    dlogits = softmax(logits)
    dlogits[rows, labels] -= 1.0
    dlogits *= scale
    return LossResult(value=value, grads=backward(params, cache, dlogits))


def supervised_loss(params: ClassifierParams, features, labels) -> LossResult:
    """
    Mean cross-entropy over a labeled batch (labels may include the virtual class C).

    Raises:
        InvalidInputError: On an empty batch or out-of-range labels
        NumericalFailureError: If the loss is not finite
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise InvalidInputError("supervised batch is empty")
    if x.ndim != 2 or x.shape[0] != y.size:
        raise InvalidInputError(f"{y.size} labels for features of shape {x.shape}")
    if np.any(y < 0) or np.any(y >= params.num_outputs):
        raise InvalidInputError(f"labels must lie in [0, {params.num_outputs - 1}]")
    return _cross_entropy(params, x, y, 1.0 / y.size)


def consistency_loss(
    params: ClassifierParams,
    strong_features,
    decisions: DecisionBatch,
    reduction: str = "mean_over_batch",
    batch_size: Optional[int] = None,
) -> LossResult:
    """
    Cross-entropy between hard pseudo-labels and the strong-branch distribution, over
    selected examples only.

    Pseudo-labels are constants: gradients flow through the strong branch alone. With
    ``mean_over_batch`` the masked sum is divided by the nominal ``batch_size`` (the
    batch length when omitted), so a short final batch is not weighted up.
    """
    if reduction not in REDUCTIONS:
        raise InvalidInputError(f"unknown reduction {reduction!r}")
    x = np.asarray(strong_features, dtype=np.float64)
    if x.shape[0] != len(decisions):
        raise InvalidInputError("strong features and decisions differ in length")
    if batch_size is not None and batch_size < len(decisions):
        raise InvalidInputError(f"batch of {len(decisions)} exceeds nominal size {batch_size}")
    selected = decisions.selected
    if not np.any(selected):
        return LossResult(value=0.0, grads=zero_grads(params))
    divisor = batch_size if batch_size is not None else len(decisions)
    scale = 1.0 / divisor if reduction == "mean_over_batch" else 1.0
    return _cross_entropy(params, x[selected], decisions.pseudo_labels[selected], scale)


def unlabeled_loss(
    params: ClassifierParams,
    weak_logits,
    strong_features,
    example_ids,
    thresholds: ThresholdState,
    policy: PolicyVariant,
    aum: Optional[np.ndarray] = None,
    renormalize: bool = False,
    reduction: str = "mean_over_batch",
    batch_size: Optional[int] = None,
) -> UnlabeledLossResult:
    """
    Gate a batch of unlabeled examples and compute the masked consistency loss.

    Args:
        params: Current parameters (differentiated through the strong branch)
        weak_logits: Weak-branch logits, treated as constants
        strong_features: Strong-augmentation inputs
        example_ids: Identifiers, one per row
        thresholds: Cutoffs for this pass
        policy: Masking policy
        aum: Tracker rows (C+1 columns) already updated with this pass's margins
        renormalize: Renormalize genuine-class probabilities before gating
        reduction: ``mean_over_batch`` divides the masked sum by the batch size
        batch_size: Nominal unlabeled batch size; defaults to the length of this batch

    Returns:
        Loss value, gradients, the decisions taken and the gating confidences
    """
    probs = weak_confidences(weak_logits, len(thresholds.per_class), renormalize)
    evidence = PolicyEvidence(
        example_ids=np.asarray(example_ids), probs=probs, thresholds=thresholds, aum=aum
    )
    decisions = decide_arrays(policy, evidence)
    result = consistency_loss(params, strong_features, decisions, reduction, batch_size)
    return UnlabeledLossResult(
        value=result.value, grads=result.grads, decisions=decisions, probs=probs
    )


def total_loss(supervised: float, unsupervised: float, lambda_u: float) -> float:
    """
    ``L_s + lambda * L_u``.

    Raises:
        NumericalFailureError: If a component or the result is not finite
    """
    value = supervised + lambda_u * unsupervised
    if not (np.isfinite(supervised) and np.isfinite(unsupervised) and np.isfinite(value)):
        raise NumericalFailureError("loss components are not finite")
    return float(value)


def combine_grads(
    supervised: list[np.ndarray], unsupervised: list[np.ndarray], lambda_u: float
) -> list[np.ndarray]:
    """Gradient of the aggregate loss."""
    return [gs + lambda_u * gu for gs, gu in zip(supervised, unsupervised)]
