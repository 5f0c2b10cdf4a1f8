"""Replay recorded weak-branch logits through the selection engine, without a model."""

from dataclasses import dataclass
from typing import Any, Iterator

import numpy as np
import structlog

from .aum import AumBank, margin_matrix
from .config import RunConfig
from .errors import IncompleteTraceError
from .models import AumTracker, ThresholdState
from .policy import DecisionBatch, PolicyEvidence, decide_arrays, weak_confidences
from .storage import TraceFile, decision_payloads
from .thresholds import ThresholdSchedule

logger = structlog.get_logger(__name__)


@dataclass
class ReplayResult:
    policy: str
    decisions: list[DecisionBatch]
    thresholds: list[ThresholdState]
    unlabeled_bank: AumBank
    threshold_bank: AumBank

    def decision_log(self) -> Iterator[dict[str, Any]]:
        """Decision-log payloads, pass by pass, in trace order."""
        for t, batch in enumerate(self.decisions, start=1):
            yield from decision_payloads(t, self.policy, batch)

    def trackers(self) -> list[AumTracker]:
        """Final trackers: unlabeled examples first, then threshold samples."""
        return self.unlabeled_bank.trackers() + self.threshold_bank.trackers()


def _check_complete(trace: TraceFile) -> None:
    h = trace.header
    present = set(trace.example_ids.tolist())
    missing_threshold = [i for i in h.threshold_ids if i not in present]
    if missing_threshold:
        raise IncompleteTraceError(f"threshold sample {missing_threshold[0]} has no records")
    for t in range(1, h.pass_count + 1):
        seen = trace.example_ids[trace.pass_indices == t]
        if seen.size != len(present):
            absent = sorted(present - set(seen.tolist()))
            raise IncompleteTraceError(f"pass {t} has no record for example {absent[0]}")


def replay(trace: TraceFile, config: RunConfig) -> ReplayResult:
    """
    Re-derive every pass's thresholds, trackers and decisions from a trace.

    Per pass: thresholds from the previous pass's confidences and the threshold samples'
    AUMs so far, then tracker updates and decisions for the unlabeled records in trace
    order, then the threshold samples' tracker updates.

    Args:
        trace: A validated trace
        config: Supplies the policy, tau, delta, percentile and gating switches

    Raises:
        IncompleteTraceError: If some example is missing a pass
    """
    trace.validate()
    _check_complete(trace)
    h = trace.header
    num_classes = h.num_classes
    threshold_ids = set(h.threshold_ids)
    schedule = ThresholdSchedule(
        tau=config.tau,
        num_classes=num_classes,
        confidence_gate=config.confidence_gate,
        aum_gate=config.aum_gate,
        percentile=config.percentile,
        fixed_gamma=config.gating.fixed_gamma,
        gamma_freeze_after=config.gating.gamma_freeze_after,
    )
    renormalize = config.gating.renormalize_confidence

    first = trace.example_ids[trace.pass_indices == 1] if h.pass_count else np.zeros(0, np.int64)
    is_threshold = np.isin(trace.example_ids, list(threshold_ids))
    unlabeled_bank = AumBank([e for e in first.tolist() if e not in threshold_ids], h.num_outputs)
    threshold_bank = AumBank(list(h.threshold_ids), h.num_outputs)

    decisions: list[DecisionBatch] = []
    history: list[ThresholdState] = []
    previous = None
    for t in range(1, h.pass_count + 1):
        in_pass = trace.pass_indices == t
        state = schedule.state_for_pass(t, previous, threshold_bank.aum[:, num_classes])
        history.append(state)

        select = in_pass & ~is_threshold
        ids = trace.example_ids[select]
        logits = trace.logits[select]
        rows = unlabeled_bank.rows_for(ids)
        unlabeled_bank.update(rows, margin_matrix(logits), t, config.delta)
        probs = weak_confidences(logits, num_classes, renormalize)
        decisions.append(
            decide_arrays(
                config.policy,
                PolicyEvidence(ids, probs, state, unlabeled_bank.aum[rows]),
            )
        )
        previous = probs

        select = in_pass & is_threshold
        if np.any(select):
            threshold_bank.update(
                threshold_bank.rows_for(trace.example_ids[select]),
                margin_matrix(trace.logits[select]),
                t,
                config.delta,
            )

    logger.info(
        "replay_completed",
        passes=h.pass_count,
        examples=h.example_count,
        threshold_samples=len(threshold_bank),
    )
    return ReplayResult(
        policy=config.policy.value,
        decisions=decisions,
        thresholds=history,
        unlabeled_bank=unlabeled_bank,
        threshold_bank=threshold_bank,
    )
