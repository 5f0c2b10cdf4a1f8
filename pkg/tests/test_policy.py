"""Tests for the FixMatch, FlexMatch and MarginMatch decision rules."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from marginmatch.errors import InvalidInputError
from marginmatch.models import AumTracker, MaskDecision, PolicyVariant, ThresholdState
from marginmatch.policy import (
    PolicyEvidence,
    decide_arrays,
    decide_batch,
    decide_fixmatch,
    decide_flexmatch,
    decide_marginmatch,
    weak_confidences,
)

FLEX = ThresholdState(pass_index=2, tau=0.95, per_class=(0.95, 0.475, 0.0))


def with_gamma(gamma):
    return FLEX.model_copy(update={"gamma": gamma})


def test_fixmatch_examples():
    """Test confident, boundary and uniform inputs."""
    d = decide_fixmatch([0.97, 0.02, 0.01], 0.95)
    assert d.selected and d.pseudo_label == 0 and d.confidence == 0.97
    assert not decide_fixmatch([0.95, 0.03, 0.02], 0.95).selected
    assert not decide_fixmatch([1 / 3, 1 / 3, 1 / 3], 0.95).selected


def test_fixmatch_rejects_malformed_distribution():
    """Test probability validation."""
    with pytest.raises(InvalidInputError):
        decide_fixmatch([0.9, 0.9], 0.95)
    with pytest.raises(InvalidInputError):
        decide_fixmatch([[0.9, 0.1], [0.5, 0.5]], 0.95)


def test_flexmatch_examples():
    """Test class-specific thresholds."""
    assert not decide_flexmatch([0.50, 0.30, 0.20], FLEX).selected
    d = decide_flexmatch([0.30, 0.50, 0.20], FLEX)
    assert d.selected and d.pseudo_label == 1


def test_flexmatch_with_zero_thresholds_selects_anything_positive():
    """Test the degenerate all-zero threshold vector."""
    zero = ThresholdState(pass_index=2, tau=0.95, per_class=(0.0, 0.0, 0.0))
    assert decide_flexmatch([0.2, 0.5, 0.3], zero).selected
    assert not decide_flexmatch([0.0, 0.0, 0.0], zero, strict=False).selected


def test_flexmatch_rejects_length_mismatch():
    """Test thresholds for the wrong number of classes."""
    with pytest.raises(InvalidInputError):
        decide_flexmatch([0.5, 0.5], FLEX)


def test_marginmatch_examples():
    """Test the AUM gate on top of the confidence gate."""
    passing = AumTracker(example_id=1, aum=(-0.1, 0.8, -1.2, 0.0))
    failing = AumTracker(example_id=2, aum=(-0.1, -0.9, -1.2, 0.0))
    d = decide_marginmatch([0.30, 0.50, 0.20], with_gamma(-0.2), passing)
    assert d.selected and d.pseudo_label == 1 and d.example_id == 1
    d = decide_marginmatch([0.30, 0.50, 0.20], with_gamma(-0.2), failing)
    assert d.conf_pass and not d.aum_pass and not d.selected


def test_marginmatch_without_gamma_equals_flexmatch():
    """Test that removing the AUM gate leaves FlexMatch."""
    tracker = AumTracker(example_id=0, aum=(-5.0, -5.0, -5.0, 0.0))
    for probs in ([0.30, 0.50, 0.20], [0.50, 0.30, 0.20], [0.1, 0.1, 0.8]):
        assert decide_marginmatch(probs, FLEX, tracker) == decide_flexmatch(probs, FLEX)


def test_weak_confidences_truncate_without_renormalizing():
    """Test that the virtual class is dropped but its mass is not redistributed."""
    logits = np.array([[2.0, 0.0, 0.0, 2.0]])
    probs = weak_confidences(logits, 3)
    assert probs.shape == (1, 3)
    assert probs.sum() < 1.0
    assert_allclose(weak_confidences(logits, 3, renormalize=True).sum(), 1.0)


def test_renormalized_confidences_survive_a_dominant_virtual_logit():
    """Test that renormalizing stays finite when the genuine classes underflow."""
    logits = np.array([[0.0, 0.0, 0.0, 800.0], [3.0, 1.0, 0.0, -1.0]])
    probs = weak_confidences(logits, 3, renormalize=True)
    assert np.all(np.isfinite(probs))
    assert_allclose(probs.sum(axis=1), 1.0)
    assert_allclose(probs[0], [1 / 3, 1 / 3, 1 / 3])
    evidence = PolicyEvidence(np.array([0, 1]), probs, FLEX)
    batch = decide_arrays(PolicyVariant.FLEXMATCH, evidence)
    assert batch.pseudo_labels.tolist() == [0, 0]


def test_scalar_rules_reject_incomplete_distributions():
    """Test that a row summing below one is malformed unless truncation is allowed."""
    with pytest.raises(InvalidInputError):
        decide_fixmatch([0.1, 0.1, 0.1], 0.95)
    with pytest.raises(InvalidInputError):
        decide_flexmatch([0.1, 0.1, 0.1], FLEX)
    tracker = AumTracker(example_id=0, aum=(0.0, 0.0, 0.0, 0.0))
    with pytest.raises(InvalidInputError):
        decide_marginmatch([0.1, 0.1, 0.1], with_gamma(0.0), tracker)
    assert not decide_fixmatch([0.1, 0.1, 0.1], 0.95, strict=False).selected


def test_virtual_class_never_becomes_pseudo_label():
    """Test that a dominant virtual logit still yields a genuine pseudo-label."""
    probs = weak_confidences([[0.0, 1.0, 0.0, 9.0]], 3)
    d = decide_fixmatch(probs[0], 0.5, strict=False)
    assert d.pseudo_label == 1
    assert not d.selected


def test_decide_batch_composition():
    """Test the two marginmatch examples as one batch."""
    evidence = PolicyEvidence(
        example_ids=np.array([1, 2]),
        probs=np.array([[0.30, 0.50, 0.20], [0.30, 0.50, 0.20]]),
        thresholds=with_gamma(-0.2),
        aum=np.array([[-0.1, 0.8, -1.2, 0.0], [-0.1, -0.9, -1.2, 0.0]]),
    )
    decisions = decide_batch(PolicyVariant.MARGINMATCH, evidence)
    assert [d.selected for d in decisions] == [True, False]
    assert [d.example_id for d in decisions] == [1, 2]


def test_decide_batch_singleton_matches_scalar():
    """Test a batch of one against the scalar rule."""
    evidence = PolicyEvidence(np.array([5]), np.array([[0.97, 0.02, 0.01]]), FLEX)
    assert decide_batch(PolicyVariant.FIXMATCH, evidence) == [
        decide_fixmatch([0.97, 0.02, 0.01], 0.95, example_id=5)
    ]


def test_decide_batch_permutation_equivariant():
    """Test that permuting the batch permutes the decisions."""
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=12) * 0.99
    aum = rng.normal(size=(12, 4))
    ids = np.arange(12)
    perm = rng.permutation(12)
    state = with_gamma(0.0)
    a = decide_batch(PolicyVariant.MARGINMATCH, PolicyEvidence(ids, probs, state, aum))
    permuted = PolicyEvidence(ids[perm], probs[perm], state, aum[perm])
    b = decide_batch(PolicyVariant.MARGINMATCH, permuted)
    assert b == [a[i] for i in perm]


def test_decide_batch_length_mismatch():
    """Test evidence arrays of different lengths."""
    probs = np.array([[0.5, 0.3, 0.2]])
    with pytest.raises(InvalidInputError):
        decide_arrays(PolicyVariant.FLEXMATCH, PolicyEvidence(np.array([1, 2]), probs, FLEX))
    with pytest.raises(InvalidInputError):
        decide_arrays(
            PolicyVariant.MARGINMATCH,
            PolicyEvidence(np.array([1]), probs, with_gamma(0.0), np.zeros((2, 4))),
        )


def test_mask_decision_enforces_factorization():
    """Test that selected must equal conf_pass AND aum_pass."""
    with pytest.raises(ValueError):
        MaskDecision(
            example_id=0,
            pseudo_label=0,
            confidence=0.9,
            conf_pass=True,
            aum_pass=False,
            selected=True,
        )


@st.composite
def evidence_batches(draw):
    c = draw(st.integers(min_value=2, max_value=6))
    n = draw(st.integers(min_value=1, max_value=40))
    seed = draw(st.integers(min_value=0, max_value=2**32 - 1))
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=draw(st.floats(min_value=0.1, max_value=8.0)), size=(n, c + 1))
    tau = draw(st.floats(min_value=0.05, max_value=0.99))
    per_class = tuple(float(v) for v in rng.uniform(0, tau, size=c))
    gamma = draw(st.one_of(st.none(), st.floats(min_value=-3, max_value=3)))
    thresholds = ThresholdState(pass_index=2, tau=tau, per_class=per_class, gamma=gamma)
    return PolicyEvidence(
        example_ids=np.arange(n),
        probs=weak_confidences(logits, c),
        thresholds=thresholds,
        aum=rng.normal(scale=2.0, size=(n, c + 1)),
    )


@settings(max_examples=2500)
@given(evidence_batches())
def test_subset_chain(evidence):
    """Test MarginMatch within FlexMatch within reach of FixMatch, and gate factorization."""
    fix = decide_arrays(PolicyVariant.FIXMATCH, evidence)
    flex = decide_arrays(PolicyVariant.FLEXMATCH, evidence)
    margin = decide_arrays(PolicyVariant.MARGINMATCH, evidence)
    assert not np.any(margin.selected & ~flex.selected)
    assert not np.any(fix.selected & ~flex.selected)
    assert_array_equal(margin.conf_pass, flex.conf_pass)
    for batch in (fix, flex, margin):
        assert_array_equal(batch.selected, batch.conf_pass & batch.aum_pass)
        assert np.all(batch.pseudo_labels < len(evidence.thresholds.per_class))


@settings(max_examples=300)
@given(evidence_batches())
def test_vectorized_matches_scalar_rules(evidence):
    """Test decide_arrays row by row against the scalar decision functions."""
    rows = decide_batch(PolicyVariant.MARGINMATCH, evidence)
    for i, d in enumerate(rows):
        tracker = AumTracker(example_id=i, aum=tuple(evidence.aum[i]))
        probs = evidence.probs[i]
        assert d == decide_marginmatch(probs, evidence.thresholds, tracker, strict=False)
    flex_rows = decide_batch(PolicyVariant.FLEXMATCH, evidence)
    fix_rows = decide_batch(PolicyVariant.FIXMATCH, evidence)
    for i in range(len(rows)):
        probs = evidence.probs[i]
        assert flex_rows[i] == decide_flexmatch(probs, evidence.thresholds, i, strict=False)
        assert fix_rows[i] == decide_fixmatch(probs, evidence.thresholds.tau, i, strict=False)


def test_subset_chain_on_many_random_tuples():
    """Test the subset chain and gate factorization on 10^5 independent random tuples."""
    rng = np.random.default_rng(20_000)
    checked = 0
    for _ in range(2_000):
        c = int(rng.integers(2, 7))
        tau = float(rng.uniform(0.05, 0.99))
        state = ThresholdState(
            pass_index=2,
            tau=tau,
            per_class=tuple(float(v) for v in rng.uniform(0, tau, size=c)),
            gamma=float(rng.uniform(-3, 3)),
        )
        logits = rng.normal(scale=rng.uniform(0.1, 8.0), size=(50, c + 1))
        aum = rng.normal(scale=2.0, size=(50, c + 1))
        evidence = PolicyEvidence(np.arange(50), weak_confidences(logits, c), state, aum)
        fix, flex, margin = (decide_arrays(v, evidence) for v in PolicyVariant)
        assert not np.any(margin.selected & ~flex.selected)
        assert not np.any(fix.selected & ~flex.selected)
        for batch in (fix, flex, margin):
            assert_array_equal(batch.selected, batch.conf_pass & batch.aum_pass)
        checked += 50
    assert checked == 100_000
