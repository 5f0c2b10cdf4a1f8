"""Tests for the supervised, unlabeled and total losses."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from marginmatch.errors import InvalidInputError, NumericalFailureError
from marginmatch.losses import (
    combine_grads,
    consistency_loss,
    supervised_loss,
    total_loss,
    unlabeled_loss,
)
from marginmatch.models import PolicyVariant, ThresholdState
from marginmatch.network import ClassifierParams, forward, init_params
from marginmatch.policy import DecisionBatch, weak_confidences

NUM_CLASSES = 3


def make_params(seed, activation="tanh"):
    return init_params(4, [6], NUM_CLASSES + 1, np.random.default_rng(seed), activation)


def zero_output_params():
    """Parameters whose logits are all zero, i.e. a uniform prediction."""
    return ClassifierParams(
        weights=[np.zeros((5, 4)), np.zeros((NUM_CLASSES + 1, 5))],
        biases=[np.zeros(5), np.zeros(NUM_CLASSES + 1)],
        activation="tanh",
    )


def numeric_grads(loss_fn, params, eps=1e-6):
    arrays = params.arrays()
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            bumped = [v.copy() for v in arrays]
            bumped[k][idx] += eps
            up = loss_fn(ClassifierParams.from_arrays(bumped, params.activation))
            bumped[k][idx] -= 2 * eps
            down = loss_fn(ClassifierParams.from_arrays(bumped, params.activation))
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(analytic, numeric):
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    return np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)


def test_supervised_loss_uniform_model():
    """Test that a uniform model over C+1 outputs costs ln(C+1)."""
    x = np.random.default_rng(0).normal(size=(5, 4))
    result = supervised_loss(zero_output_params(), x, [0, 1, 2, 3, 1])
    assert result.value == pytest.approx(math.log(4))


def test_supervised_loss_perfect_prediction():
    """Test that a saturated correct prediction costs (almost) nothing."""
    params = zero_output_params()
    params.biases[-1][:] = [60.0, 0.0, 0.0, 0.0]
    result = supervised_loss(params, np.zeros((3, 4)), [0, 0, 0])
    assert result.value == pytest.approx(0.0, abs=1e-20)


def test_supervised_loss_matches_scalar_oracle():
    """Test against an elementwise recomputation."""
    rng = np.random.default_rng(4)
    params = make_params(4)
    x = rng.normal(size=(7, 4))
    y = rng.integers(0, NUM_CLASSES + 1, size=7)
    expected = 0.0
    for xi, yi in zip(x, y):
        z = forward(params, xi)
        expected += -(z[yi] - math.log(sum(math.exp(v) for v in z)))
    assert supervised_loss(params, x, y).value == pytest.approx(expected / 7, rel=1e-12)


def test_supervised_loss_errors():
    """Test empty batches and out-of-range labels."""
    params = make_params(0)
    with pytest.raises(InvalidInputError):
        supervised_loss(params, np.zeros((0, 4)), [])
    with pytest.raises(InvalidInputError):
        supervised_loss(params, np.zeros((1, 4)), [NUM_CLASSES + 1])
    with pytest.raises(InvalidInputError):
        supervised_loss(params, np.zeros((2, 4)), [0])


def mixed_batch(seed):
    rng = np.random.default_rng(seed)
    params = make_params(seed)
    weak_x = rng.normal(scale=2.0, size=(8, 4))
    strong_x = weak_x + rng.normal(size=(8, 4))
    weak_logits = forward(params, weak_x) * 2.0
    probs = weak_confidences(weak_logits, NUM_CLASSES)
    # Threshold just below the median confidence gives a mixed mask.
    cut = float(np.median(probs.max(axis=1))) - 1e-9
    thresholds = ThresholdState(pass_index=2, tau=0.999, per_class=(cut,) * NUM_CLASSES)
    return params, weak_logits, strong_x, thresholds


def test_unlabeled_loss_matches_masked_oracle():
    """Test the masked mean against an elementwise recomputation."""
    params, weak_logits, strong_x, thresholds = mixed_batch(3)
    result = unlabeled_loss(
        params, weak_logits, strong_x, np.arange(8), thresholds, PolicyVariant.FLEXMATCH
    )
    selected = result.decisions.selected
    assert 0 < selected.sum() < 8
    expected = 0.0
    for i in np.flatnonzero(selected):
        z = forward(params, strong_x[i])
        label = result.decisions.pseudo_labels[i]
        expected += -(z[label] - math.log(sum(math.exp(v) for v in z)))
    assert result.value == pytest.approx(expected / 8, rel=1e-12)

    summed = unlabeled_loss(
        params,
        weak_logits,
        strong_x,
        np.arange(8),
        thresholds,
        PolicyVariant.FLEXMATCH,
        reduction="sum",
    )
    assert summed.value == pytest.approx(expected, rel=1e-12)


def test_short_batch_is_divided_by_nominal_batch_size():
    """Test that a short final batch keeps the per-example weight of a full batch."""
    params, weak_logits, strong_x, thresholds = mixed_batch(3)
    args = (params, weak_logits, strong_x, np.arange(8), thresholds, PolicyVariant.FLEXMATCH)
    short = unlabeled_loss(*args, batch_size=12)
    summed = unlabeled_loss(*args, reduction="sum")
    assert short.value == pytest.approx(summed.value / 12, rel=1e-12)
    for g, s in zip(short.grads, summed.grads):
        assert_allclose(g, s / 12, rtol=1e-12, atol=1e-15)
    assert short.value == pytest.approx(unlabeled_loss(*args).value * 8 / 12, rel=1e-12)
    with pytest.raises(InvalidInputError):
        unlabeled_loss(*args, batch_size=5)


def test_unlabeled_loss_returns_gating_confidences():
    """Test that the confidences used for gating come back with the decisions."""
    params, weak_logits, strong_x, thresholds = mixed_batch(2)
    result = unlabeled_loss(
        params, weak_logits, strong_x, np.arange(8), thresholds, PolicyVariant.FIXMATCH
    )
    assert_array_equal(result.probs, weak_confidences(weak_logits, NUM_CLASSES))
    assert_array_equal(result.decisions.confidences, result.probs.max(axis=1))


def test_unlabeled_loss_fully_masked():
    """Test that nothing selected gives zero loss and zero gradients."""
    params, weak_logits, strong_x, _ = mixed_batch(1)
    closed = ThresholdState(pass_index=2, tau=0.99, per_class=(0.99,) * NUM_CLASSES)
    result = unlabeled_loss(
        params, weak_logits * 0.0, strong_x, np.arange(8), closed, PolicyVariant.FIXMATCH
    )
    assert result.value == 0.0
    assert all(not np.any(g) for g in result.grads)


def test_consistency_loss_zero_when_consistent():
    """Test that a saturated strong prediction equal to the pseudo-label costs nothing."""
    params = zero_output_params()
    params.biases[-1][:] = [0.0, 60.0, 0.0, 0.0]
    decisions = DecisionBatch(
        example_ids=np.arange(3),
        pseudo_labels=np.array([1, 1, 1]),
        confidences=np.full(3, 0.99),
        conf_pass=np.ones(3, dtype=bool),
        aum_pass=np.ones(3, dtype=bool),
    )
    result = consistency_loss(params, np.zeros((3, 4)), decisions)
    assert result.value == pytest.approx(0.0, abs=1e-20)


def test_unlabeled_gradient_flows_only_through_strong_branch():
    """Test the analytic gradient against finite differences with weak logits held fixed."""
    for seed in range(20):
        params, weak_logits, strong_x, thresholds = mixed_batch(seed)
        result = unlabeled_loss(
            params, weak_logits, strong_x, np.arange(8), thresholds, PolicyVariant.FLEXMATCH
        )
        decisions = result.decisions

        def loss_fn(p):
            return consistency_loss(p, strong_x, decisions).value

        assert relative_error(result.grads, numeric_grads(loss_fn, params)) < 1e-4


def test_supervised_gradient_matches_finite_differences():
    """Test the supervised gradient, virtual labels included."""
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        params = make_params(seed)
        x = rng.normal(size=(6, 4))
        y = rng.integers(0, NUM_CLASSES + 1, size=6)
        result = supervised_loss(params, x, y)
        numeric = numeric_grads(lambda p: supervised_loss(p, x, y).value, params)
        assert relative_error(result.grads, numeric) < 1e-4


def test_total_gradient_matches_finite_differences():
    """Test the gradient of L_s + lambda * L_u."""
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        params, weak_logits, strong_x, thresholds = mixed_batch(seed)
        x = rng.normal(size=(4, 4))
        y = rng.integers(0, NUM_CLASSES + 1, size=4)
        lam = 0.7
        sup = supervised_loss(params, x, y)
        unl = unlabeled_loss(
            params, weak_logits, strong_x, np.arange(8), thresholds, PolicyVariant.FLEXMATCH
        )
        grads = combine_grads(sup.grads, unl.grads, lam)

        def loss_fn(p):
            return total_loss(
                supervised_loss(p, x, y).value,
                consistency_loss(p, strong_x, unl.decisions).value,
                lam,
            )

        assert relative_error(grads, numeric_grads(loss_fn, params)) < 1e-4


def test_total_loss():
    """Test the weighted sum and its validation."""
    assert total_loss(0.5, 0.25, 1.0) == 0.75
    assert total_loss(0.5, 0.25, 0.0) == 0.5
    with pytest.raises(NumericalFailureError):
        total_loss(float("nan"), 0.1, 1.0)
    with pytest.raises(NumericalFailureError):
        total_loss(0.1, float("inf"), 1.0)


def test_combine_grads_with_zero_lambda():
    """Test that lambda=0 leaves the supervised gradient untouched."""
    gs = [np.array([1.0, 2.0])]
    gu = [np.array([5.0, -5.0])]
    assert_array_equal(combine_grads(gs, gu, 0.0)[0], gs[0])
    assert_allclose(combine_grads(gs, gu, 0.5)[0], [3.5, -0.5])
