"""Small MLP classifier with a (C+1)-way head, backprop, momentum SGD and the cosine schedule."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError, NumericalFailureError

ACTIVATIONS = ("relu", "tanh")


@dataclass
class ClassifierParams:
    """
    Layer weights and biases.

    ``weights[i]`` has shape (fan_out, fan_in); the last layer's fan_out is C+1.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], activation: str = "relu") -> "ClassifierParams":
        return cls(weights=list(arrays[0::2]), biases=list(arrays[1::2]), activation=activation)

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class OptimizerState:
    """Momentum buffers plus the schedule position."""

    buffers: list[np.ndarray]
    total_steps: int
    eta0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0
    step: int = 0

    @classmethod
    def for_params(
        cls,
        params: ClassifierParams,
        total_steps: int,
        eta0: float = 0.03,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ) -> "OptimizerState":
        return cls(
            buffers=[np.zeros_like(a) for a in params.arrays()],
            total_steps=total_steps,
            eta0=eta0,
            momentum=momentum,
            weight_decay=weight_decay,
        )


@dataclass
class ForwardCache:
    """Intermediate values kept for backpropagation."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def init_params(
    input_dim: int,
    hidden_widths: list[int],
    num_outputs: int,
    rng: np.random.Generator,
    activation: str = "relu",
) -> ClassifierParams:
    """Uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    if activation not in ACTIVATIONS:
        raise InvalidInputError(f"unknown activation {activation!r}")
    widths = [input_dim, *hidden_widths, num_outputs]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ClassifierParams(weights=weights, biases=biases, activation=activation)


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _activation_grad(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (pre > 0).astype(np.float64)
    return 1.0 - np.tanh(pre) ** 2


def softmax(logits) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward_with_cache(params: ClassifierParams, features) -> tuple[np.ndarray, ForwardCache]:
    """
    Forward pass keeping what backward needs.

    Raises:
        InvalidInputError: If the feature dimension does not match the first layer
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise InvalidInputError(
            f"expected features of dimension {params.input_dim}, got shape {np.shape(features)}"
        )
    cache = ForwardCache()
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        pre = h @ w.T + b
        if i == last:
            cache.logits = pre
        else:
            cache.pre_activations.append(pre)
            h = _activate(pre, params.activation)
    return (cache.logits[0] if single else cache.logits), cache


def forward(params: ClassifierParams, features) -> np.ndarray:
    """Logits of shape (N, C+1), or (C+1,) for a single feature vector."""
    logits, _ = forward_with_cache(params, features)
    return logits


def backward(
    params: ClassifierParams, cache: ForwardCache, dlogits: np.ndarray
) -> list[np.ndarray]:
    """
    Backpropagate a logit gradient.

    Args:
        params: Parameters used for the forward pass
        cache: Cache returned by :func:`forward_with_cache`
        dlogits: dLoss/dlogits, shape (N, C+1)

    Returns:
        Gradients in :meth:`ClassifierParams.arrays` order
    """
    grads_w: list[np.ndarray] = []
    grads_b: list[np.ndarray] = []
    delta = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w.append(delta.T @ cache.inputs[i])
        grads_b.append(delta.sum(axis=0))
        if i > 0:
            delta = (delta @ params.weights[i]) * _activation_grad(
                cache.pre_activations[i - 1], params.activation
            )
    grads = []
    for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
        grads.extend([gw, gb])
    return grads


def zero_grads(params: ClassifierParams) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in params.arrays()]


def cosine_lr(k: int, total_steps: int, eta0: float) -> float:
    """
    ``eta0 * cos(7 k pi / (16 K))``.

    Raises:
        InvalidInputError: If K <= 0 or k is outside [0, K]
    """
    if total_steps <= 0:
        raise InvalidInputError(f"total steps must be positive, got {total_steps}")
    if not 0 <= k <= total_steps:
        raise InvalidInputError(f"step {k} outside [0, {total_steps}]")
    return eta0 * math.cos(7.0 * k * math.pi / (16.0 * total_steps))


def sgd_step(
    params: ClassifierParams,
    grads: list[np.ndarray],
    state: OptimizerState,
    lr: Optional[float] = None,
) -> tuple[ClassifierParams, OptimizerState]:
    """
    One step of SGD with plain (non-Nesterov) momentum.

    ``b <- m*b + g``, ``param <- param - eta(k)*b``, ``k <- k+1``. The learning rate defaults
    to the cosine schedule at the current step.

    Raises:
        InvalidInputError: On shape mismatch
        NumericalFailureError: If a parameter becomes non-finite
    """
    arrays = params.arrays()
    if len(grads) != len(arrays) or len(state.buffers) != len(arrays):
        raise InvalidInputError("gradients, buffers and parameters differ in count")
    for a, g, buf in zip(arrays, grads, state.buffers):
        if a.shape != np.shape(g) or a.shape != buf.shape:
            raise InvalidInputError(f"shape mismatch: param {a.shape}, grad {np.shape(g)}")
    eta = cosine_lr(state.step, state.total_steps, state.eta0) if lr is None else lr
    new_arrays, new_buffers = [], []
    for a, g, buf in zip(arrays, grads, state.buffers):
        if state.weight_decay:
            g = g + state.weight_decay * a
        b = state.momentum * buf + g
        new_buffers.append(b)
        new_arrays.append(a - eta * b)
    new_params = ClassifierParams.from_arrays(new_arrays, params.activation)
    if not new_params.is_finite():
        raise NumericalFailureError(f"parameters diverged at step {state.step}")
    new_state = OptimizerState(
        buffers=new_buffers,
        total_steps=state.total_steps,
        eta0=state.eta0,
        momentum=state.momentum,
        weight_decay=state.weight_decay,
        step=state.step + 1,
    )
    return new_params, new_state
