"""
dlsim Models — Small differentiable classifiers with exact analytic gradients.

Two model kinds are supported:

    linear-softmax   logits = W·x + b
    mlp-1-hidden     logits = W2·act(W1·x + b1) + b2,  act ∈ {relu, tanh}

Parameter layout (row-major blocks, concatenated in this order):

    linear-softmax   W (C × d), b (C)
    mlp-1-hidden     W1 (h × d), b1 (h), W2 (C × h), b2 (C)

The layout is part of the contract: analytic gradient inversion and
state-override payload construction index into it.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Tuple, Union

import numpy as np

from .errors import DimensionError
from .numkit import ParamVec, Rng

logger = logging.getLogger("dlsim.models")


class ModelKind:
    LINEAR_SOFTMAX = "linear-softmax"
    MLP = "mlp-1-hidden"

    ALL = (LINEAR_SOFTMAX, MLP)


class Activation:
    RELU = "relu"
    TANH = "tanh"

    ALL = (RELU, TANH)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a classifier; the parameter count follows from it."""

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = Activation.TANH

    def __post_init__(self):
        if self.kind not in ModelKind.ALL:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be ≥ 1 and num_classes ≥ 2")
        if self.kind == ModelKind.MLP:
            if self.hidden_dim < 1:
                raise ValueError("mlp-1-hidden needs hidden_dim ≥ 1")
            if self.activation not in Activation.ALL:
                raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def param_count(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == ModelKind.LINEAR_SOFTMAX:
            return c * d + c
        return h * d + h + c * h + c

    def blocks(self) -> Tuple[Tuple[str, Tuple[int, ...], int], ...]:
        """(name, shape, fan_in) of every parameter block, in layout order."""
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == ModelKind.LINEAR_SOFTMAX:
            return (("W", (c, d), d), ("b", (c,), d))
        return (("W1", (h, d), d), ("b1", (h,), d), ("W2", (c, h), h), ("b2", (c,), h))

    def to_dict(self) -> Dict[str, object]:
        out = {"kind": self.kind, "input_dim": self.input_dim, "num_classes": self.num_classes}
        if self.kind == ModelKind.MLP:
            out["hidden_dim"] = self.hidden_dim
            out["activation"] = self.activation
        return out


@dataclass(frozen=True)
class Batch:
    """A mini-batch: inputs (batch × input_dim) and integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim == 1:
            inputs = inputs.reshape(1, -1)
        if inputs.shape[0] < 1:
            raise DimensionError("batch must contain at least one sample")
        if inputs.shape[0] != labels.shape[0]:
            raise DimensionError(
                f"batch has {inputs.shape[0]} inputs but {labels.shape[0]} labels"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


BatchSource = Union[Batch, Callable[[int], Batch]]


# ── Layout ───────────────────────────────────────────────────────────


def unpack(spec: ModelSpec, params: ParamVec) -> Dict[str, np.ndarray]:
    """Split a parameter vector into named block views."""
    if len(params) != spec.param_count:
        raise DimensionError(
            f"{spec.kind} expects {spec.param_count} parameters, got {len(params)}"
        )
    out = {}
    offset = 0
    flat = params.values
    for name, shape, _ in spec.blocks():
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return out


def pack(spec: ModelSpec, blocks: Dict[str, np.ndarray]) -> ParamVec:
    return ParamVec._adopt(
        np.concatenate([np.asarray(blocks[name], dtype=np.float64).reshape(-1)
                        for name, _, _ in spec.blocks()])
    )


def init_params(spec: ModelSpec, rng: Rng) -> ParamVec:
    """Per-coordinate uniform in [−1/√fan_in, 1/√fan_in], block by block."""
    gen = rng.generator()
    blocks = {}
    for name, shape, fan_in in spec.blocks():
        s = 1.0 / math.sqrt(fan_in)
        blocks[name] = gen.uniform(-s, s, size=shape)
    return pack(spec, blocks)


# ── Forward / Backward ───────────────────────────────────────────────


def _check_inputs(spec: ModelSpec, inputs: np.ndarray):
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise DimensionError(
            f"inputs must have shape (batch, {spec.input_dim}), got {inputs.shape}"
        )


def _activate(spec: ModelSpec, a: np.ndarray) -> np.ndarray:
    if spec.activation == Activation.RELU:
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _activate_grad(spec: ModelSpec, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if spec.activation == Activation.RELU:
        return (a > 0.0).astype(np.float64)
    return 1.0 - h * h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, params: ParamVec, inputs: np.ndarray) -> np.ndarray:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    _check_inputs(spec, inputs)
    p = unpack(spec, params)
    if spec.kind == ModelKind.LINEAR_SOFTMAX:
        return inputs @ p["W"].T + p["b"]
    hidden = _activate(spec, inputs @ p["W1"].T + p["b1"])
    return hidden @ p["W2"].T + p["b2"]


def predict_proba(spec: ModelSpec, params: ParamVec, inputs: np.ndarray) -> np.ndarray:
    """Softmax class probabilities, one row per input."""
    return np.exp(_log_softmax(logits(spec, params, inputs)))


def accuracy(spec: ModelSpec, params: ParamVec, inputs: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(logits(spec, params, inputs), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DimensionError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _loss_and_grad(
    spec: ModelSpec, params: ParamVec, inputs: np.ndarray, targets: np.ndarray, want_grad: bool
) -> Tuple[float, np.ndarray]:
    _check_inputs(spec, inputs)
    if targets.shape != (inputs.shape[0], spec.num_classes):
        raise DimensionError(f"targets must have shape ({inputs.shape[0]}, {spec.num_classes})")
    p = unpack(spec, params)
    n = inputs.shape[0]

    if spec.kind == ModelKind.LINEAR_SOFTMAX:
        z = inputs @ p["W"].T + p["b"]
    else:
        a = inputs @ p["W1"].T + p["b1"]
        h = _activate(spec, a)
        z = h @ p["W2"].T + p["b2"]

    log_probs = _log_softmax(z)
    loss = float(-np.sum(targets * log_probs) / n)
    if not want_grad:
        return loss, None

    dz = (np.exp(log_probs) * targets.sum(axis=1, keepdims=True) - targets) / n
    if spec.kind == ModelKind.LINEAR_SOFTMAX:
        grads = {"W": dz.T @ inputs, "b": dz.sum(axis=0)}
    else:
        dh = dz @ p["W2"]
        da = dh * _activate_grad(spec, a, h)
        grads = {
            "W1": da.T @ inputs,
            "b1": da.sum(axis=0),
            "W2": dz.T @ h,
            "b2": dz.sum(axis=0),
        }
    flat = np.concatenate([grads[name].reshape(-1) for name, _, _ in spec.blocks()])
    return loss, flat


def loss(spec: ModelSpec, params: ParamVec, batch: Batch) -> float:
    """Mean cross-entropy over the batch."""
    value, _ = _loss_and_grad(
        spec, params, batch.inputs, one_hot(batch.labels, spec.num_classes), want_grad=False
    )
    return value


def gradient(spec: ModelSpec, params: ParamVec, batch: Batch) -> ParamVec:
    """Exact gradient of :func:`loss` with respect to the parameters."""
    _, grad = _loss_and_grad(
        spec, params, batch.inputs, one_hot(batch.labels, spec.num_classes), want_grad=True
    )
    return ParamVec._adopt(grad)


def loss_and_gradient(spec: ModelSpec, params: ParamVec, batch: Batch) -> Tuple[float, ParamVec]:
    value, grad = _loss_and_grad(
        spec, params, batch.inputs, one_hot(batch.labels, spec.num_classes), want_grad=True
    )
    return value, ParamVec._adopt(grad)


def gradient_soft(
    spec: ModelSpec, params: ParamVec, inputs: np.ndarray, targets: np.ndarray
) -> np.ndarray:
    """Gradient for soft (probability-vector) targets; returns a raw array."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    _, grad = _loss_and_grad(spec, params, inputs, targets, want_grad=True)
    return grad


def gradient_soft_vjp(
    spec: ModelSpec, params: ParamVec, x: np.ndarray, y: np.ndarray, cotangent: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact ⟨cotangent, ∂g/∂x⟩ and ⟨cotangent, ∂g/∂y⟩ for the single-sample
    parameter gradient g = gradient_soft(spec, params, x, y).

    Writing g as blocks of r = S·p − y (S = Σy), the gradient is linear in
    the cotangent blocks G, so ⟨G, g⟩ = rᵀu for a per-model vector u and the
    input/target derivatives follow by one more backward pass.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    _check_inputs(spec, x.reshape(1, -1))
    G = unpack(spec, ParamVec(cotangent))
    p = unpack(spec, params)
    s_total = y.sum()

    if spec.kind == ModelKind.LINEAR_SOFTMAX:
        z = p["W"] @ x + p["b"]
    else:
        a = p["W1"] @ x + p["b1"]
        h = _activate(spec, a)
        z = p["W2"] @ h + p["b2"]
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    r = s_total * probs - y

    if spec.kind == ModelKind.LINEAR_SOFTMAX:
        u = G["W"] @ x + G["b"]
        ju = probs * u - probs * np.dot(probs, u)
        grad_x = p["W"].T @ (s_total * ju) + G["W"].T @ r
    else:
        s = _activate_grad(spec, a, h)
        s2 = np.zeros_like(a) if spec.activation == Activation.RELU else -2.0 * h * s
        m = G["W1"] @ x + G["b1"]
        q = p["W2"].T @ r
        u = G["W2"] @ h + G["b2"] + p["W2"] @ (s * m)
        ju = probs * u - probs * np.dot(probs, u)
        inner = s * (p["W2"].T @ (s_total * ju)) + s * (G["W2"].T @ r) + s2 * q * m
        grad_x = p["W1"].T @ inner + G["W1"].T @ (s * q)

    grad_y = np.dot(probs, u) - u
    return grad_x, grad_y


def finite_difference_gradient(
    spec: ModelSpec, params: ParamVec, batch: Batch, h: float = 1e-5
) -> ParamVec:
    """Central-difference estimate of :func:`gradient`; the test oracle."""
    base = np.array(params.values)
    out = np.empty_like(base)
    for i in range(base.shape[0]):
        orig = base[i]
        base[i] = orig + h
        up = loss(spec, ParamVec._adopt(base.copy()), batch)
        base[i] = orig - h
        down = loss(spec, ParamVec._adopt(base.copy()), batch)
        base[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return ParamVec._adopt(out)


# ── Optimization ─────────────────────────────────────────────────────


def _batch_at(source: BatchSource, step: int) -> Batch:
    return source(step) if callable(source) else source


def sgd_step(spec: ModelSpec, params: ParamVec, batch: BatchSource, lr: float, steps: int = 1) -> ParamVec:
    """
    Apply ``steps`` plain gradient steps and return the model update Θ^{t+1/2}.

    ``batch`` is either a fixed Batch or a sampler called with the step index,
    so multi-step rounds can draw a fresh batch per step.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if steps < 1:
        raise ValueError(f"steps must be ≥ 1, got {steps}")
    current = params
    for step in range(steps):
        g = gradient(spec, current, _batch_at(batch, step))
        current = ParamVec._adopt(current.values - lr * g.values)
    return current


def sgd_momentum_step(
    spec: ModelSpec,
    params: ParamVec,
    velocity: ParamVec,
    batch: BatchSource,
    lr: float,
    steps: int = 1,
    momentum: float = 0.9,
) -> Tuple[ParamVec, ParamVec]:
    """Heavy-ball SGD: v ← α·v + g; θ ← θ − lr·v. Returns (params, velocity)."""
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if steps < 1:
        raise ValueError(f"steps must be ≥ 1, got {steps}")
    current, vel = params, velocity
    for step in range(steps):
        g = gradient(spec, current, _batch_at(batch, step))
        vel = ParamVec._adopt(momentum * vel.values + g.values)
        current = ParamVec._adopt(current.values - lr * vel.values)
    return current, vel
