"""
dlsim Adversary — Gradient inversion.

Two reconstructions of a training sample from a recovered gradient:

    invert_gradient_analytic   linear-softmax, batch 1: the weight-row
                               gradient divided by the bias gradient is the
                               input itself; the negative bias entry is the label
    invert_gradient_optim      any model: Adam on a dummy input (and a soft
                               label when the label is not inferred) minimizing
                               1 − cos(∇L(x̂, ŷ), g)

The cost gradient is exact: the cosine cotangent is pulled back through
the model's parameter gradient by models.gradient_soft_vjp. Adam with a
cosine-annealed step does the search; L-BFGS polishes the best iterate.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .errors import PreconditionError, UninvertibleError
from .models import ModelKind, ModelSpec, gradient_soft, gradient_soft_vjp, one_hot
from .numkit import ParamVec, Rng

logger = logging.getLogger("dlsim.adversary.inversion")

BIAS_EPS = 1e-9


# ── Analytic ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class AnalyticInversion:
    inputs: np.ndarray
    label: int
    row: int


def infer_label(spec: ModelSpec, grad: ParamVec) -> int:
    """iDLG: for batch 1 the output-bias gradient is p − one-hot, negative only at the label."""
    bias = grad.values[-spec.num_classes:]
    return int(np.argmin(bias))


def invert_gradient_analytic(spec: ModelSpec, grad: ParamVec) -> AnalyticInversion:
    """Exact input and label behind a batch-1 linear-softmax gradient."""
    if spec.kind != ModelKind.LINEAR_SOFTMAX:
        raise PreconditionError(f"analytic inversion needs a linear-softmax model, got {spec.kind}")
    if len(grad) != spec.param_count:
        raise PreconditionError(f"gradient has {len(grad)} entries, model has {spec.param_count}")
    c, d = spec.num_classes, spec.input_dim
    g_w = grad.values[: c * d].reshape(c, d)
    g_b = grad.values[c * d:]
    magnitude = np.abs(g_b)
    if not np.any(magnitude > BIAS_EPS):
        raise UninvertibleError("uninvertible: every bias gradient is ≈ 0 (sample is perfectly fit)")
    k = int(np.argmax(magnitude))
    return AnalyticInversion(inputs=g_w[k] / g_b[k], label=int(np.argmin(g_b)), row=k)


# ── Optimization ─────────────────────────────────────────────────────


@dataclass
class InversionConfig:
    """
    Optimizer settings for :func:`invert_gradient_optim`.

    ``schedule`` is "cosine" (anneal from ``lr`` towards 0 over the budget),
    "step" (×0.1 at 3/8, 5/8 and 7/8 of the budget) or "constant".
    """

    iterations: int = 500
    lr: float = 0.05
    schedule: str = "cosine"
    polish_iterations: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.schedule not in ("cosine", "step", "constant"):
            raise ValueError(f"unknown inversion schedule {self.schedule!r}")

    def milestones(self) -> Tuple[int, ...]:
        n = self.iterations
        return (int(n * 3 / 8), int(n * 5 / 8), int(n * 7 / 8)) if self.schedule == "step" else ()

    def lr_at(self, it: int) -> float:
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * it / self.iterations))
        return self.lr * 0.1 ** sum(1 for m in self.milestones() if m <= it)


@dataclass
class OptimInversion:
    inputs: np.ndarray
    soft_label: np.ndarray
    label: int
    distance: float
    iterations: int
    trace: list = field(default_factory=list)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def dummy_init(spec: ModelSpec, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    """Starting point (x̂, label logits) drawn from ``rng``; x̂ ~ N(0, 1)."""
    gen = rng.generator()
    return gen.normal(size=spec.input_dim), gen.normal(size=spec.num_classes)


class _Adam:
    def __init__(self, size: int, cfg: InversionConfig):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        cfg = self.cfg
        self.t += 1
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad * grad
        m_hat = self.m / (1 - cfg.beta1 ** self.t)
        v_hat = self.v / (1 - cfg.beta2 ** self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def _cosine_cotangent(g: np.ndarray, target: np.ndarray) -> np.ndarray:
    """∂(1 − cos(g, target))/∂g."""
    ng, nt = np.linalg.norm(g), np.linalg.norm(target)
    if ng == 0.0 or nt == 0.0:
        return np.zeros_like(g)
    return -target / (ng * nt) + (np.dot(g, target) / (ng ** 3 * nt)) * g


def invert_gradient_optim(
    spec: ModelSpec,
    params: ParamVec,
    grad: ParamVec,
    rng: Rng,
    config: Optional[InversionConfig] = None,
    infer: bool = True,
) -> OptimInversion:
    """
    Reconstruct one sample whose gradient at ``params`` matches ``grad`` in direction.

    With ``infer`` the label is fixed to the iDLG guess and only the input is
    optimized; otherwise a soft label (softmax of free logits) is optimized too.
    Adam runs for ``config.iterations`` steps, then L-BFGS polishes the best
    iterate for up to ``config.polish_iterations`` more. Returns the best
    iterate seen, including iteration 0.
    """
    cfg = config or InversionConfig()
    if cfg.iterations < 1:
        raise ValueError(f"iterations must be ≥ 1, got {cfg.iterations}")
    target = grad.values
    d, c = spec.input_dim, spec.num_classes
    x0, logits0 = dummy_init(spec, rng)

    fixed_label = infer_label(spec, grad) if infer else None
    if fixed_label is not None:
        theta = x0.copy()
        label_target = one_hot(np.array([fixed_label]), c)[0]
    else:
        theta = np.concatenate([x0, logits0])

    def split(vec: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if fixed_label is not None:
            return vec, label_target
        return vec[:d], _softmax(vec[d:])

    def cost(vec: np.ndarray) -> float:
        x, y = split(vec)
        return cosine_distance(gradient_soft(spec, params, x, y), target)

    def cost_and_grad(vec: np.ndarray) -> Tuple[float, np.ndarray]:
        x, y = split(vec)
        g = gradient_soft(spec, params, x, y)
        grad_x, grad_y = gradient_soft_vjp(spec, params, x, y, _cosine_cotangent(g, target))
        if fixed_label is not None:
            return cosine_distance(g, target), grad_x
        grad_logits = y * (grad_y - np.dot(y, grad_y))
        return cosine_distance(g, target), np.concatenate([grad_x, grad_logits])

    adam = _Adam(theta.shape[0], cfg)
    best_theta, best = theta.copy(), cost(theta)
    trace = [best]
    for it in range(cfg.iterations):
        if best == 0.0:
            break
        _, step_grad = cost_and_grad(theta)
        theta = adam.step(theta, step_grad, cfg.lr_at(it))
        current = cost(theta)
        trace.append(current)
        if math.isfinite(current) and current < best:
            best, best_theta = current, theta.copy()
        if (it + 1) % 100 == 0:
            logger.debug(f"Inversion it {it + 1}: cosine distance {current:.3e}")

    if cfg.polish_iterations > 0 and best > 0.0:
        polished = minimize(
            cost_and_grad, best_theta, jac=True, method="L-BFGS-B",
            options={"maxiter": cfg.polish_iterations, "gtol": 1e-14, "ftol": 1e-16},
        )
        current = cost(polished.x)
        trace.append(current)
        if math.isfinite(current) and current < best:
            best, best_theta = current, np.array(polished.x)
        logger.debug(f"Inversion polish: {polished.nit} L-BFGS steps, cosine distance {best:.3e}")

    x, y = split(best_theta)
    label = fixed_label if fixed_label is not None else int(np.argmax(y))
    return OptimInversion(
        inputs=np.array(x), soft_label=np.array(y), label=label,
        distance=best, iterations=len(trace) - 1, trace=trace,
    )
