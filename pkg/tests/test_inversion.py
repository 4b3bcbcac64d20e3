"""Tests for dlsim gradient inversion"""

import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import numpy as np
import pytest

from dlsim.adversary_inversion import (
    InversionConfig, cosine_distance, dummy_init, infer_label, invert_gradient_analytic, invert_gradient_optim,
)
from dlsim.errors import PreconditionError, UninvertibleError
from dlsim.models import Batch, ModelSpec, gradient, init_params
from dlsim.numkit import ParamVec, Rng
from dlsim.testing import blob_task


def _instance(seed, d=4, c=3):
    gen = np.random.default_rng(seed)
    spec = ModelSpec(kind="linear-softmax", input_dim=d, num_classes=c)
    params = ParamVec(gen.normal(size=spec.param_count) * 0.5)
    x = gen.normal(size=d) * 2
    y = int(gen.integers(0, c))
    return spec, params, x, y


def test_analytic_round_trip():
    for seed in range(100):
        spec, params, x, y = _instance(seed)
        inv = invert_gradient_analytic(spec, gradient(spec, params, Batch(x, [y])))
        assert np.max(np.abs(inv.inputs - x)) < 1e-8
        assert inv.label == y


def test_analytic_scale_invariant():
    spec, params, x, y = _instance(7)
    g = gradient(spec, params, Batch(x, [y]))
    a = invert_gradient_analytic(spec, g)
    b = invert_gradient_analytic(spec, g * 3.5)
    assert np.max(np.abs(a.inputs - b.inputs)) < 1e-12
    assert a.label == b.label


def test_analytic_batch_two_is_a_mixture():
    spec = ModelSpec(kind="linear-softmax", input_dim=3, num_classes=2)
    params = ParamVec.zeros(spec.param_count)
    x1, x2 = np.array([1.0, 2.0, -1.0]), np.array([-3.0, 0.5, 2.0])
    inv = invert_gradient_analytic(spec, gradient(spec, params, Batch(np.vstack([x1, x2]), [0, 0])))
    assert np.max(np.abs(inv.inputs - x1)) > 1e-3
    assert np.max(np.abs(inv.inputs - x2)) > 1e-3


def test_analytic_preconditions():
    mlp = ModelSpec(kind="mlp-1-hidden", input_dim=2, num_classes=2, hidden_dim=3)
    with pytest.raises(PreconditionError):
        invert_gradient_analytic(mlp, ParamVec.zeros(mlp.param_count))
    spec = ModelSpec(kind="linear-softmax", input_dim=2, num_classes=2)
    with pytest.raises(UninvertibleError):
        invert_gradient_analytic(spec, ParamVec.zeros(spec.param_count))


def test_infer_label():
    spec, params, x, y = _instance(11)
    assert infer_label(spec, gradient(spec, params, Batch(x, [y]))) == y


def test_cosine_distance():
    a = np.array([1.0, 0.0])
    assert cosine_distance(a, a) == 0.0
    assert abs(cosine_distance(a, np.array([0.0, 2.0])) - 1.0) < 1e-15
    assert cosine_distance(a, np.zeros(2)) == 1.0


def test_optim_fixed_point_at_init():
    spec, params, _, y = _instance(5)
    rng = Rng(9)
    x0, _ = dummy_init(spec, rng)
    g = gradient(spec, params, Batch(x0, [y]))
    result = invert_gradient_optim(spec, params, g, rng, InversionConfig(iterations=20))
    assert result.trace[0] < 1e-12
    assert result.distance <= result.trace[0]
    assert np.max(np.abs(result.inputs - x0)) < 1e-6


def test_optim_improves_on_start():
    spec, params, x, y = _instance(2)
    g = gradient(spec, params, Batch(x, [y]))
    result = invert_gradient_optim(spec, params, g, Rng(4), InversionConfig(iterations=60))
    assert result.label == y
    assert result.distance < result.trace[0]
    assert result.iterations == len(result.trace) - 1


def test_optim_soft_label_mode():
    spec, params, x, y = _instance(3)
    g = gradient(spec, params, Batch(x, [y]))
    result = invert_gradient_optim(spec, params, g, Rng(1), InversionConfig(iterations=10), infer=False)
    assert result.soft_label.shape == (spec.num_classes,)
    assert abs(result.soft_label.sum() - 1.0) < 1e-12
    assert result.distance <= result.trace[0]


def test_optim_rejects_zero_iterations():
    spec, params, x, y = _instance(0)
    with pytest.raises(ValueError):
        invert_gradient_optim(spec, params, gradient(spec, params, Batch(x, [y])), Rng(0), InversionConfig(iterations=0))


def test_schedules():
    assert InversionConfig(iterations=800, schedule="step").milestones() == (300, 500, 700)
    assert InversionConfig(iterations=800).milestones() == ()
    step = InversionConfig(iterations=800, lr=0.1, schedule="step")
    assert step.lr_at(299) == 0.1 and abs(step.lr_at(300) - 0.01) < 1e-15
    cosine = InversionConfig(iterations=500, lr=0.05)
    assert cosine.lr_at(0) == 0.05
    assert abs(cosine.lr_at(250) - 0.025) < 1e-15
    assert cosine.lr_at(499) < 1e-5
    assert InversionConfig(schedule="constant").lr_at(400) == 0.05
    with pytest.raises(ValueError):
        InversionConfig(schedule="linear")


def test_optim_reconstructs_blob_samples():
    dataset, _ = blob_task(4, seed=0)
    spec = ModelSpec(kind="linear-softmax", input_dim=dataset.input_dim, num_classes=dataset.num_classes)
    params = init_params(spec, Rng(0).child("init"))
    for row in (0, 5, 17):
        x, y = dataset.inputs[row], int(dataset.labels[row])
        g = gradient(spec, params, Batch(x, [y]))
        result = invert_gradient_optim(spec, params, g, Rng(row).child("inversion"), InversionConfig(iterations=500, lr=0.05))
        assert result.label == y
        assert result.distance < 1e-4
        assert float(np.mean((result.inputs - x) ** 2)) < 1e-2


if __name__ == "__main__":
    for name_key, fn in list(globals().items()):
        if name_key.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"  PASS  {name_key}")
            except Exception as e:
                print(f"  FAIL  {name_key}: {e}")
