"""Tests for dlsim adversary (observation, MIA, gradient recovery, marginalization)"""

import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import math

import numpy as np
import pytest

from dlsim.adversary import (
    marginalize, marginalize_updates, mentr, mia_accuracy, recover_gradient,
    replay_aggregate, threshold_accuracy,
)
from dlsim.adversary_behaviors import PassiveBehavior
from dlsim.errors import CoverageError, DimensionError, MarginalizationError
from dlsim.models import Batch, ModelSpec
from dlsim.numkit import ParamVec
from dlsim.testing import run_rounds, small_world
from dlsim.topology import chain, complete, star, torus


def _history_world(topo, attacker, rounds=4, **kwargs):
    behavior = PassiveBehavior()
    world = small_world(topo, behaviors={attacker: behavior}, **kwargs)
    logs = run_rounds(world, rounds)
    return world, behavior.history, logs


# ── MIA ──


def test_mentr_examples():
    assert mentr([0.0, 1.0, 0.0], 1) < 1e-10
    assert abs(mentr([0.5, 0.5], 0) - math.log(2)) < 1e-12


def test_mentr_decreases_with_confidence():
    scores = [mentr([p, (1 - p) / 2, (1 - p) / 2], 0) for p in (0.2, 0.4, 0.6, 0.8, 0.95)]
    assert all(b < a for a, b in zip(scores, scores[1:]))


def test_threshold_accuracy_examples():
    assert threshold_accuracy([0.0] * 4, [1.0] * 4) == 0.5
    assert threshold_accuracy([0.3, 0.7, 0.1], [0.3, 0.7, 0.1]) == 0.0
    assert threshold_accuracy([0.1, 0.2], [0.3, 0.4]) == 0.5


def test_threshold_accuracy_monotone_invariance():
    gen = np.random.default_rng(0)
    m, o = gen.exponential(size=20), gen.exponential(size=20) * 1.5
    base = threshold_accuracy(m, o)
    assert threshold_accuracy(np.exp(m), np.exp(o)) == base
    assert threshold_accuracy(3 * m + 1, 3 * o + 1) == base


def test_threshold_accuracy_requires_matched_sets():
    with pytest.raises(DimensionError):
        threshold_accuracy([], [])
    with pytest.raises(DimensionError):
        threshold_accuracy([0.1, 0.2], [0.3])


def test_mia_no_signal_on_identical_sets():
    spec = ModelSpec(kind="linear-softmax", input_dim=2, num_classes=2)
    batch = Batch([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], [0, 1, 1])
    params = ParamVec(np.random.default_rng(3).normal(size=spec.param_count))
    assert mia_accuracy(spec, params, batch, batch) == 0.0


# ── Observation ──


def test_history_only_has_own_inbox():
    world, history, _ = _history_world(torus(3, 3), attacker=4, rounds=2)
    assert history.rounds == (0, 1)
    assert set(history.received[0]) == set(world.topology.peers(4))
    with pytest.raises(CoverageError):
        history.update(0, 0)


# ── Gradient recovery ──


def test_recover_gradient_star_center():
    world, history, logs = _history_world(star(5, center=0), attacker=0, rounds=4)
    for t in range(4):
        for v in range(1, 5):
            g = recover_gradient(history, v, t, world.lr.at(t), world.topology.neighbors(v))
            assert g.max_abs_diff(logs[t].gradients[v]) <= 1e-10


def test_recover_gradient_complete_and_torus():
    for topo, attacker in ((complete(4), 2), (torus(3, 3), 0)):
        world, history, logs = _history_world(topo, attacker=attacker, rounds=3, lr=0.2)
        for v in topo.peers(attacker):
            if not topo.covers(attacker, v):
                continue
            for t in range(3):
                g = recover_gradient(history, v, t, 0.2, topo.neighbors(v))
                assert g.max_abs_diff(logs[t].gradients[v]) <= 1e-10


def test_recover_gradient_zero_task():
    world, history, _ = _history_world(star(3), attacker=0, rounds=2, idle=True)
    g = recover_gradient(history, 1, 1, 0.1, world.topology.neighbors(1))
    assert g == ParamVec.zeros(world.spec.param_count)


def test_recover_gradient_multi_step_pseudo_gradient():
    world, history, logs = _history_world(star(3), attacker=0, rounds=2, local_steps=2)
    g = recover_gradient(history, 1, 1, 0.1, world.topology.neighbors(1), local_steps=2)
    assert g.max_abs_diff(logs[1].gradients[1]) > 1e-6


def test_recover_gradient_requires_coverage():
    world, history, _ = _history_world(chain(4), attacker=1, rounds=2)
    with pytest.raises(CoverageError):
        recover_gradient(history, 2, 1, 0.1, world.topology.neighbors(2))
    with pytest.raises(CoverageError):
        replay_aggregate(history, 2, 1, world.topology.neighbors(2))


# ── Marginalization ──


def test_marginalize_hand_case():
    assert marginalize_updates(ParamVec([2.0]), [ParamVec([1.0])]) == ParamVec([2.0])
    c = ParamVec([0.7, -1.2])
    assert marginalize_updates(c, [c, c, c]) == ParamVec([0.0, 0.0])


def test_marginalize_needs_three_neighbors():
    with pytest.raises(MarginalizationError):
        marginalize_updates(ParamVec([1.0]), [])
    _, history, _ = _history_world(chain(3), attacker=0, rounds=1)
    with pytest.raises(MarginalizationError):
        marginalize(history, 1, 0)


def test_marginalize_is_linear():
    _, history, _ = _history_world(torus(3, 3), attacker=4, rounds=2)
    victim = history.neighbors[0] if history.neighbors[0] != 4 else history.neighbors[1]
    plain = marginalize(history, victim, 1)
    scaled = marginalize(history.scaled(2.5), victim, 1)
    assert scaled.max_abs_diff(plain * 2.5) < 1e-10


if __name__ == "__main__":
    for name_key, fn in list(globals().items()):
        if name_key.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"  PASS  {name_key}")
            except Exception as e:
                print(f"  FAIL  {name_key}: {e}")
