"""Acceptance checks: exact-algebra experiments and multi-seed attack directions run end to end"""

import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import tempfile
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import pytest

from dlsim.adversary_report import CURVE_COLUMNS, AttackReport, matched_buckets, passive_mia_experiment
from dlsim.config import ExperimentConfig
from dlsim.defenses import clip, self_centered_aggregate
from dlsim.harness import execute_run, run_attack
from dlsim.numkit import ParamVec, l2_norm, mean
from dlsim.protocol import EngineKind, dpsgd_round, fedavg_round
from dlsim.protocol_runner import ROUNDS_FILE, consensus_trace, prepare, run_experiment
from dlsim.testing import blob_task, config_dict, small_world
from dlsim.topology import complete


def _config(**overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(config_dict(**overrides))


def test_fedavg_is_complete_graph_dpsgd_for_200_rounds():
    task = blob_task(8, seed=11)
    dl = small_world(complete(8), seed=11, task=task, kind="mlp-1-hidden", lr=0.2)
    fl = small_world(complete(8), seed=11, task=task, kind="mlp-1-hidden", lr=0.2)
    worst = 0.0
    for t in range(200):
        dpsgd_round(dl, t)
        fedavg_round(fl, t)
        worst = max(worst, max(dl.nodes[v].params.max_abs_diff(fl.nodes[v].params) for v in range(8)))
    assert worst < 1e-9


def test_torus_consensus_shrinks_after_training_stops():
    config = _config(
        n_users=36, rounds=12, topology={"kind": "torus", "rows": 6, "cols": 6},
        data={"n_samples": 900, "input_dim": 4, "num_classes": 3},
        lr_schedule={"milestones": [3], "gamma": 0.0},
    )
    trace = consensus_trace(run_experiment(config))
    frozen = trace[3:]
    assert frozen[0] > 0.0
    assert np.all(np.diff(frozen) <= 1e-12 * frozen[0])


def test_gradient_recovery_exact_for_50_rounds():
    config = _config(
        n_users=5, rounds=50, topology={"kind": "star", "center": 0},
        adversary={"role": "passive", "attacker": 0, "victims": [1, 2, 3, 4]},
    )
    outcome = run_attack(config, "gradient-recovery", Path(tempfile.mkdtemp()))
    assert len(outcome.report.rows) == 200
    assert outcome.report.summary["max_abs_error"] <= 1e-10


def test_state_override_three_victims_rushing():
    config = _config(
        rounds=20, topology={"kind": "star", "center": 0}, schedule="rushing",
        adversary={"role": "state-override", "attacker": 0, "victims": [1, 2, 3]},
    )
    outcome = run_attack(config, "state-override", Path(tempfile.mkdtemp()))
    assert len(outcome.report.rows) == 60
    assert max(outcome.report.column("max_abs_diff")) <= 1e-9


def test_self_centered_clipping_limits_on_random_inputs():
    gen = np.random.default_rng(5)
    for _ in range(10_000):
        x = ParamVec(gen.normal(size=6) * gen.uniform(0, 20))
        tau = float(gen.uniform(0, 5))
        assert l2_norm(clip(x, tau)) <= tau * (1 + 1e-12)
    for _ in range(200):
        own = ParamVec(gen.normal(size=6))
        received = [ParamVec(gen.normal(size=6) * 3) for _ in range(int(gen.integers(1, 6)))]
        assert self_centered_aggregate(own, received, 0.0) is own
        wide = self_centered_aggregate(own, received, 1e6)
        assert wide.max_abs_diff(mean([own] + received)) <= 1e-9


def test_rounds_log_is_byte_identical_across_thread_counts():
    config = _config(rounds=5, n_users=6, topology={"kind": "chain"})
    dirs = [Path(tempfile.mkdtemp()) for _ in range(3)]
    for out, threads in zip(dirs, (0, 4, 4)):
        execute_run(config, out, threads)
    first = (dirs[0] / ROUNDS_FILE).read_bytes()
    assert all((out / ROUNDS_FILE).read_bytes() == first for out in dirs[1:])


# ── Desk-scale attack directions (8 seeds, torus 6×6) ──

SEEDS = range(8)
TORUS = {"kind": "torus", "rows": 6, "cols": 6}
ATTACKER = 0
TORUS_NEIGHBORS = [1, 5, 6, 30]


def _torus_config(seed: int, rounds: int, **overrides) -> ExperimentConfig:
    base = dict(
        seed=seed, n_users=36, rounds=rounds, topology=TORUS, lr=0.02, batch_size=10,
        data={"n_samples": 450, "input_dim": 32, "num_classes": 4, "spread": 1.5},
    )
    base.update(overrides)
    return _config(**base)


@lru_cache(maxsize=None)
def _echo_rows(seed: int, tau: Optional[float] = None):
    config = _torus_config(
        seed, 150,
        adversary={"role": "echo", "attacker": ATTACKER, "victims": [1], "echo_source": "received"},
        defense={"clipping": None if tau is None else {"tau": tau}, "noise": None},
    )
    return run_attack(config, "echo", Path(tempfile.mkdtemp())).report.rows


def _late_mean(rows, key: str, start: int = 100) -> float:
    return float(np.mean([r[key] for r in rows if r["round"] >= start]))


@pytest.mark.slow
def test_received_updates_leak_more_than_fl_global_at_matched_generalization():
    curves = AttackReport("mia-passive-curves", CURVE_COLUMNS)
    for seed in SEEDS:
        config = _torus_config(
            seed, 60, lr=0.03, batch_size=12,
            data={"n_samples": 540, "input_dim": 16, "num_classes": 4, "spread": 2.0},
            adversary={"role": "passive", "attacker": ATTACKER, "victims": TORUS_NEIGHBORS},
        )
        experiment = prepare(config)
        dl = run_experiment(config, engine=EngineKind.DPSGD, experiment=experiment)
        fl = run_experiment(config, engine=EngineKind.FEDAVG, experiment=experiment)
        _, seed_curves = passive_mia_experiment(
            dl.world, dl.logs, ATTACKER, TORUS_NEIGHBORS, experiment.rng, fl_logs=fl.logs,
        )
        curves.rows.extend(seed_curves.rows)
    buckets = matched_buckets(curves)
    assert buckets
    assert all(b["dpsgd"] >= b["fedavg"] for b in buckets)
    strict = sum(b["dpsgd"] > b["fedavg"] for b in buckets)
    assert strict >= 0.7 * len(buckets)


@pytest.mark.slow
def test_echo_overfits_the_victim_by_round_150():
    finals = [_echo_rows(seed)[-1] for seed in SEEDS]
    assert all(r["round"] == 150 for r in finals)
    victim = float(np.mean([r["victim_gen_error"] for r in finals]))
    others = float(np.mean([r["others_gen_error"] for r in finals]))
    assert others > 0.0
    assert victim > 2.0 * others


@pytest.mark.slow
def test_echo_mia_beats_passive_on_paired_seeds():
    echo = [_late_mean(_echo_rows(seed), "mia_echo") for seed in SEEDS]
    passive = [_late_mean(_echo_rows(seed), "mia_passive") for seed in SEEDS]
    assert np.mean(echo) >= np.mean(passive)


@pytest.mark.slow
def test_self_centered_clipping_amplifies_echo():
    clipped = [_late_mean(_echo_rows(seed, 0.05), "mia_echo", start=50) for seed in SEEDS]
    plain = [_late_mean(_echo_rows(seed), "mia_echo", start=50) for seed in SEEDS]
    assert np.mean(clipped) >= np.mean(plain)


if __name__ == "__main__":
    for name_key, fn in list(globals().items()):
        if name_key.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"  PASS  {name_key}")
            except Exception as e:
                print(f"  FAIL  {name_key}: {e}")
