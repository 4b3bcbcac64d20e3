"""Tests for dlsim harness, runner and CLI"""

import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import csv
import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from dlsim.cli import main
from dlsim.config import ExperimentConfig
from dlsim.errors import CoverageError, DataFormatError, PreconditionError
from dlsim.harness import (
    MANIFEST_FILE, REPORT_FILE, build_report, execute_run, load_manifest, read_rounds, run_attack,
)
from dlsim.protocol_runner import ROUNDS_FILE, RunStatus, consensus_trace, run_experiment
from dlsim.testing import config_dict


def _config(**overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(config_dict(**overrides))


def _tmp() -> Path:
    return Path(tempfile.mkdtemp())


def _read_csv(path: Path):
    return list(csv.DictReader(path.read_text(encoding="utf-8").splitlines()))


# ── Runs ──


def test_execute_run_writes_artifacts():
    out = _tmp() / "run"
    result = execute_run(_config(), out)
    assert (out / MANIFEST_FILE).exists() and (out / ROUNDS_FILE).exists() and (out / REPORT_FILE).exists()
    records = read_rounds(out)
    assert [r["round"] for r in records] == [0, 1, 2, 3]
    manifest = load_manifest(out)
    assert manifest["config_hash"] == _config().config_hash
    assert manifest["files"][ROUNDS_FILE] is not None
    assert result.status == RunStatus.COMPLETED


def test_rerun_is_byte_identical():
    a, b = _tmp(), _tmp()
    execute_run(_config(rounds=4), a)
    execute_run(_config(rounds=4), b)
    assert (a / ROUNDS_FILE).read_bytes() == (b / ROUNDS_FILE).read_bytes()


def test_zero_rounds_logs_initial_state():
    out = _tmp()
    execute_run(_config(rounds=0), out)
    records = read_rounds(out)
    assert len(records) == 1 and records[0]["round"] == 0


def test_record_updates_dumps_messages():
    out = _tmp()
    execute_run(_config(rounds=1, capture={"record_updates": True}), out)
    records = read_rounds(out)
    assert records[0].get("messages", []) == []
    assert len(records[1]["messages"]) == 12


def test_complete_dl_and_fl_reach_zero_consensus():
    config = _config(rounds=4)
    for engine in ("dpsgd", "fedavg"):
        trace = consensus_trace(run_experiment(config, engine=engine))
        assert np.all(trace[1:] == 0.0)


def test_early_stopping_on_flat_validation_loss():
    config = _config(
        rounds=10, lr_schedule={"milestones": [0], "gamma": 0.0},
        early_stopping={"enabled": True, "patience": 3},
    )
    result = run_experiment(config)
    assert result.status == RunStatus.EARLY_STOPPED
    assert result.rounds_run == 3


def test_early_stopping_disabled_without_holdout():
    config = _config(
        rounds=3, data={"n_samples": 200, "input_dim": 4, "num_classes": 3, "holdout_fraction": 0.0},
        early_stopping={"enabled": True, "patience": 1},
    )
    result = run_experiment(config)
    assert result.status == RunStatus.COMPLETED
    assert result.rounds_run == 3


def test_threads_do_not_change_results():
    a = run_experiment(_config(topology={"kind": "chain"}), threads=0)
    b = run_experiment(_config(topology={"kind": "chain"}), threads=3)
    assert [log.to_json_line() for log in a.logs] == [log.to_json_line() for log in b.logs]


# ── Attacks ──


def test_mia_passive_needs_capture():
    config = _config(adversary={"role": "passive", "attacker": 0, "victims": [1]})
    with pytest.raises(PreconditionError):
        run_attack(config, "mia-passive", _tmp())


def test_mia_passive_paired_runs_share_partition():
    out = _tmp()
    config = _config(
        rounds=2, capture={"record_updates": True},
        adversary={"role": "passive", "attacker": 0, "victims": [1, 2]},
    )
    outcome = run_attack(config, "mia-passive", out)
    assert len(outcome.report.rows) == 4
    assert load_manifest(out / "dpsgd")["partition_hash"] == load_manifest(out / "fedavg")["partition_hash"]
    curves = _read_csv(out / "mia-passive-curves.csv")
    assert set(curves[0]) == {"engine", "round", "victim", "gen_error", "mia", "consensus"}


def test_state_override_attack_controls_targets():
    config = _config(
        rounds=4, topology={"kind": "star", "center": 0}, schedule="rushing",
        adversary={"role": "state-override", "attacker": 0, "victims": [1, 2, 3]},
    )
    outcome = run_attack(config, "state-override", _tmp())
    assert len(outcome.report.rows) == 12
    assert all(r["control"] > 1 - 1e-6 for r in outcome.report.rows)
    assert all(r["max_abs_diff"] <= 1e-9 for r in outcome.report.rows)


def test_gradient_recovery_attack_with_inversion():
    config = _config(
        rounds=3, batch_size=1, topology={"kind": "star", "center": 0},
        adversary={"role": "passive", "attacker": 0, "victims": [1, 2]},
    )
    outcome = run_attack(config, "gradient-recovery", _tmp())
    assert outcome.report.summary["max_abs_error"] <= 1e-10
    for row in outcome.report.rows:
        if row["inversion_error"] is not None:
            assert row["inversion_error"] < 1e-6
            assert row["label_correct"] is True


def test_gradient_recovery_needs_coverage():
    config = _config(topology={"kind": "chain"}, adversary={"role": "passive", "attacker": 1, "victims": [2]})
    with pytest.raises(CoverageError):
        run_attack(config, "gradient-recovery", _tmp())


def _sa_config(drop_victim: bool) -> ExperimentConfig:
    return _config(
        n_users=6, rounds=2,
        secure_aggregation={"enabled": True, "threshold": 2},
        adversary={"role": "sa-colluders", "attacker": 0, "colluder": 1, "victims": [2], "drop_victim": drop_victim},
    )


def test_sa_evasion_drop_off_attack():
    outcome = run_attack(_sa_config(True), "sa-evasion", _tmp())
    assert outcome.report.summary["max_abs_error"] <= 1e-9


def test_sa_evasion_mismatched_neighbors():
    with pytest.raises(PreconditionError):
        run_attack(_sa_config(False), "sa-evasion", _tmp())


def test_influence_report_has_chain_coefficient():
    out = _tmp()
    run_attack(_config(n_users=5, rounds=4, topology={"kind": "chain"}), "influence", out)
    rows = _read_csv(out / "influence.csv")
    row = next(r for r in rows if r["t"] == "4" and r["source"] == "4")
    assert row["hops"] == "4"
    assert abs(float(row["coefficient"]) - 1.0 / 54.0) < 1e-12


def test_echo_attack_report():
    config = _config(rounds=3, adversary={"role": "echo", "attacker": 0, "victims": [1]})
    outcome = run_attack(config, "echo", _tmp())
    assert outcome.report.column("round") == [1, 2, 3]
    assert all(r["mia_passive"] is not None for r in outcome.report.rows)


def test_unknown_attack():
    with pytest.raises(PreconditionError):
        run_attack(_config(), "model-poisoning", _tmp())


# ── Reports ──


def test_report_requires_inputs():
    out = _tmp() / "tidy.csv"
    with pytest.raises(DataFormatError):
        build_report([], "tidy", out)
    assert not out.exists()


def test_report_tidy_and_figure():
    attack_dir = _tmp()
    config = _config(
        rounds=2, capture={"record_updates": True},
        adversary={"role": "passive", "attacker": 0, "victims": [1]},
    )
    run_attack(config, "mia-passive", attack_dir)
    tidy = _read_csv(build_report([attack_dir], "tidy", _tmp() / "tidy.csv"))
    assert {"run", "engine", "round", "victim", "metric", "value"} == set(tidy[0])
    assert any(r["metric"] == "rounds.consensus_distance" for r in tidy)
    figure = _read_csv(build_report([attack_dir], "figure", _tmp() / "figure.csv"))
    assert {r["engine"] for r in figure} == {"dpsgd", "fedavg"}
    gnuplot = build_report([attack_dir], "gnuplot", _tmp() / "figure.dat").read_text(encoding="utf-8")
    assert "# run=" in gnuplot


def test_report_schema_drift():
    a, b = _tmp() / "a", _tmp() / "b"
    a.mkdir()
    b.mkdir()
    (a / "scores.csv").write_text("round,mia\n1,0.1\n", encoding="utf-8")
    (b / "scores.csv").write_text("round,mia,extra\n1,0.1,2\n", encoding="utf-8")
    with pytest.raises(DataFormatError):
        build_report([a, b], "tidy", _tmp() / "out.csv")


# ── CLI ──


def _config_file(**overrides) -> Path:
    path = _tmp() / "experiment.json"
    path.write_text(json.dumps(config_dict(**overrides)), encoding="utf-8")
    return path


def test_cli_validate_ok(capsys):
    assert main(["validate", str(_config_file())]) == 0
    assert capsys.readouterr().out.startswith("OK ")


def test_cli_validate_reports_pointer(capsys):
    path = _tmp() / "bad.json"
    raw = config_dict()
    del raw["lr"]
    path.write_text(json.dumps(raw), encoding="utf-8")
    with pytest.raises(SystemExit) as info:
        main(["validate", str(path)])
    assert info.value.code == 2
    assert "/lr" in capsys.readouterr().err


def test_cli_run(capsys):
    out = _tmp() / "run"
    assert main(["run", str(_config_file(rounds=1)), "--out", str(out)]) == 0
    assert (out / ROUNDS_FILE).exists()
    assert "completed" in capsys.readouterr().out


def test_cli_attack_precondition_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["attack", str(_config_file()), "mia-passive", "--attacker", "0", "--victims", "1", "--out", str(_tmp())])
    assert info.value.code == 3


def test_cli_version(capsys):
    assert main(["version"]) == 0
    assert "dlsim v" in capsys.readouterr().out


if __name__ == "__main__":
    for name_key, fn in list(globals().items()):
        if name_key.startswith("test_") and callable(fn) and not fn.__code__.co_argcount:
            try:
                fn()
                print(f"  PASS  {name_key}")
            except Exception as e:
                print(f"  FAIL  {name_key}: {e}")
