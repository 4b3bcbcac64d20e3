"""Tests for dlsim config"""

import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import json
import tempfile
from pathlib import Path

import pytest

from dlsim.config import ExperimentConfig, canonical_json, load_config, threads_from_env, validate_config
from dlsim.errors import ConfigError, RunIOError
from dlsim.testing import config_dict


def _pointers(raw):
    return [pointer for pointer, _ in validate_config(raw)]


def test_valid_minimal_config():
    assert validate_config(config_dict()) == []
    config = ExperimentConfig.from_dict(config_dict())
    assert config.seed == 7 and config.engine == "dpsgd" and config.rounds == 3
    assert config.get("model")["kind"] == "linear-softmax"


def test_missing_lr_is_named():
    raw = config_dict()
    del raw["lr"]
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(raw)
    assert ("/lr", "required key missing") in info.value.problems
    assert "/lr" in str(info.value)
    assert info.value.exit_code == 2


def test_all_problems_reported_together():
    raw = config_dict(lr=-1, bogus=True, batch_size=0, engine="gossip")
    pointers = _pointers(raw)
    for expected in ("/lr", "/bogus", "/batch_size", "/engine"):
        assert expected in pointers


def test_topology_checks():
    assert "/topology" in _pointers(config_dict(topology={"kind": "torus", "rows": 3, "cols": 3}))
    assert "/topology/d" in _pointers(config_dict(n_users=5, topology={"kind": "regular", "d": 3}))
    assert "/topology/kind" in _pointers(config_dict(topology={"kind": "ring"}))


def test_adversary_checks():
    pointers = _pointers(config_dict(adversary={"role": "sa-colluders", "attacker": 0, "victims": [1, 2]}))
    assert "/adversary/colluder" in pointers
    assert "/adversary/victims" in pointers
    assert "/secure_aggregation/enabled" in pointers
    assert "/adversary/victims/0" in _pointers(config_dict(adversary={"role": "passive", "attacker": 1, "victims": [1]}))
    assert "/adversary/attacker" in _pointers(config_dict(adversary={"role": "echo", "attacker": 9, "victims": [1]}))


def test_hash_ignores_key_order_and_explicit_defaults():
    a = ExperimentConfig.from_dict(config_dict())
    raw = dict(reversed(list(config_dict(engine="dpsgd", momentum=0.0).items())))
    b = ExperimentConfig.from_dict(raw)
    assert a.config_hash == b.config_hash
    assert a.config_hash != ExperimentConfig.from_dict(config_dict(seed=8)).config_hash


def test_canonical_json():
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_with_overrides_merges_and_validates():
    config = ExperimentConfig.from_dict(config_dict())
    other = config.with_overrides(adversary={"role": "passive", "attacker": 0, "victims": [1]})
    assert other.get("adversary")["payload"]["source"] == "random"
    assert config.get("adversary")["role"] == "none"
    with pytest.raises(ConfigError):
        config.with_overrides(rounds=-1)


def test_sections_are_copies():
    config = ExperimentConfig.from_dict(config_dict())
    config.get("data")["n_samples"] = 1
    assert config.get("data")["n_samples"] == 200
    with pytest.raises(AttributeError):
        config.topology


def test_load_config_errors():
    with pytest.raises(RunIOError):
        load_config("/nonexistent/dlsim.json")
    path = Path(tempfile.mkdtemp()) / "broken.json"
    path.write_text("{\"seed\": 1,", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_load_config_round_trip():
    path = Path(tempfile.mkdtemp()) / "ok.json"
    path.write_text(json.dumps(config_dict()), encoding="utf-8")
    config = load_config(path)
    assert config.source == str(path)
    assert config.n_users == 4


def test_threads_from_env():
    assert threads_from_env({}) == 0
    assert threads_from_env({"DLSIM_THREADS": "4"}) == 4
    with pytest.raises(ConfigError):
        threads_from_env({"DLSIM_THREADS": "many"})


if __name__ == "__main__":
    for name_key, fn in list(globals().items()):
        if name_key.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"  PASS  {name_key}")
            except Exception as e:
                print(f"  FAIL  {name_key}: {e}")
