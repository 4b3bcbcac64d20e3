"""
dlsim Config — Experiment configuration: schema, defaults and canonical hashing.

An experiment is described by one JSON document. Loading validates the
whole document and reports every problem at once, each with the JSON
pointer of the offending value:

    config = load_config("torus36.json")
    config.seed, config.n_users, config.get("topology")
    config.config_hash          # stable under key reordering

Defaults are filled in before hashing, so a config that spells out a default
and one that omits it hash the same.
"""

import copy
import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .errors import ConfigError, RunIOError

logger = logging.getLogger("dlsim.config")

Problem = Tuple[str, str]

THREADS_ENV = "DLSIM_THREADS"

REQUIRED = ("seed", "n_users", "topology", "lr")

DEFAULTS: Dict[str, Any] = {
    "model": {"kind": "linear-softmax", "hidden_dim": 16, "activation": "tanh"},
    "data": {
        "source": "blobs",
        "n_samples": 1200,
        "input_dim": 8,
        "num_classes": 4,
        "spread": 1.0,
        "radius": 3.0,
        "holdout_fraction": 0.2,
    },
    "engine": "dpsgd",
    "lr_schedule": {"milestones": [], "gamma": 0.1},
    "momentum": 0.0,
    "batch_size": 32,
    "local_steps": 1,
    "rounds": 100,
    "early_stopping": {"enabled": True, "patience": 3},
    "schedule": "synchronous",
    "adversary": {
        "role": "none",
        "victims": [],
        "drop_victim": False,
        "echo_source": "marginalized",
        "payload": {"source": "random", "scale": 5.0},
    },
    "defense": {"clipping": None, "noise": None},
    "secure_aggregation": {"enabled": False, "threshold": 2, "mask_scale": 10.0},
    "capture": {"record_updates": False},
}

SECTION_KEYS = {
    "model": {"kind", "hidden_dim", "activation"},
    "data": {"source", "n_samples", "input_dim", "num_classes", "spread", "radius", "path", "holdout_fraction"},
    "topology": {"kind", "n", "rows", "cols", "d", "center", "path"},
    "lr_schedule": {"milestones", "gamma"},
    "early_stopping": {"enabled", "patience"},
    "adversary": {"role", "attacker", "victims", "colluder", "drop_victim", "echo_source", "payload"},
    "defense": {"clipping", "noise"},
    "secure_aggregation": {"enabled", "threshold", "mask_scale"},
    "capture": {"record_updates"},
}
TOP_KEYS = set(REQUIRED) | set(DEFAULTS)

MODEL_KINDS = ("linear-softmax", "mlp-1-hidden")
ACTIVATIONS = ("relu", "tanh")
DATA_SOURCES = ("blobs", "csv")
TOPOLOGY_KINDS = ("chain", "torus", "regular", "expander", "complete", "star", "edge-list")
ENGINES = ("dpsgd", "fedavg")
SCHEDULES = ("synchronous", "rushing")
ROLES = ("none", "passive", "echo", "state-override", "sa-colluders")
ECHO_SOURCES = ("marginalized", "received")
PAYLOAD_SOURCES = ("random", "zeros", "initial")


# ── Normalization ────────────────────────────────────────────────────


def _merge(defaults: Dict[str, Any], given: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def normalize(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Raw config with every default filled in."""
    return _merge(DEFAULTS, raw)


def canonical_json(config: Dict[str, Any]) -> str:
    """Sorted keys, no insignificant whitespace."""
    return json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(text: str) -> str:
    """Git blob hash of ``text``."""
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ── Validation ───────────────────────────────────────────────────────


class _Checker:
    def __init__(self):
        self.problems: List[Problem] = []

    def fail(self, pointer: str, message: str):
        self.problems.append((pointer, message))

    def is_int(self, pointer: str, value: Any, minimum: Optional[int] = None) -> bool:
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(pointer, f"expected an integer, got {json.dumps(value)}")
            return False
        if minimum is not None and value < minimum:
            self.fail(pointer, f"must be ≥ {minimum}, got {value}")
            return False
        return True

    def is_number(
        self, pointer: str, value: Any, minimum: Optional[float] = None,
        exclusive: bool = False, below: Optional[float] = None,
    ) -> bool:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            self.fail(pointer, f"expected a finite number, got {json.dumps(value)}")
            return False
        if minimum is not None and (value < minimum or (exclusive and value == minimum)):
            self.fail(pointer, f"must be {'>' if exclusive else '≥'} {minimum}, got {value}")
            return False
        if below is not None and value >= below:
            self.fail(pointer, f"must be < {below}, got {value}")
            return False
        return True

    def is_bool(self, pointer: str, value: Any) -> bool:
        if not isinstance(value, bool):
            self.fail(pointer, f"expected true or false, got {json.dumps(value)}")
            return False
        return True

    def is_choice(self, pointer: str, value: Any, choices: Tuple[str, ...]) -> bool:
        if value not in choices:
            self.fail(pointer, f"must be one of {', '.join(choices)}; got {json.dumps(value)}")
            return False
        return True

    def is_object(self, pointer: str, value: Any, allowed: Optional[set] = None) -> bool:
        if not isinstance(value, dict):
            self.fail(pointer, "expected an object")
            return False
        for key in sorted(set(value) - (allowed or set(value))):
            self.fail(f"{pointer}/{key}", "unknown key")
        return True

    def in_range(self, pointer: str, value: Any, n: Optional[int]) -> bool:
        if not self.is_int(pointer, value, 0):
            return False
        if n is not None and value >= n:
            self.fail(pointer, f"user id {value} out of range for n_users={n}")
            return False
        return True


def validate_config(raw: Any) -> List[Problem]:
    """Every schema problem of ``raw`` as (json_pointer, message), in document order."""
    c = _Checker()
    if not isinstance(raw, dict):
        return [("", "config must be a JSON object")]
    for key in REQUIRED:
        if key not in raw:
            c.fail(f"/{key}", "required key missing")
    for key in sorted(set(raw) - TOP_KEYS):
        c.fail(f"/{key}", "unknown key")
    for section, allowed in SECTION_KEYS.items():
        if section in raw and raw[section] is not None:
            c.is_object(f"/{section}", raw[section], allowed)
    if c.problems and any(msg == "expected an object" for _, msg in c.problems):
        return c.problems

    cfg = normalize(raw)
    if "seed" in raw:
        c.is_int("/seed", cfg["seed"], 0)
    n = None
    if "n_users" in raw and c.is_int("/n_users", cfg["n_users"], 2):
        n = cfg["n_users"]
    if "lr" in raw:
        c.is_number("/lr", cfg["lr"], 0.0, exclusive=True)

    model = cfg["model"]
    c.is_choice("/model/kind", model["kind"], MODEL_KINDS)
    c.is_int("/model/hidden_dim", model["hidden_dim"], 1)
    c.is_choice("/model/activation", model["activation"], ACTIVATIONS)

    data = cfg["data"]
    if c.is_choice("/data/source", data["source"], DATA_SOURCES):
        if data["source"] == "csv":
            if not isinstance(data.get("path"), str):
                c.fail("/data/path", "required for source csv")
        else:
            c.is_int("/data/n_samples", data["n_samples"], 2)
            c.is_int("/data/input_dim", data["input_dim"], 1)
            c.is_int("/data/num_classes", data["num_classes"], 2)
            c.is_number("/data/spread", data["spread"], 0.0, exclusive=True)
            c.is_number("/data/radius", data["radius"], 0.0, exclusive=True)
    c.is_number("/data/holdout_fraction", data["holdout_fraction"], 0.0, below=1.0)

    if "topology" in raw:
        _validate_topology(c, cfg["topology"], n)

    c.is_choice("/engine", cfg["engine"], ENGINES)
    schedule = cfg["lr_schedule"]
    if isinstance(schedule["milestones"], list):
        for i, m in enumerate(schedule["milestones"]):
            c.is_int(f"/lr_schedule/milestones/{i}", m, 0)
    else:
        c.fail("/lr_schedule/milestones", "expected a list of round indices")
    c.is_number("/lr_schedule/gamma", schedule["gamma"], 0.0)
    c.is_number("/momentum", cfg["momentum"], 0.0, below=1.0)
    c.is_int("/batch_size", cfg["batch_size"], 1)
    c.is_int("/local_steps", cfg["local_steps"], 1)
    c.is_int("/rounds", cfg["rounds"], 0)
    c.is_bool("/early_stopping/enabled", cfg["early_stopping"]["enabled"])
    c.is_int("/early_stopping/patience", cfg["early_stopping"]["patience"], 1)
    c.is_choice("/schedule", cfg["schedule"], SCHEDULES)

    _validate_adversary(c, cfg, n)

    defense = cfg["defense"] or {}
    clipping, noise = defense.get("clipping"), defense.get("noise")
    if clipping is not None and c.is_object("/defense/clipping", clipping, {"tau"}):
        if "tau" not in clipping:
            c.fail("/defense/clipping/tau", "required key missing")
        else:
            c.is_number("/defense/clipping/tau", clipping["tau"], 0.0)
    if noise is not None and c.is_object("/defense/noise", noise, {"sigma"}):
        if "sigma" not in noise:
            c.fail("/defense/noise/sigma", "required key missing")
        else:
            c.is_number("/defense/noise/sigma", noise["sigma"], 0.0)

    sa = cfg["secure_aggregation"]
    c.is_bool("/secure_aggregation/enabled", sa["enabled"])
    c.is_int("/secure_aggregation/threshold", sa["threshold"], 1)
    c.is_number("/secure_aggregation/mask_scale", sa["mask_scale"], 0.0, exclusive=True)
    c.is_bool("/capture/record_updates", cfg["capture"]["record_updates"])
    return c.problems


def _validate_topology(c: _Checker, topo: Any, n: Optional[int]):
    if not isinstance(topo, dict):
        return
    kind = topo.get("kind")
    if not c.is_choice("/topology/kind", kind, TOPOLOGY_KINDS):
        return
    if "n" in topo and c.is_int("/topology/n", topo["n"], 1) and n is not None and topo["n"] != n:
        c.fail("/topology/n", f"topology has {topo['n']} users but n_users is {n}")
    if kind == "torus":
        ok = all(
            key in topo and c.is_int(f"/topology/{key}", topo[key], 3) for key in ("rows", "cols")
        )
        for key in ("rows", "cols"):
            if key not in topo:
                c.fail(f"/topology/{key}", "required for kind torus")
        if ok and n is not None and topo["rows"] * topo["cols"] != n:
            c.fail("/topology", f"torus {topo['rows']}×{topo['cols']} has {topo['rows'] * topo['cols']} users, n_users is {n}")
    elif kind == "regular":
        if "d" not in topo:
            c.fail("/topology/d", "required for kind regular")
        elif c.is_int("/topology/d", topo["d"], 2) and n is not None:
            if topo["d"] >= n:
                c.fail("/topology/d", f"must be < n_users ({n})")
            elif (n * topo["d"]) % 2:
                c.fail("/topology/d", f"n_users·d = {n * topo['d']} must be even")
    elif kind == "star":
        if "center" in topo:
            c.in_range("/topology/center", topo["center"], n)
    elif kind == "edge-list":
        if not isinstance(topo.get("path"), str):
            c.fail("/topology/path", "required for kind edge-list")


def _validate_adversary(c: _Checker, cfg: Dict[str, Any], n: Optional[int]):
    adv = cfg["adversary"]
    if not c.is_choice("/adversary/role", adv["role"], ROLES):
        return
    c.is_bool("/adversary/drop_victim", adv["drop_victim"])
    c.is_choice("/adversary/echo_source", adv["echo_source"], ECHO_SOURCES)
    payload = adv["payload"]
    if c.is_object("/adversary/payload", payload, {"source", "scale"}):
        c.is_choice("/adversary/payload/source", payload.get("source"), PAYLOAD_SOURCES)
        c.is_number("/adversary/payload/scale", payload.get("scale"), 0.0)
    if adv["role"] == "none":
        return

    attacker = adv.get("attacker")
    if attacker is None:
        c.fail("/adversary/attacker", f"required for role {adv['role']}")
    else:
        c.in_range("/adversary/attacker", attacker, n)
    victims = adv["victims"]
    if not isinstance(victims, list) or not victims:
        c.fail("/adversary/victims", "expected a non-empty list of user ids")
    else:
        for i, v in enumerate(victims):
            if c.in_range(f"/adversary/victims/{i}", v, n) and v == attacker:
                c.fail(f"/adversary/victims/{i}", "the attacker cannot be its own victim")
        if len(set(victims)) != len(victims):
            c.fail("/adversary/victims", "duplicate victim ids")
    if adv["role"] in ("echo", "sa-colluders") and isinstance(victims, list) and len(victims) > 1:
        c.fail("/adversary/victims", f"role {adv['role']} takes exactly one victim")
    if adv["role"] == "sa-colluders":
        colluder = adv.get("colluder")
        if colluder is None:
            c.fail("/adversary/colluder", "required for role sa-colluders")
        elif c.in_range("/adversary/colluder", colluder, n) and colluder == attacker:
            c.fail("/adversary/colluder", "colluder must differ from attacker")
        if not cfg["secure_aggregation"].get("enabled"):
            c.fail("/secure_aggregation/enabled", "role sa-colluders needs secure aggregation enabled")
    if adv["role"] in ("echo", "state-override", "sa-colluders") and cfg["engine"] != "dpsgd":
        c.fail("/engine", f"role {adv['role']} runs on the dpsgd engine only")


# ── ExperimentConfig ─────────────────────────────────────────────────


class ExperimentConfig:
    """
    A validated, default-filled experiment configuration.

    Read access goes through attributes for the scalar settings and
    :meth:`get` for sections.
    """

    def __init__(self, data: Dict[str, Any], source: Optional[str] = None):
        self._data = data
        self.source = source

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], source: Optional[str] = None) -> "ExperimentConfig":
        problems = validate_config(raw)
        if problems:
            raise ConfigError(problems)
        return cls(normalize(raw), source=source)

    def get(self, key: str, default: Any = None) -> Any:
        return copy.deepcopy(self._data.get(key, default))

    def __getitem__(self, key: str) -> Any:
        return copy.deepcopy(self._data[key])

    def __getattr__(self, key: str) -> Any:
        data = self.__dict__.get("_data")
        if data is not None and key in data and not isinstance(data[key], dict):
            return data[key]
        raise AttributeError(key)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Validated copy with top-level keys replaced (e.g. ``engine="fedavg"``)."""
        return ExperimentConfig.from_dict(_merge(self._data, overrides), source=self.source)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._data)

    def canonical(self) -> str:
        return canonical_json(self._data)

    @property
    def config_hash(self) -> str:
        return content_hash(self.canonical())

    def __repr__(self):
        return f"<ExperimentConfig seed={self._data['seed']} engine={self._data['engine']} hash={self.config_hash[:12]}>"


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise RunIOError(str(e), path=str(path))
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([("", f"{path}: invalid JSON at line {e.lineno}: {e.msg}")])
    config = ExperimentConfig.from_dict(raw, source=str(path))
    logger.info(f"Loaded config {path} ({config.config_hash[:12]})")
    return config


def threads_from_env(environ: Optional[Dict[str, str]] = None) -> int:
    """Worker cap from DLSIM_THREADS; unset or 0 means sequential."""
    environ = os.environ if environ is None else environ
    value = environ.get(THREADS_ENV, "").strip()
    if not value:
        return 0
    try:
        threads = int(value)
    except ValueError:
        threads = -1
    if threads < 0:
        raise ConfigError([(f"${THREADS_ENV}", f"must be a non-negative integer, got {value!r}")])
    return threads
