"""
dlsim Harness — Run directories, attack drivers and report merging.

A run directory holds:

    manifest.json   config copy, start time, config/partition hashes, file inventory
                    (written before round 0, inventory completed at the end)
    rounds.jsonl    one RoundLog per line
    report.json     run summary

Attack drivers orchestrate one or more runs from a single config and write
an AttackReport CSV next to them:

    mia-passive          paired DL/FL runs on the same partition
    echo                 echo attack vs a passive baseline on the same seed
    state-override       control of each target's state, round by round
    gradient-recovery    recovered vs true gradients (+ analytic inversion)
    sa-evasion           victim update from two secure aggregates
    influence            coefficients of W^t against hop distance
    local-generalization loss of one model on every shard vs hop distance
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .adversary import ObservedHistory, mia_accuracy, recover_gradient
from .adversary_inversion import invert_gradient_analytic
from .adversary_report import (
    AttackReport,
    check_sa_colluders,
    control_metric,
    counterfactual_aggregate,
    generalization_error,
    generalization_ratio,
    local_generalization_profile,
    matched_buckets,
    passive_mia_experiment,
    sa_evasion_from_histories,
    victim_data,
)
from .config import ExperimentConfig, content_hash
from .data import sample_batch
from .errors import CoverageError, DataFormatError, PreconditionError, RunIOError, UninvertibleError
from .models import ModelKind
from .protocol import EngineKind, influence_factor, influence_matrix
from .protocol_runner import ROUNDS_FILE, Experiment, RunResult, bind, prepare, run_experiment
from .topology import shortest_path_distances

logger = logging.getLogger("dlsim.harness")

MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"


# ── Files ────────────────────────────────────────────────────────────


def _write_json(path: Path, data: Dict[str, Any]):
    try:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise RunIOError(str(e), path=str(path))


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise RunIOError(str(e), path=str(path))


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RunIOError(str(e), path=str(path))
    return path


@dataclass
class RunManifest:
    """What was run, when, and which files it produced."""

    config: Dict[str, Any]
    config_hash: str
    partition_hash: str
    engine: str
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    files: Dict[str, Optional[str]] = field(default_factory=dict)
    version: str = __version__

    @classmethod
    def for_experiment(cls, experiment: Experiment, engine: str) -> "RunManifest":
        config = experiment.config
        return cls(
            config=config.to_dict(),
            config_hash=config.config_hash,
            partition_hash=experiment.partition.digest(),
            engine=engine,
            files={MANIFEST_FILE: None, ROUNDS_FILE: None, REPORT_FILE: None},
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "partition_hash": self.partition_hash,
            "engine": self.engine,
            "started_at": self.started_at,
            "files": self.files,
            "version": self.version,
        }

    def write(self, run_dir: Path):
        _write_json(Path(run_dir) / MANIFEST_FILE, self.to_dict())

    def finalize(self, run_dir: Path):
        """Record content hashes of every produced file."""
        run_dir = Path(run_dir)
        for path in sorted(run_dir.iterdir()):
            if path.is_file() and path.name != MANIFEST_FILE:
                self.files[path.name] = content_hash(_read_text(path))
        self.files[MANIFEST_FILE] = None
        self.write(run_dir)


def load_manifest(run_dir) -> Dict[str, Any]:
    path = Path(run_dir) / MANIFEST_FILE
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON: {e.msg}", line=e.lineno)


def read_rounds(run_dir) -> List[Dict[str, Any]]:
    path = Path(run_dir) / ROUNDS_FILE
    records = []
    for line_no, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: {e.msg}", line=line_no)
    return records


# ── Runs ─────────────────────────────────────────────────────────────


def execute_run(
    config: ExperimentConfig,
    run_dir,
    threads: Optional[int] = None,
    engine: Optional[str] = None,
    experiment: Optional[Experiment] = None,
) -> RunResult:
    """Manifest, rounds and report for one engine run in ``run_dir``."""
    run_dir = ensure_dir(run_dir)
    experiment = bind(experiment, config)
    engine = engine or config.engine
    manifest = RunManifest.for_experiment(experiment, engine)
    manifest.write(run_dir)
    result = run_experiment(config, run_dir, threads=threads, engine=engine, experiment=experiment)
    _write_json(run_dir / REPORT_FILE, result.to_dict())
    manifest.finalize(run_dir)
    logger.info(f"Run written to {run_dir}")
    return result


def default_run_dir(config: ExperimentConfig, root="runs") -> Path:
    return Path(root) / config.config_hash[:12]


# ── Attack Drivers ───────────────────────────────────────────────────


@dataclass
class AttackOutcome:
    report: AttackReport
    extra: List[AttackReport] = field(default_factory=list)
    runs: Dict[str, RunResult] = field(default_factory=dict)


def _behavior(result: RunResult, user: int):
    return result.world.nodes[user].behavior


def _adversary(config: ExperimentConfig) -> Dict[str, Any]:
    return config.get("adversary")


def _with_role(config: ExperimentConfig, role: str, **extra) -> ExperimentConfig:
    return config.with_overrides(adversary={"role": role, **extra})


def attack_mia_passive(config: ExperimentConfig, out_dir: Path, threads: Optional[int]) -> AttackOutcome:
    if not config.get("capture")["record_updates"]:
        raise PreconditionError(
            "mia-passive needs captured updates: rerun with --record-updates (capture.record_updates = true)"
        )
    config = _with_role(config, "passive")
    adv = _adversary(config)
    experiment = prepare(config)
    dl = execute_run(config, out_dir / EngineKind.DPSGD, threads, EngineKind.DPSGD, experiment)
    fl = execute_run(config, out_dir / EngineKind.FEDAVG, threads, EngineKind.FEDAVG, experiment)
    report, curves = passive_mia_experiment(
        dl.world, dl.logs, adv["attacker"], adv["victims"], experiment.rng, fl_logs=fl.logs,
    )
    report.summary["buckets"] = matched_buckets(curves)
    return AttackOutcome(report, [curves], {"dpsgd": dl, "fedavg": fl})


def _node_gen_error(result: RunResult, params, user: int) -> float:
    world = result.world
    return generalization_error(world.spec, params, world.dataset.batch(world.nodes[user].shard), world.holdout_batch())


def attack_echo(config: ExperimentConfig, out_dir: Path, threads: Optional[int]) -> AttackOutcome:
    adv = _adversary(config)
    attacker, victim = adv["attacker"], adv["victims"][0]
    experiment = prepare(config)
    echo_cfg = _with_role(config, "echo")
    passive_cfg = _with_role(config, "passive")
    echo = execute_run(echo_cfg, out_dir / "echo", threads, experiment=experiment)
    passive = execute_run(passive_cfg, out_dir / "passive", threads, experiment=experiment)
    d = victim_data(echo.world, victim, experiment.rng)
    spec = echo.world.spec
    others = [v for v in echo.world.honest_ids() if v != victim]
    passive_by_round = {log.round: log for log in passive.logs}

    report = AttackReport("echo", (
        "round", "victim", "victim_gen_error", "others_gen_error", "ratio",
        "mia_echo", "mia_passive", "influence",
    ))
    weight = influence_factor(experiment.topology, attacker, victim)
    for log in echo.logs[1:]:
        victim_gen = _node_gen_error(echo, log.params[victim], victim)
        others_gen = float(np.mean([_node_gen_error(echo, log.params[u], u) for u in others]))
        base = passive_by_round.get(log.round)
        report.add(
            round=log.round, victim=victim, victim_gen_error=victim_gen, others_gen_error=others_gen,
            ratio=generalization_ratio(victim_gen, others_gen),
            mia_echo=mia_accuracy(spec, log.params[victim], d.members, d.nonmembers),
            mia_passive=mia_accuracy(spec, base.params[victim], d.members, d.nonmembers) if base else None,
            influence=weight,
        )
    if report.rows:
        last = report.rows[-1]
        report.summary = {"final_ratio": last["ratio"], "final_mia_echo": last["mia_echo"]}
    return AttackOutcome(report, runs={"echo": echo, "passive": passive})


def attack_state_override(config: ExperimentConfig, out_dir: Path, threads: Optional[int]) -> AttackOutcome:
    config = _with_role(config, "state-override")
    adv = _adversary(config)
    attacker = adv["attacker"]
    result = execute_run(config, out_dir, threads)
    behavior = _behavior(result, attacker)
    topo = result.experiment.topology
    exact = config.schedule == "rushing"
    if not exact:
        logger.info("State override without a rushing schedule: stale variant")

    report = AttackReport("state-override", ("round", "victim", "control", "max_abs_diff", "exact", "influence"))
    for log in result.logs[1:]:
        for v in adv["victims"]:
            payload = behavior.payloads[v]
            after = log.params[v]
            report.add(
                round=log.round, victim=v,
                control=control_metric(after, payload, counterfactual_aggregate(log, topo, v, attacker)),
                max_abs_diff=after.max_abs_diff(payload), exact=exact,
                influence=influence_factor(topo, attacker, v),
            )
    window = [r["control"] for r in report.rows if 10 <= r["round"] <= 100]
    report.summary = {
        "mean_control": float(np.mean(report.column("control"))) if report.rows else None,
        "mean_control_10_100": float(np.mean(window)) if window else None,
    }
    return AttackOutcome(report, runs={"dpsgd": result})


def attack_gradient_recovery(config: ExperimentConfig, out_dir: Path, threads: Optional[int]) -> AttackOutcome:
    config = _with_role(config, "passive")
    adv = _adversary(config)
    attacker = adv["attacker"]
    experiment = prepare(config)
    topo = experiment.topology
    for v in adv["victims"]:
        if not topo.covers(attacker, v):
            raise CoverageError(f"nn({v}) ⊄ nn({attacker}): victim not fully observable")
    result = execute_run(config, out_dir, threads, experiment=experiment)
    world = result.world
    history: ObservedHistory = _behavior(result, attacker).history
    invert = world.spec.kind == ModelKind.LINEAR_SOFTMAX and world.batch_size == 1

    report = AttackReport("gradient-recovery", ("round", "victim", "max_abs_error", "inversion_error", "label_correct"))
    for log in result.logs[1:]:
        t = log.round - 1
        lr = world.lr.at(t)
        if lr <= 0:
            continue
        for v in adv["victims"]:
            recovered = recover_gradient(history, v, t, lr, topo.neighbors(v), world.local_steps)
            inversion_error, label_ok = None, None
            if invert:
                row = sample_batch(world.nodes[v].shard, 1, world.rng.child(f"batches/{v}").generator(t))[0]
                try:
                    inv = invert_gradient_analytic(world.spec, recovered)
                    inversion_error = float(np.max(np.abs(inv.inputs - world.dataset.inputs[row])))
                    label_ok = inv.label == int(world.dataset.labels[row])
                except UninvertibleError:
                    pass
            report.add(
                round=log.round, victim=v, max_abs_error=recovered.max_abs_diff(log.gradients[v]),
                inversion_error=inversion_error, label_correct=label_ok,
            )
    errors = report.column("max_abs_error")
    report.summary = {"max_abs_error": max(errors) if errors else None}
    return AttackOutcome(report, runs={"dpsgd": result})


def attack_sa_evasion(config: ExperimentConfig, out_dir: Path, threads: Optional[int]) -> AttackOutcome:
    adv = _adversary(config)
    if adv["role"] != "sa-colluders":
        raise PreconditionError("sa-evasion needs adversary.role = sa-colluders with a colluder id")
    victim = adv["victims"][0]
    experiment = prepare(config)
    sa = config.get("secure_aggregation")
    check_sa_colluders(
        experiment.topology, adv["attacker"], adv["colluder"], victim, sa["threshold"], adv["drop_victim"],
    )
    result = execute_run(config, out_dir, threads, experiment=experiment)
    hist_a = _behavior(result, adv["attacker"]).history
    hist_b = _behavior(result, adv["colluder"]).history

    report = AttackReport("sa-evasion", ("round", "victim", "max_abs_error"))
    for log in result.logs[1:]:
        recovered = sa_evasion_from_histories(hist_a, hist_b, log.round - 1)
        report.add(round=log.round, victim=victim, max_abs_error=recovered.max_abs_diff(log.updates[victim]))
    errors = report.column("max_abs_error")
    report.summary = {"max_abs_error": max(errors) if errors else None, "drop_victim": adv["drop_victim"]}
    return AttackOutcome(report, runs={"dpsgd": result})


def attack_influence(config: ExperimentConfig, out_dir: Path, threads: Optional[int]) -> AttackOutcome:
    experiment = prepare(config)
    topo = experiment.topology
    adv = _adversary(config)
    observer = adv.get("attacker") or 0
    hops = shortest_path_distances(topo)[observer]
    report = AttackReport("influence", ("t", "observer", "source", "hops", "coefficient"))
    for t in range(1, max(config.rounds, 1) + 1):
        row = influence_matrix(topo, t)[observer]
        for u in range(topo.n):
            report.add(t=t, observer=observer, source=u, hops=int(hops[u]), coefficient=float(row[u]))
    return AttackOutcome(report)


def attack_local_generalization(config: ExperimentConfig, out_dir: Path, threads: Optional[int]) -> AttackOutcome:
    result = execute_run(config, out_dir, threads)
    observer = _adversary(config).get("attacker") or 0
    return AttackOutcome(local_generalization_profile(result.world, observer), runs={"dpsgd": result})


ATTACKS: Dict[str, Callable[[ExperimentConfig, Path, Optional[int]], AttackOutcome]] = {
    "mia-passive": attack_mia_passive,
    "echo": attack_echo,
    "state-override": attack_state_override,
    "gradient-recovery": attack_gradient_recovery,
    "sa-evasion": attack_sa_evasion,
    "influence": attack_influence,
    "local-generalization": attack_local_generalization,
}


def run_attack(config: ExperimentConfig, name: str, out_dir, threads: Optional[int] = None) -> AttackOutcome:
    """Run attack ``name`` and write ``<name>.csv`` (plus any curve files) into ``out_dir``."""
    driver = ATTACKS.get(name)
    if driver is None:
        raise PreconditionError(f"unknown attack {name!r}; choose one of {', '.join(ATTACKS)}")
    out_dir = ensure_dir(out_dir)
    logger.info(f"Attack {name} started ({config.config_hash[:12]})")
    outcome = driver(config, out_dir, threads)
    outcome.report.to_csv(out_dir / f"{name}.csv")
    for extra in outcome.extra:
        extra.to_csv(out_dir / f"{extra.name}.csv")
    _write_json(out_dir / f"{name}.json", {**outcome.report.to_dict(), "config_hash": config.config_hash})
    return outcome


# ── Report Merging ───────────────────────────────────────────────────


class ReportKind:
    TIDY = "tidy"
    FIGURE = "figure"
    GNUPLOT = "gnuplot"


TIDY_COLUMNS = ("run", "engine", "round", "victim", "metric", "value")
FIGURE_COLUMNS = ("run", "engine", "round", "victim", "gen_error", "mia", "consensus")
ID_COLUMNS = {"engine", "round", "t", "victim", "observer", "source", "hops"}


@dataclass
class _Table:
    run: str
    name: str
    header: Tuple[str, ...]
    rows: List[Dict[str, str]]


def _read_csv(path: Path, run: str) -> _Table:
    text = _read_text(path)
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        raise DataFormatError(f"{path}: empty report")
    return _Table(run, path.stem, tuple(reader.fieldnames), list(reader))


def _rounds_table(run_dir: Path) -> _Table:
    manifest = load_manifest(run_dir)
    rows = [
        {"engine": manifest.get("engine", ""), "round": str(r["round"]), "consensus_distance": repr(r["consensus_distance"])}
        for r in read_rounds(run_dir)
    ]
    return _Table(run_dir.name, "rounds", ("engine", "round", "consensus_distance"), rows)


def collect_tables(paths: Sequence) -> List[_Table]:
    """Every report table under ``paths``: CSV files, or directories of CSVs and run logs."""
    tables = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            for csv_path in sorted(path.glob("*.csv")):
                tables.append(_read_csv(csv_path, path.name))
            if (path / ROUNDS_FILE).exists():
                tables.append(_rounds_table(path))
            for sub in sorted(p for p in path.iterdir() if p.is_dir() and (p / ROUNDS_FILE).exists()):
                tables.append(_rounds_table(sub))
        elif path.is_file():
            tables.append(_read_csv(path, path.parent.name or path.stem))
        else:
            raise RunIOError("no such report or run directory", path=str(path))
    if not tables:
        raise DataFormatError("no reports to merge")
    headers: Dict[str, Tuple[str, ...]] = {}
    for table in tables:
        known = headers.setdefault(table.name, table.header)
        if known != table.header:
            raise DataFormatError(
                f"schema drift in {table.name} of run {table.run}: {list(table.header)} vs {list(known)}"
            )
    return tables


def merge_tidy(tables: Sequence[_Table]) -> AttackReport:
    report = AttackReport("tidy", TIDY_COLUMNS)
    for table in tables:
        metrics = [c for c in table.header if c not in ID_COLUMNS]
        for row in table.rows:
            round_id = row.get("round") or row.get("t", "")
            for metric in metrics:
                if row.get(metric, "") == "":
                    continue
                report.add(
                    run=table.run, engine=row.get("engine") or "dpsgd", round=round_id,
                    victim=row.get("victim") or row.get("source", ""),
                    metric=f"{table.name}.{metric}", value=row[metric],
                )
    return report


def merge_figure(tables: Sequence[_Table]) -> AttackReport:
    curves = [t for t in tables if set(("engine", "gen_error", "mia", "consensus")) <= set(t.header)]
    if not curves:
        raise DataFormatError("no curve reports (engine, round, gen_error, mia, consensus) among the inputs")
    report = AttackReport("figure", FIGURE_COLUMNS)
    for table in curves:
        for row in table.rows:
            report.add(run=table.run, **{c: row.get(c, "") for c in FIGURE_COLUMNS if c != "run"})
    return report


def write_gnuplot(report: AttackReport, path) -> Path:
    """Whitespace-separated blocks per (run, engine), separated by two blank lines."""
    path = Path(path)
    blocks: Dict[Tuple[str, str], List[Dict[str, Any]]] = {}
    for row in report.rows:
        blocks.setdefault((row["run"], row["engine"]), []).append(row)
    columns = [c for c in report.columns if c not in ("run", "engine")]
    lines = []
    for (run, engine), rows in blocks.items():
        lines.append(f"# run={run} engine={engine}")
        lines.append("# " + " ".join(columns))
        for row in rows:
            lines.append(" ".join(str(row[c]) if row[c] not in (None, "") else "NaN" for c in columns))
        lines.extend(["", ""])
    try:
        path.write_text("\n".join(lines), encoding="utf-8")
    except OSError as e:
        raise RunIOError(str(e), path=str(path))
    return path


def build_report(paths: Sequence, kind: str, out) -> Path:
    """Merge the reports under ``paths`` into ``out`` as tidy CSV, figure CSV or gnuplot data."""
    tables = collect_tables(paths)
    if kind == ReportKind.TIDY:
        return merge_tidy(tables).to_csv(out)
    if kind == ReportKind.FIGURE:
        return merge_figure(tables).to_csv(out)
    if kind == ReportKind.GNUPLOT:
        return write_gnuplot(merge_figure(tables), out)
    raise DataFormatError(f"unknown report kind {kind!r}")
