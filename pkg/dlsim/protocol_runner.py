"""
dlsim Protocol — Experiment runner.

Builds a World from an ExperimentConfig, runs the configured engine for up
to ``rounds`` rounds and persists one JSON line per RoundLog:

    result = run_experiment(config, run_dir=Path("runs/torus36"))
    result.status, result.rounds_run, result.logs[-1].consensus_distance

Early stopping watches the validation loss of the mean of the honest local
models on the holdout pool and stops after ``patience`` rounds without
improvement.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .adversary_behaviors import (
    AdversaryRole,
    EchoBehavior,
    PassiveBehavior,
    SAColluderBehavior,
    StateOverrideBehavior,
)
from .config import ExperimentConfig, threads_from_env
from .data import Dataset, Partition, load_csv, make_blobs, partition_uniform
from .defenses import ClipConfig, DefenseConfig, NoiseConfig
from .errors import RunIOError
from .models import ModelSpec, init_params, loss
from .numkit import ParamVec, Rng
from .protocol import (
    LRSchedule,
    NodeBehavior,
    RoundLog,
    ScheduleMode,
    SecAggConfig,
    World,
    build_world,
    run_round,
    snapshot,
)
from .topology import Topology
from .topology import build as build_topology

logger = logging.getLogger("dlsim.protocol.runner")

ROUNDS_FILE = "rounds.jsonl"


class RunStatus(Enum):
    COMPLETED = "completed"
    EARLY_STOPPED = "early_stopped"


# ── Assembly ─────────────────────────────────────────────────────────


@dataclass
class Experiment:
    """The pieces of one configured run, shared by paired DL/FL runs."""

    config: ExperimentConfig
    rng: Rng
    dataset: Dataset
    partition: Partition
    topology: Topology
    spec: ModelSpec


def prepare(config: ExperimentConfig) -> Experiment:
    """Data, partition, topology and model spec from the config's named streams."""
    rng = Rng(config.seed)
    data_cfg = config.get("data")
    if data_cfg["source"] == "csv":
        dataset = load_csv(data_cfg["path"])
    else:
        dataset = make_blobs(
            rng.child("data"), data_cfg["n_samples"], data_cfg["input_dim"],
            data_cfg["num_classes"], data_cfg["spread"], data_cfg["radius"],
        )
    partition = partition_uniform(rng.child("partition"), dataset, config.n_users, data_cfg["holdout_fraction"])
    topology = build_topology(config.get("topology"), config.n_users, rng.child("topology"))
    model = config.get("model")
    spec = ModelSpec(
        kind=model["kind"],
        input_dim=dataset.input_dim,
        num_classes=dataset.num_classes,
        hidden_dim=model["hidden_dim"] if model["kind"] == "mlp-1-hidden" else 0,
        activation=model["activation"],
    )
    return Experiment(config, rng, dataset, partition, topology, spec)


def bind(experiment: Optional[Experiment], config: ExperimentConfig) -> Experiment:
    """
    ``experiment`` with its data, partition and topology kept but ``config``
    swapped in (paired runs differ only in role or engine); a fresh one if None.
    """
    if experiment is None:
        return prepare(config)
    if experiment.config is config:
        return experiment
    return replace(experiment, config=config)


def make_payloads(experiment: Experiment, targets: List[int], initial: ParamVec) -> Dict[int, ParamVec]:
    """Override payloads Θ̃ per target from the ``payload`` stream."""
    payload = experiment.config.get("adversary")["payload"]
    out = {}
    for v in targets:
        if payload["source"] == "zeros":
            out[v] = ParamVec.zeros(len(initial))
        elif payload["source"] == "initial":
            out[v] = initial
        else:
            gen = experiment.rng.child("payload").generator(v)
            out[v] = ParamVec._adopt(payload["scale"] * gen.normal(size=len(initial)))
    return out


def make_behaviors(experiment: Experiment, initial: ParamVec) -> Dict[int, NodeBehavior]:
    adv = experiment.config.get("adversary")
    role = adv["role"]
    if role == AdversaryRole.NONE:
        return {}
    attacker, victims = adv["attacker"], adv["victims"]
    topo = experiment.topology
    if role == AdversaryRole.PASSIVE:
        return {attacker: PassiveBehavior()}
    if role == AdversaryRole.ECHO:
        return {attacker: EchoBehavior(victims[0], adv["echo_source"])}
    if role == AdversaryRole.STATE_OVERRIDE:
        payloads = make_payloads(experiment, victims, initial)
        return {attacker: StateOverrideBehavior(payloads, {v: topo.neighbors(v) for v in victims})}
    return {
        attacker: SAColluderBehavior(victims[0]),
        adv["colluder"]: SAColluderBehavior(victims[0], drop_victim=adv["drop_victim"]),
    }


def assemble(experiment: Experiment, engine: Optional[str] = None, threads: int = 0) -> World:
    """A fresh World for ``experiment``; ``engine`` only matters for logging."""
    config = experiment.config
    initial = init_params(experiment.spec, experiment.rng.child("init"))
    behaviors = make_behaviors(experiment, initial)
    active = [v for v, b in behaviors.items() if b.active]
    schedule = ScheduleMode.rushing(active) if config.schedule == "rushing" else ScheduleMode.synchronous()
    lr_cfg = config.get("lr_schedule")
    defense_cfg = config.get("defense") or {}
    clipping, noise = defense_cfg.get("clipping"), defense_cfg.get("noise")
    sa = config.get("secure_aggregation")
    world = build_world(
        experiment.spec, experiment.dataset, experiment.partition, experiment.topology, experiment.rng,
        LRSchedule(config.lr, tuple(lr_cfg["milestones"]), lr_cfg["gamma"]),
        behaviors,
        batch_size=config.batch_size,
        local_steps=config.local_steps,
        momentum=config.momentum,
        schedule=schedule,
        defense=DefenseConfig(
            clipping=ClipConfig(clipping["tau"]) if clipping else None,
            noise=NoiseConfig(noise["sigma"]) if noise else None,
        ),
        secure_aggregation=SecAggConfig(sa["enabled"], sa["threshold"], sa["mask_scale"]),
        threads=threads,
    )
    logger.debug(f"Assembled {engine or config.engine} world for {config.config_hash[:12]}")
    return world


# ── Persistence ──────────────────────────────────────────────────────


class RoundWriter:
    """Appends RoundLogs to ``rounds.jsonl``; LF line endings, one record per line."""

    def __init__(self, path, record_updates: bool = False):
        self.path = Path(path)
        self.record_updates = record_updates
        try:
            self._file = self.path.open("w", encoding="utf-8", newline="\n")
        except OSError as e:
            raise RunIOError(str(e), path=str(self.path))

    def write(self, log: RoundLog):
        try:
            self._file.write(log.to_json_line(self.record_updates) + "\n")
        except OSError as e:
            raise RunIOError(str(e), path=str(self.path))

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ── Running ──────────────────────────────────────────────────────────


@dataclass
class RunResult:
    experiment: Experiment
    world: World
    engine: str
    logs: List[RoundLog] = field(default_factory=list)
    status: RunStatus = RunStatus.COMPLETED
    best_round: int = 0
    best_validation_loss: Optional[float] = None

    @property
    def rounds_run(self) -> int:
        return self.logs[-1].round if self.logs else 0

    def to_dict(self):
        last = self.logs[-1] if self.logs else None
        return {
            "engine": self.engine,
            "status": self.status.value,
            "rounds_run": self.rounds_run,
            "best_round": self.best_round,
            "best_validation_loss": self.best_validation_loss,
            "final_consensus_distance": last.consensus_distance if last else None,
            "config_hash": self.experiment.config.config_hash,
            "partition_hash": self.experiment.partition.digest(),
        }


def validation_loss(world: World) -> Optional[float]:
    """Holdout loss of the mean of the honest local models."""
    if not world.partition.holdout:
        return None
    return loss(world.spec, world.mean_model(), world.holdout_batch())


def run_experiment(
    config: ExperimentConfig,
    run_dir=None,
    threads: Optional[int] = None,
    engine: Optional[str] = None,
    experiment: Optional[Experiment] = None,
) -> RunResult:
    """
    Execute the configured rounds and return every RoundLog.

    ``experiment`` lets paired runs share one Partition; ``engine`` overrides
    the configured engine for the FL side of a pair.
    """
    threads = threads_from_env() if threads is None else threads
    engine = engine or config.engine
    experiment = bind(experiment, config)
    world = assemble(experiment, engine, threads)
    result = RunResult(experiment, world, engine)
    early = config.get("early_stopping")
    writer = None
    if run_dir is not None:
        writer = RoundWriter(Path(run_dir) / ROUNDS_FILE, config.get("capture")["record_updates"])

    logger.info(f"Run started: {engine}, {config.rounds} rounds, {config.n_users} users, threads={threads}")
    try:
        log = snapshot(world, 0)
        result.logs.append(log)
        if writer:
            writer.write(log)
        best = validation_loss(world)
        result.best_validation_loss = best
        if best is None and early["enabled"]:
            logger.warning("Early stopping disabled: holdout pool is empty")
        stale = 0
        for t in range(config.rounds):
            log = run_round(world, engine, t)
            result.logs.append(log)
            if writer:
                writer.write(log)
            if not early["enabled"] or best is None:
                continue
            current = validation_loss(world)
            if current < best:
                best, stale = current, 0
                result.best_round, result.best_validation_loss = log.round, current
            else:
                stale += 1
                if stale >= early["patience"]:
                    result.status = RunStatus.EARLY_STOPPED
                    logger.info(f"Early stop after round {log.round}: no improvement for {stale} rounds")
                    break
    finally:
        if writer:
            writer.close()
    logger.info(f"Run finished: {result.status.value} after {result.rounds_run} rounds")
    return result


def consensus_trace(result: RunResult) -> np.ndarray:
    return np.array([log.consensus_distance for log in result.logs])
