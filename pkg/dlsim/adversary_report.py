"""
dlsim Adversary — Attack experiments and their reports.

Turns round logs into AttackReports (tidy rows, CSV on disk):

    passive_mia_experiment       MIA of received / marginalized updates vs the
                                 FL global model, against generalization error
    control_metric               how much of a victim's state an override controls
    sa_evasion                   victim update from two secure aggregates
    local_generalization_profile loss of one node's model vs hop distance
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adversary import ObservedHistory, marginalize_updates, mia_accuracy
from .data import sample_nonmembers
from .errors import CoverageError, PreconditionError, RunIOError, SecAggError
from .models import Batch, ModelSpec, loss
from .numkit import ParamVec, Rng, l2_norm, mean
from .protocol import RoundLog, World
from .topology import Topology, shortest_path_distances

logger = logging.getLogger("dlsim.adversary.report")

PASSIVE_COLUMNS = (
    "round", "victim", "generalization_error", "mia_received",
    "mia_marginalized", "mia_fl_global", "consensus_distance",
)
CURVE_COLUMNS = ("engine", "round", "victim", "gen_error", "mia", "consensus")


# ── Reports ──────────────────────────────────────────────────────────


@dataclass
class AttackReport:
    """Rows of one attack experiment, in a fixed column order."""

    name: str
    columns: Tuple[str, ...]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)

    def add(self, **row):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"{self.name}: unknown columns {sorted(unknown)}")
        self.rows.append({c: row.get(c) for c in self.columns})

    def column(self, name: str) -> List[Any]:
        return [row[name] for row in self.rows]

    def to_csv(self, path) -> Path:
        path = Path(path)
        try:
            with path.open("w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(self.columns)
                for row in self.rows:
                    writer.writerow(["" if row[c] is None else row[c] for c in self.columns])
        except OSError as e:
            raise RunIOError(str(e), path=str(path))
        logger.info(f"Report {self.name}: {len(self.rows)} rows written to {path}")
        return path

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "rows": len(self.rows), "summary": self.summary}


# ── Metrics ──────────────────────────────────────────────────────────


def generalization_error(spec: ModelSpec, params: ParamVec, train: Batch, holdout: Batch) -> float:
    """Holdout loss minus training loss of one model."""
    return loss(spec, params, holdout) - loss(spec, params, train)


def generalization_ratio(victim_gen: float, others_gen: float) -> Optional[float]:
    """Victim over others generalization error; None unless both are positive."""
    if victim_gen <= 0.0 or others_gen <= 0.0:
        return None
    return victim_gen / others_gen


def control_metric(after: ParamVec, payload: ParamVec, counterfactual: ParamVec) -> float:
    """
    1 − ‖Θ_v^{t+1} − Θ̃‖ / ‖Θ̂_v^{t+1} − Θ̃‖, with Θ̂ the aggregate the victim would
    have reached had the attacker sent its own state. 1 means full control.
    """
    reached = l2_norm(after - payload)
    baseline = l2_norm(counterfactual - payload)
    if baseline == 0.0:
        return 1.0 if reached == 0.0 else 0.0
    return 1.0 - reached / baseline


def counterfactual_aggregate(log: RoundLog, topology: Topology, victim: int, attacker: int) -> ParamVec:
    """The victim's mean had the attacker broadcast its own (unforged) state."""
    inbox = log.messages_to(victim)
    terms = []
    for u in topology.neighbors(victim):
        if u == victim:
            terms.append(log.updates[victim])
        elif u == attacker:
            terms.append(log.updates[attacker])
        else:
            terms.append(inbox[u])
    return mean(terms)


# ── Secure-Aggregation Evasion ───────────────────────────────────────


def check_sa_colluders(
    topology: Topology, a: int, b: int, victim: int, threshold: int, drop_victim: bool = False
):
    """Raise unless colluders ``a`` and ``b`` can isolate ``victim`` by differencing."""
    nn_a, nn_b = set(topology.neighbors(a)), set(topology.neighbors(b))
    if victim in (a, b) or victim not in nn_a:
        raise PreconditionError(f"victim {victim} must be a neighbor of colluder {a}, not a colluder")
    if drop_victim:
        if nn_a != nn_b:
            raise PreconditionError(f"nn({b}) ≠ nn({a}): drop-off variant needs identical neighbor sets")
        smaller = len(nn_b) - 1
    else:
        if nn_b != nn_a - {victim}:
            raise PreconditionError(f"nn({b}) ≠ nn({a}) \\ {{{victim}}}")
        smaller = len(nn_b)
    if smaller < threshold:
        raise SecAggError(
            f"SA threshold {threshold} blocks the smaller group of {smaller} users; "
            f"the attack needs threshold ≤ {smaller}"
        )


def sa_evasion(total_a: ParamVec, total_b: ParamVec) -> ParamVec:
    """SA(nn(A_a)) − SA(nn(A_b)) = the one update only A_a's group contains."""
    return total_a - total_b


def sa_evasion_from_histories(hist_a: ObservedHistory, hist_b: ObservedHistory, round_idx: int) -> ParamVec:
    try:
        return sa_evasion(hist_a.aggregates[round_idx], hist_b.aggregates[round_idx])
    except KeyError:
        raise CoverageError(f"no secure aggregate recorded for round {round_idx}")


# ── Passive Membership Inference ─────────────────────────────────────


@dataclass(frozen=True)
class VictimData:
    members: Batch
    nonmembers: Batch


def victim_data(world: World, victim: int, rng: Rng) -> VictimData:
    """The victim's shard and an equally sized non-member draw from the holdout."""
    shard = world.nodes[victim].shard
    gen = rng.child(f"nonmembers/{victim}").generator()
    rows = sample_nonmembers(world.partition, len(shard), gen)
    return VictimData(world.dataset.batch(shard), world.dataset.batch(rows))


def passive_mia_experiment(
    world: World,
    logs: Sequence[RoundLog],
    attacker: int,
    victims: Sequence[int],
    rng: Rng,
    fl_logs: Optional[Sequence[RoundLog]] = None,
) -> Tuple[AttackReport, AttackReport]:
    """
    MIA over every logged round for every victim. Returns the attack report
    and the (engine, round, victim, gen_error, mia, consensus) curves.
    """
    spec = world.spec
    neighbors = world.topology.neighbors(attacker)
    for v in victims:
        if v not in neighbors or v == attacker:
            raise CoverageError(f"victim {v} ∉ nn({attacker}): its updates are never received")
    fl_by_round = {log.round: log for log in fl_logs or ()}
    data = {v: victim_data(world, v, rng) for v in victims}
    holdout = world.holdout_batch()

    report = AttackReport("mia-passive", PASSIVE_COLUMNS)
    curves = AttackReport("mia-passive-curves", CURVE_COLUMNS)
    for log in logs:
        if log.round == 0:
            continue
        inbox = log.messages_to(attacker)
        if not inbox:
            raise PreconditionError(f"round {log.round} has no captured updates; enable capture.record_updates")
        for v in victims:
            d = data[v]
            received = inbox[v]
            gen_err = generalization_error(spec, received, d.members, holdout)
            mia_received = mia_accuracy(spec, received, d.members, d.nonmembers)
            others = [inbox[u] for u in neighbors if u not in (v, attacker)]
            mia_marg = None
            if others:
                mia_marg = mia_accuracy(spec, marginalize_updates(received, others), d.members, d.nonmembers)
            mia_fl = None
            fl_log = fl_by_round.get(log.round)
            if fl_log is not None:
                global_params = fl_log.global_params
                mia_fl = mia_accuracy(spec, global_params, d.members, d.nonmembers)
                curves.add(
                    engine="fedavg", round=log.round, victim=v,
                    gen_error=generalization_error(spec, global_params, d.members, holdout),
                    mia=mia_fl, consensus=fl_log.consensus_distance,
                )
            report.add(
                round=log.round, victim=v, generalization_error=gen_err, mia_received=mia_received,
                mia_marginalized=mia_marg, mia_fl_global=mia_fl, consensus_distance=log.consensus_distance,
            )
            curves.add(
                engine="dpsgd", round=log.round, victim=v, gen_error=gen_err,
                mia=mia_received, consensus=log.consensus_distance,
            )

    received = [r["mia_received"] for r in report.rows]
    report.summary = {
        "attacker": attacker,
        "victims": list(victims),
        "mean_mia_received": float(np.mean(received)) if received else None,
    }
    if fl_by_round:
        fl = [r["mia_fl_global"] for r in report.rows if r["mia_fl_global"] is not None]
        report.summary["mean_mia_fl_global"] = float(np.mean(fl)) if fl else None
    return report, curves


def matched_buckets(curves: AttackReport, n_buckets: int = 8) -> List[Dict[str, Any]]:
    """
    Mean MIA per engine within equal-width generalization-error buckets,
    keeping only buckets both engines populate.
    """
    gen = np.array(curves.column("gen_error"), dtype=np.float64)
    if gen.size == 0:
        return []
    edges = np.linspace(gen.min(), gen.max(), n_buckets + 1)
    out = []
    for i in range(n_buckets):
        lo, hi = edges[i], edges[i + 1]
        per_engine = {}
        for engine in ("dpsgd", "fedavg"):
            vals = [
                r["mia"] for r in curves.rows
                if r["engine"] == engine and (lo <= r["gen_error"] < hi or (i == n_buckets - 1 and r["gen_error"] == hi))
            ]
            if vals:
                per_engine[engine] = float(np.mean(vals))
        if len(per_engine) == 2:
            out.append({"low": float(lo), "high": float(hi), **per_engine})
    return out


# ── Local Generalization ─────────────────────────────────────────────


def local_generalization_profile(world: World, observer: int) -> AttackReport:
    """Mean loss of ``observer``'s model on the shards of users at each hop distance."""
    dist = shortest_path_distances(world.topology)[observer]
    params = world.nodes[observer].params
    by_distance: Dict[int, List[float]] = {}
    for node in world.nodes:
        value = loss(world.spec, params, world.dataset.batch(node.shard))
        by_distance.setdefault(int(dist[node.user_id]), []).append(value)
    report = AttackReport("local-generalization", ("observer", "distance", "users", "mean_loss"))
    for d in sorted(by_distance):
        report.add(observer=observer, distance=d, users=len(by_distance[d]), mean_loss=float(np.mean(by_distance[d])))
    return report
