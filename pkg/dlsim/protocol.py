"""
dlsim Protocol — The round engine.

Implements one round of decentralized parallel SGD (D-PSGD) and of
cross-silo federated averaging (FedAVG) over a World of nodes:

    D-PSGD, for every node v in round t:
        sample a batch from the local shard
        Θ_v^{t+1/2} = local SGD step(s) from Θ_v^t
        send Θ_v^{t+1/2} to every u ∈ nn(v) \\ {v}
        Θ_v^{t+1}   = mean over u ∈ nn(v) of Θ_u^{t+1/2}   (own update included)

    FedAVG, in round t:
        every user steps from the global model; the server averages all n
        updates and every user adopts the result

Adversaries slot in through NodeBehavior: at the broadcast point the engine
asks the behavior for one update per neighbor instead of sending the node's
own update. Behaviors only ever see messages addressed to their node. With a
rushing schedule, adversaries forge after every honest message of the round
has been delivered.

Node-local compute may run on a thread pool (``World.threads``); results are
reduced in user-id order so they are bit-identical to a sequential run.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .data import Dataset, Partition, sample_batch
from .defenses import DefenseConfig, noisy_update, self_centered_aggregate
from .errors import DLSimError, DimensionError
from .models import ModelSpec, init_params, loss, loss_and_gradient, sgd_momentum_step, sgd_step
from .numkit import ParamVec, Rng, mean
from .protocol_secagg import SAGroup, unmask_sum
from .topology import Topology

logger = logging.getLogger("dlsim.protocol")

SERVER = -1


# ── Scheduling ───────────────────────────────────────────────────────


class EngineKind:
    DPSGD = "dpsgd"
    FEDAVG = "fedavg"


@dataclass(frozen=True)
class ScheduleMode:
    """Synchronous broadcast, or rushing for the listed adversary ids."""

    mode: str = "synchronous"
    adversaries: FrozenSet[int] = frozenset()

    @classmethod
    def synchronous(cls) -> "ScheduleMode":
        return cls("synchronous")

    @classmethod
    def rushing(cls, adversaries: Iterable[int]) -> "ScheduleMode":
        return cls("rushing", frozenset(adversaries))

    def is_rushing(self, user_id: int) -> bool:
        return self.mode == "rushing" and user_id in self.adversaries


@dataclass(frozen=True)
class LRSchedule:
    """Step decay: lr_t = base · gamma^(number of milestones ≤ t)."""

    base: float
    milestones: Tuple[int, ...] = ()
    gamma: float = 0.1

    def at(self, round_idx: int) -> float:
        passed = sum(1 for m in self.milestones if m <= round_idx)
        return self.base * (self.gamma ** passed)


@dataclass(frozen=True)
class SecAggConfig:
    enabled: bool = False
    threshold: int = 2
    mask_scale: float = 10.0


# ── Node State & Messages ────────────────────────────────────────────


@dataclass(frozen=True)
class RoundMessage:
    """One update on one directed edge. ``seq`` orders messages within the round."""

    sender: int
    receiver: int
    update: ParamVec
    round_idx: int
    seq: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sender": self.sender,
            "receiver": self.receiver,
            "seq": self.seq,
            "update": self.update.to_list(),
        }


class NodeBehavior:
    """
    Honest behavior, and the base class adversarial roles override.

    The engine calls :meth:`forge` at the broadcast point, :meth:`observe`
    with the messages addressed to this node, and :meth:`observe_aggregate`
    with the node's secure-aggregation output.
    """

    role = "honest"
    trains = True
    active = False

    def __init__(self):
        self.user_id: Optional[int] = None
        self.neighbors: Tuple[int, ...] = ()

    @property
    def adversarial(self) -> bool:
        return self.role != "honest"

    def attach(self, user_id: int, neighbors: Tuple[int, ...], initial_params: ParamVec):
        """Called once when the world is built; nn(v) and Θ^0 are known to every node."""
        self.user_id = user_id
        self.neighbors = neighbors

    def forge(
        self,
        round_idx: int,
        own: ParamVec,
        inbox: Optional[Mapping[int, ParamVec]],
    ) -> Dict[int, ParamVec]:
        """
        Updates to send this round, keyed by receiver.

        ``inbox`` holds this round's messages to the node when it is scheduled
        as rushing, and is None otherwise.
        """
        return {u: own for u in self.neighbors if u != self.user_id}

    def observe(self, round_idx: int, inbox: Mapping[int, ParamVec], sent: Mapping[int, ParamVec]):
        pass

    def observe_aggregate(self, round_idx: int, total: ParamVec, survivors: Tuple[int, ...]):
        pass

    def sa_dropped(self, round_idx: int) -> FrozenSet[int]:
        """Participants this node's SA group should treat as dropped."""
        return frozenset()


@dataclass
class NodeState:
    """A user's local view: Θ_v^t, its shard and its behavior."""

    user_id: int
    params: ParamVec
    shard: Tuple[int, ...]
    behavior: NodeBehavior
    velocity: Optional[ParamVec] = None

    @property
    def honest(self) -> bool:
        """Follows the protocol (passive observers included)."""
        return not self.behavior.active


# ── Local Training ───────────────────────────────────────────────────


@dataclass(frozen=True)
class LocalResult:
    update: ParamVec
    gradient: ParamVec
    velocity: Optional[ParamVec]


class LocalTrainer:
    """Produces a node's model update Θ^{t+1/2} from Θ^t."""

    def local_update(self, world: "World", node: NodeState, round_idx: int, lr: float) -> LocalResult:
        raise NotImplementedError


class SGDTrainer(LocalTrainer):
    """
    One uniformly random mini-batch per local step, drawn from the node's own
    stream; plain SGD, or heavy-ball momentum when ``world.momentum > 0``.
    """

    def local_update(self, world: "World", node: NodeState, round_idx: int, lr: float) -> LocalResult:
        if lr <= 0:
            return IdleTrainer().local_update(world, node, round_idx, lr)
        gen = world.rng.child(f"batches/{node.user_id}").generator(round_idx)
        batches = [
            world.dataset.batch(sample_batch(node.shard, world.batch_size, gen))
            for _ in range(world.local_steps)
        ]
        _, grad = loss_and_gradient(world.spec, node.params, batches[0])
        if world.momentum > 0:
            velocity = node.velocity if node.velocity is not None else ParamVec.zeros(len(node.params))
            update, velocity = sgd_momentum_step(
                world.spec, node.params, velocity, lambda s: batches[s], lr,
                world.local_steps, world.momentum,
            )
            return LocalResult(update, grad, velocity)
        update = sgd_step(world.spec, node.params, lambda s: batches[s], lr, world.local_steps)
        return LocalResult(update, grad, node.velocity)


class IdleTrainer(LocalTrainer):
    """No local step: the update is Θ^t itself and the gradient is zero."""

    def local_update(self, world: "World", node: NodeState, round_idx: int, lr: float) -> LocalResult:
        return LocalResult(node.params, ParamVec.zeros(len(node.params)), node.velocity)


# ── World ────────────────────────────────────────────────────────────


@dataclass
class World:
    """Everything one run needs: data, graph, nodes and engine settings."""

    spec: ModelSpec
    dataset: Dataset
    partition: Partition
    topology: Topology
    nodes: List[NodeState]
    rng: Rng
    lr: LRSchedule
    batch_size: int = 32
    local_steps: int = 1
    momentum: float = 0.0
    schedule: ScheduleMode = field(default_factory=ScheduleMode)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    secure_aggregation: SecAggConfig = field(default_factory=SecAggConfig)
    trainer: LocalTrainer = field(default_factory=SGDTrainer)
    threads: int = 0
    initial_params: Optional[ParamVec] = None
    global_params: Optional[ParamVec] = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    def honest_ids(self) -> List[int]:
        return [node.user_id for node in self.nodes if node.honest]

    def adversary_ids(self) -> List[int]:
        return [node.user_id for node in self.nodes if node.behavior.adversarial]

    def params(self) -> Dict[int, ParamVec]:
        return {node.user_id: node.params for node in self.nodes}

    def mean_model(self) -> ParamVec:
        """Average of the honest nodes' local models."""
        return mean([self.nodes[v].params for v in self.honest_ids()])

    def holdout_batch(self):
        return self.dataset.batch(self.partition.holdout)

    def map_nodes(self, fn: Callable[[NodeState], Any], nodes: Sequence[NodeState]) -> List[Any]:
        """Run ``fn`` per node, on the thread pool when ``threads > 0``; results in input order."""
        if self.threads and len(nodes) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(fn, nodes))
        return [fn(node) for node in nodes]


def build_world(
    spec: ModelSpec,
    dataset: Dataset,
    partition: Partition,
    topology: Topology,
    rng: Rng,
    lr: Union[float, LRSchedule],
    behaviors: Optional[Mapping[int, NodeBehavior]] = None,
    **settings,
) -> World:
    """
    Assemble a World in which every user starts from the common Θ^0 drawn from
    the ``init`` stream. ``settings`` are forwarded to :class:`World`.
    """
    if topology.n != partition.n_users:
        raise DimensionError(f"topology has {topology.n} users, partition has {partition.n_users}")
    if spec.input_dim != dataset.input_dim:
        raise DimensionError(f"model input_dim {spec.input_dim} != data input_dim {dataset.input_dim}")
    behaviors = dict(behaviors or {})
    theta0 = init_params(spec, rng.child("init"))
    nodes = []
    for v in range(topology.n):
        behavior = behaviors.get(v) or NodeBehavior()
        behavior.attach(v, topology.neighbors(v), theta0)
        nodes.append(NodeState(v, theta0, partition.shards[v], behavior))
    schedule = LRSchedule(float(lr)) if not isinstance(lr, LRSchedule) else lr
    world = World(
        spec=spec, dataset=dataset, partition=partition, topology=topology, nodes=nodes,
        rng=rng, lr=schedule, initial_params=theta0, global_params=theta0, **settings,
    )
    logger.info(
        f"World built: {topology.n} users on {topology.name}, model {spec.kind} "
        f"({spec.param_count} params), adversaries {world.adversary_ids()}"
    )
    return world


# ── Round Logs ───────────────────────────────────────────────────────


@dataclass
class RoundLog:
    """
    Everything that happened in one round.

    ``round`` counts completed rounds: the record with round k describes the
    state Θ^k. ``updates`` are the nodes' own Θ^{t+1/2}; ``gradients`` the true
    first-step gradients of honest nodes (engine ground truth, never shown to
    behaviors).
    """

    round: int
    consensus_distance: float
    train_loss: Dict[int, float]
    params_hash: Dict[int, str]
    lr: float = 0.0
    messages: List[RoundMessage] = field(default_factory=list)
    updates: Dict[int, ParamVec] = field(default_factory=dict)
    params: Dict[int, ParamVec] = field(default_factory=dict)
    gradients: Dict[int, ParamVec] = field(default_factory=dict)
    global_params: Optional[ParamVec] = None
    sa_outputs: Dict[int, ParamVec] = field(default_factory=dict)

    def messages_to(self, receiver: int) -> Dict[int, ParamVec]:
        return {m.sender: m.update for m in self.messages if m.receiver == receiver}

    def messages_from(self, sender: int) -> Dict[int, ParamVec]:
        return {m.receiver: m.update for m in self.messages if m.sender == sender}

    def to_record(self, record_updates: bool = False) -> Dict[str, Any]:
        record = {
            "round": self.round,
            "consensus_distance": self.consensus_distance,
            "per_node": {
                str(v): {"train_loss": self.train_loss[v], "params_hash": self.params_hash[v]}
                for v in sorted(self.train_loss)
            },
        }
        if record_updates:
            record["messages"] = [m.to_dict() for m in self.messages]
        return record

    def to_json_line(self, record_updates: bool = False) -> str:
        return json.dumps(self.to_record(record_updates), sort_keys=True)


# ── Metrics ──────────────────────────────────────────────────────────


def consensus_distance(states: Sequence[Union[ParamVec, NodeState]]) -> float:
    """C = Σ_v Σ_{u≠v} ‖Θ_v − Θ_u‖² / (|V|² − |V|)."""
    vecs = [s.params if isinstance(s, NodeState) else s for s in states]
    if len(vecs) < 2:
        raise DimensionError("consensus distance needs at least 2 users")
    matrix = np.vstack([v.values for v in vecs])
    n = matrix.shape[0]
    total = 0.0
    for v in range(n):
        diff = matrix - matrix[v]
        total += float(np.sum(diff * diff))
    return total / (n * n - n)


def influence_matrix(topology: Topology, t: int) -> np.ndarray:
    """W^t: entry (v, u) is the coefficient of Θ_u^0 in Θ_v^t under zero gradients."""
    if t < 1:
        raise ValueError(f"t must be ≥ 1, got {t}")
    return np.linalg.matrix_power(topology.mixing_matrix(), t)


def influence_factor(topology: Topology, attacker: int, victim: int) -> float:
    """Weight of one neighbor's update in the victim's aggregate: 1/|nn(victim)|."""
    if attacker not in topology.neighbors(victim):
        return 0.0
    return 1.0 / topology.degree(victim)


def snapshot(world: World, round_count: int) -> RoundLog:
    """Log of the current state without running a round (the initial record)."""
    log = RoundLog(round=round_count, consensus_distance=0.0, train_loss={}, params_hash={})
    _finish_log(world, log)
    return log


def _finish_log(world: World, log: RoundLog):
    honest = [world.nodes[v].params for v in world.honest_ids()]
    log.consensus_distance = consensus_distance(honest) if len(honest) >= 2 else 0.0
    for node in world.nodes:
        log.train_loss[node.user_id] = loss(world.spec, node.params, world.dataset.batch(node.shard))
        log.params_hash[node.user_id] = node.params.digest()
        log.params[node.user_id] = node.params


# ── D-PSGD ───────────────────────────────────────────────────────────


def _local_results(world: World, round_idx: int, lr: float) -> List[LocalResult]:
    idle = IdleTrainer()

    def step(node: NodeState) -> LocalResult:
        trainer = world.trainer if node.behavior.trains else idle
        return trainer.local_update(world, node, round_idx, lr)

    return world.map_nodes(step, world.nodes)


def _outgoing(world: World, node: NodeState, update: ParamVec, round_idx: int) -> ParamVec:
    noise = world.defense.noise
    if noise is None or noise.sigma == 0:
        return update
    return noisy_update(update, world.rng.child(f"noise/{node.user_id}"), noise.sigma, counter=round_idx)


def _check_forged(node: NodeState, forged: Mapping[int, ParamVec], topology: Topology):
    expected = set(topology.peers(node.user_id))
    if set(forged) != expected:
        raise DLSimError(
            f"behavior {node.behavior.role} of user {node.user_id} addressed {sorted(forged)}, "
            f"expected exactly {sorted(expected)}"
        )


def dpsgd_round(world: World, round_idx: int) -> RoundLog:
    """Run round ``round_idx`` of D-PSGD in place and return its log."""
    topo = world.topology
    lr = world.lr.at(round_idx)
    results = _local_results(world, round_idx, lr)
    log = RoundLog(round=round_idx + 1, consensus_distance=0.0, train_loss={}, params_hash={}, lr=lr)
    for node, res in zip(world.nodes, results):
        log.updates[node.user_id] = res.update
        if node.honest:
            log.gradients[node.user_id] = res.gradient

    # Broadcast: honest first when adversaries rush, otherwise in user-id order.
    messages: Dict[Tuple[int, int], ParamVec] = {}
    seq = 0
    ordered = sorted(world.nodes, key=lambda n: (world.schedule.is_rushing(n.user_id), n.user_id))
    for node in ordered:
        v = node.user_id
        own = results[v].update
        if node.honest:
            outgoing = _outgoing(world, node, own, round_idx)
            forged = {u: outgoing for u in topo.peers(v)}
        else:
            inbox = None
            if world.schedule.is_rushing(v):
                inbox = {s: messages[(s, v)] for s in topo.peers(v) if (s, v) in messages}
            forged = node.behavior.forge(round_idx, own, inbox)
            _check_forged(node, forged, topo)
        for u in sorted(forged):
            messages[(v, u)] = forged[u]
            seq += 1
            log.messages.append(RoundMessage(v, u, forged[u], round_idx, seq))

    if world.secure_aggregation.enabled:
        new_params = _aggregate_secure(world, round_idx, results, messages, log)
    else:
        new_params = _aggregate_plain(world, results, messages)

    for node in world.nodes:
        v = node.user_id
        if node.behavior.adversarial:
            inbox = {u: messages[(u, v)] for u in topo.peers(v)}
            sent = {u: messages[(v, u)] for u in topo.peers(v)}
            node.behavior.observe(round_idx, inbox, sent)
        node.params = new_params[v]
        node.velocity = results[v].velocity

    _finish_log(world, log)
    logger.debug(f"Round {round_idx}: lr={lr:g} consensus={log.consensus_distance:.6g}")
    return log


def _aggregate_plain(
    world: World, results: List[LocalResult], messages: Mapping[Tuple[int, int], ParamVec]
) -> Dict[int, ParamVec]:
    topo = world.topology
    clipping = world.defense.clipping
    out = {}
    for node in world.nodes:
        v = node.user_id
        own = results[v].update
        if clipping is not None and node.honest:
            received = [messages[(u, v)] for u in topo.peers(v)]
            out[v] = self_centered_aggregate(own, received, clipping.tau)
        else:
            out[v] = mean([own if u == v else messages[(u, v)] for u in topo.neighbors(v)])
    return out


def _aggregate_secure(
    world: World,
    round_idx: int,
    results: List[LocalResult],
    messages: Dict[Tuple[int, int], ParamVec],
    log: RoundLog,
) -> Dict[int, ParamVec]:
    # Every node's aggregation runs through its own SA group over nn(v); the
    # messages on the wire become masked shares.
    topo = world.topology
    cfg = world.secure_aggregation
    masks = world.rng.child("masks")
    out = {}
    for node in world.nodes:
        v = node.user_id
        group = SAGroup(
            participants=topo.neighbors(v),
            rng=masks,
            threshold=cfg.threshold,
            dropped=node.behavior.sa_dropped(round_idx),
            group_id=v,
            round_idx=round_idx,
            mask_scale=cfg.mask_scale,
        )
        group.check_threshold()
        shares = {}
        for u in group.participants:
            value = results[v].update if u == v else messages[(u, v)]
            shares[u] = group.masked_share(u, value)
        total = unmask_sum(group, [shares[u] for u in group.survivors])
        log.sa_outputs[v] = total
        out[v] = total / len(group.survivors)
        if node.behavior.adversarial:
            node.behavior.observe_aggregate(round_idx, total, group.survivors)
        for u in topo.peers(v):
            messages[(u, v)] = shares[u]

    # Replace the logged plaintext with what was actually on the wire.
    log.messages = [
        RoundMessage(m.sender, m.receiver, messages[(m.sender, m.receiver)], m.round_idx, m.seq)
        for m in log.messages
    ]
    return out


# ── FedAVG ───────────────────────────────────────────────────────────


def fedavg_round(world: World, round_idx: int) -> RoundLog:
    """Run round ``round_idx`` of cross-silo FedAVG: all users participate."""
    lr = world.lr.at(round_idx)
    for node in world.nodes:
        node.params = world.global_params
    results = _local_results(world, round_idx, lr)
    log = RoundLog(round=round_idx + 1, consensus_distance=0.0, train_loss={}, params_hash={}, lr=lr)

    uploads = {}
    seq = 0
    for node, res in zip(world.nodes, results):
        v = node.user_id
        log.updates[v] = res.update
        if node.honest:
            log.gradients[v] = res.gradient
        uploads[v] = _outgoing(world, node, res.update, round_idx)

    cfg = world.secure_aggregation
    if cfg.enabled:
        group = SAGroup(
            participants=tuple(uploads), rng=world.rng.child("masks"), threshold=cfg.threshold,
            group_id=SERVER, round_idx=round_idx, mask_scale=cfg.mask_scale,
        )
        group.check_threshold()
        wire = {v: group.masked_share(v, uploads[v]) for v in uploads}
        world.global_params = unmask_sum(group, [wire[v] for v in sorted(wire)]) / len(wire)
        log.sa_outputs[SERVER] = world.global_params * len(wire)
    else:
        wire = uploads
        world.global_params = mean([uploads[v] for v in sorted(uploads)])

    for v in sorted(wire):
        seq += 1
        log.messages.append(RoundMessage(v, SERVER, wire[v], round_idx, seq))
    for v in sorted(wire):
        seq += 1
        log.messages.append(RoundMessage(SERVER, v, world.global_params, round_idx, seq))

    for node, res in zip(world.nodes, results):
        node.params = world.global_params
        node.velocity = res.velocity
        if node.behavior.adversarial:
            node.behavior.observe(round_idx, {SERVER: world.global_params}, {SERVER: wire[node.user_id]})
    log.global_params = world.global_params
    _finish_log(world, log)
    logger.debug(f"FedAVG round {round_idx}: lr={lr:g}")
    return log


def run_round(world: World, engine: str, round_idx: int) -> RoundLog:
    if engine == EngineKind.FEDAVG:
        return fedavg_round(world, round_idx)
    return dpsgd_round(world, round_idx)
