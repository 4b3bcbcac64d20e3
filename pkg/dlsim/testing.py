"""
dlsim Testing — Small worlds and configs for tests.

Example:
    from dlsim.testing import small_world, run_rounds
    from dlsim.topology import complete

    world = small_world(complete(3), idle=True)
    logs = run_rounds(world, 5)
    assert logs[-1].consensus_distance == 0.0
"""

import copy
import logging
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .data import Dataset, Partition, make_blobs, partition_uniform
from .models import ModelSpec
from .numkit import ParamVec, Rng
from .protocol import IdleTrainer, NodeBehavior, RoundLog, World, build_world, run_round
from .topology import Topology

logger = logging.getLogger("dlsim.testing")


def blob_task(
    n_users: int,
    seed: int = 0,
    n_samples: int = 240,
    input_dim: int = 4,
    num_classes: int = 3,
    spread: float = 1.0,
    holdout_fraction: float = 0.25,
) -> Tuple[Dataset, Partition]:
    """Blob dataset and uniform partition from the usual named streams."""
    rng = Rng(seed)
    dataset = make_blobs(rng.child("data"), n_samples, input_dim, num_classes, spread)
    partition = partition_uniform(rng.child("partition"), dataset, n_users, holdout_fraction)
    return dataset, partition


def small_world(
    topology: Topology,
    seed: int = 0,
    kind: str = "linear-softmax",
    hidden_dim: int = 6,
    lr: float = 0.1,
    behaviors: Optional[Mapping[int, NodeBehavior]] = None,
    idle: bool = False,
    task: Optional[Tuple[Dataset, Partition]] = None,
    **settings,
) -> World:
    """
    A World over ``topology`` on a blob task. ``idle`` swaps in the
    zero-gradient trainer so only aggregation moves parameters.
    """
    dataset, partition = task or blob_task(topology.n, seed=seed)
    spec = ModelSpec(
        kind=kind,
        input_dim=dataset.input_dim,
        num_classes=dataset.num_classes,
        hidden_dim=hidden_dim if kind == "mlp-1-hidden" else 0,
    )
    if idle:
        settings.setdefault("trainer", IdleTrainer())
    settings.setdefault("batch_size", 8)
    return build_world(spec, dataset, partition, topology, Rng(seed), lr, behaviors, **settings)


def run_rounds(world: World, rounds: int, engine: str = "dpsgd", start: int = 0) -> List[RoundLog]:
    return [run_round(world, engine, t) for t in range(start, start + rounds)]


def perturb(world: World, user: int, delta: ParamVec):
    """Add ``delta`` to one user's current parameters."""
    node = world.nodes[user]
    node.params = node.params + delta


def unit(length: int, index: int = 0) -> ParamVec:
    values = [0.0] * length
    values[index] = 1.0
    return ParamVec(values)


BASE_CONFIG: Dict[str, Any] = {
    "seed": 7,
    "n_users": 4,
    "topology": {"kind": "complete"},
    "lr": 0.1,
    "rounds": 3,
    "batch_size": 8,
    "data": {"n_samples": 200, "input_dim": 4, "num_classes": 3},
    "early_stopping": {"enabled": False},
}


def config_dict(**overrides) -> Dict[str, Any]:
    """A small valid raw config; top-level keys in ``overrides`` replace the base ones."""
    out = copy.deepcopy(BASE_CONFIG)
    out.update(copy.deepcopy(overrides))
    return out
