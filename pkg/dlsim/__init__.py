"""
dlsim — Decentralized learning privacy simulator

Deterministic D-PSGD and FedAVG on small models, with the passive and
active attacks a decentralized participant can mount on its neighbors and
the defenses that hook into aggregation.

Install:  pip install -e .
Run:      dlsim run experiment.json
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .errors import DLSimError
from .models import ModelSpec
from .numkit import ParamVec, Rng
from .protocol import World, build_world, consensus_distance, dpsgd_round, fedavg_round, influence_matrix
from .protocol_runner import run_experiment
from .topology import Topology

__all__ = [
    "ExperimentConfig",
    "load_config",
    "DLSimError",
    "ModelSpec",
    "ParamVec",
    "Rng",
    "World",
    "build_world",
    "consensus_distance",
    "dpsgd_round",
    "fedavg_round",
    "influence_matrix",
    "run_experiment",
    "Topology",
    "__version__",
]
