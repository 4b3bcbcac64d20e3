"""
dlsim Adversary — What a node learns from the messages addressed to it.

Passive attacks work on an ObservedHistory: the per-round updates an
adversarial node received from its neighbors (and what it sent them). From
that history:

    mentr / mia_accuracy    membership inference on any parameter vector
    recover_gradient        replay the victim's aggregation, then
                            (Θ_v^t − Θ_v^{t+1/2}) / lr is its exact gradient
    marginalize             isolate the victim's own contribution from the
                            mixture of updates it sent

Usage:
    history = behavior.history
    g = recover_gradient(history, victim=3, round_idx=7, lr=0.1,
                         victim_neighbors=topology.neighbors(3))
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import CoverageError, DimensionError, MarginalizationError
from .models import Batch, ModelSpec, predict_proba
from .numkit import ParamVec, mean

logger = logging.getLogger("dlsim.adversary")

PROB_FLOOR = 1e-12


# ── Observation ──────────────────────────────────────────────────────


@dataclass
class ObservedHistory:
    """
    Everything one node saw: ``received[t][sender]`` and ``sent[t][receiver]``
    for round t, plus SA outputs when secure aggregation hides single updates.
    """

    observer: int
    neighbors: Tuple[int, ...]
    initial_params: Optional[ParamVec] = None
    received: Dict[int, Dict[int, ParamVec]] = field(default_factory=dict)
    sent: Dict[int, Dict[int, ParamVec]] = field(default_factory=dict)
    aggregates: Dict[int, ParamVec] = field(default_factory=dict)

    def record(self, round_idx: int, inbox: Mapping[int, ParamVec], sent: Mapping[int, ParamVec]):
        self.received[round_idx] = dict(inbox)
        self.sent[round_idx] = dict(sent)

    def record_aggregate(self, round_idx: int, total: ParamVec):
        self.aggregates[round_idx] = total

    @property
    def rounds(self) -> Tuple[int, ...]:
        return tuple(sorted(self.received))

    def update(self, round_idx: int, sender: int) -> ParamVec:
        """The update ``sender`` sent to the observer in ``round_idx``."""
        try:
            return self.received[round_idx][sender]
        except KeyError:
            raise CoverageError(
                f"victim not fully observable: no update from {sender} in round {round_idx}"
            )

    def scaled(self, s: float) -> "ObservedHistory":
        """Copy with every observed vector multiplied by ``s``."""
        return ObservedHistory(
            observer=self.observer,
            neighbors=self.neighbors,
            initial_params=self.initial_params * s if self.initial_params is not None else None,
            received={t: {u: x * s for u, x in m.items()} for t, m in self.received.items()},
            sent={t: {u: x * s for u, x in m.items()} for t, m in self.sent.items()},
            aggregates={t: x * s for t, x in self.aggregates.items()},
        )


# ── Membership Inference ─────────────────────────────────────────────


def mentr(probs: Sequence[float], label: int) -> float:
    """
    Label-informed (modified) entropy:
    −(1−p_y)·ln(p_y) − Σ_{i≠y} p_i·ln(1−p_i), with p clamped to [1e-12, 1−1e-12].
    """
    p = np.asarray(probs, dtype=np.float64).reshape(1, -1)
    return float(mentr_scores(p, np.array([label]))[0])


def mentr_scores(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mentr`, one score per row."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(p.shape[0])
    py = p[rows, labels]
    other = -p * np.log(1.0 - p)
    other[rows, labels] = 0.0
    scores = -(1.0 - py) * np.log(py) + other.sum(axis=1)
    return np.maximum(scores, 0.0)


def threshold_accuracy(member_scores: Sequence[float], nonmember_scores: Sequence[float]) -> float:
    """
    Best balanced accuracy of "member iff score < ρ" over every threshold
    that separates the observed scores, minus the 0.5 guessing baseline.
    """
    members = np.sort(np.asarray(member_scores, dtype=np.float64))
    nonmembers = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
    if members.size == 0 or nonmembers.size == 0:
        raise DimensionError("membership inference needs non-empty member and non-member sets")
    if members.size != nonmembers.size:
        raise DimensionError(f"|X| = {members.size} must equal |O| = {nonmembers.size}")

    values = np.unique(np.concatenate([members, nonmembers]))
    thresholds = np.concatenate([
        [values[0] - 1.0],
        (values[:-1] + values[1:]) / 2.0,
        [values[-1] + 1.0],
    ])
    true_pos = np.searchsorted(members, thresholds, side="left") / members.size
    true_neg = 1.0 - np.searchsorted(nonmembers, thresholds, side="left") / nonmembers.size
    best = float(np.max((true_pos + true_neg) / 2.0))
    return best - 0.5


def mia_accuracy(spec: ModelSpec, params: ParamVec, members: Batch, nonmembers: Batch) -> float:
    """Centered MIA vulnerability of ``params``: in [−0.5, 0.5], 0 means no signal."""
    m = mentr_scores(predict_proba(spec, params, members.inputs), members.labels)
    o = mentr_scores(predict_proba(spec, params, nonmembers.inputs), nonmembers.labels)
    return threshold_accuracy(m, o)


# ── Gradient Recovery ────────────────────────────────────────────────


def _check_coverage(history: ObservedHistory, victim: int, victim_neighbors: Sequence[int]):
    missing = sorted(set(victim_neighbors) - set(history.neighbors))
    if missing:
        raise CoverageError(
            f"nn({victim}) ⊄ nn({history.observer}): attacker does not see {missing}"
        )


def replay_aggregate(
    history: ObservedHistory, victim: int, round_idx: int, victim_neighbors: Sequence[int]
) -> ParamVec:
    """Θ_v^{t}: the victim's line-8 mean of round t−1, rebuilt from observed updates."""
    _check_coverage(history, victim, victim_neighbors)
    if round_idx == 0:
        if history.initial_params is None:
            raise CoverageError("victim not fully observable: initial parameters unknown")
        return history.initial_params
    prev = round_idx - 1
    terms = []
    for u in sorted(victim_neighbors):
        if u == history.observer:
            try:
                terms.append(history.sent[prev][victim])
            except KeyError:
                raise CoverageError(f"victim not fully observable: no update to {victim} in round {prev}")
        else:
            terms.append(history.update(prev, u))
    return mean(terms)


def recover_gradient(
    history: ObservedHistory,
    victim: int,
    round_idx: int,
    lr: float,
    victim_neighbors: Sequence[int],
    local_steps: int = 1,
) -> ParamVec:
    """
    (Θ_v^t − Θ_v^{t+1/2}) / lr.

    Exact ∇L(ξ_v^t) for one local step; for more steps this is the accumulated
    pseudo-gradient of the round.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if local_steps > 1:
        logger.warning(f"recover_gradient: local_steps={local_steps}, returning the pseudo-gradient")
    before = replay_aggregate(history, victim, round_idx, victim_neighbors)
    after = history.update(round_idx, victim)
    return (before - after) / lr


# ── Functional Marginalization ───────────────────────────────────────


def marginalize_updates(victim_update: ParamVec, others: Sequence[ParamVec]) -> ParamVec:
    """k·(Θ_v − mean(others)) with k = number of others + 1 = |nn(A)| − 1."""
    if not others:
        raise MarginalizationError("marginalization needs |nn(A)| ≥ 3")
    k = len(others) + 1
    return (victim_update - mean(list(others))) * k


def marginalize(history: ObservedHistory, victim: int, round_idx: int) -> ParamVec:
    """Functionally marginalized update of ``victim`` from the observer's round inbox."""
    if victim not in history.neighbors or victim == history.observer:
        raise CoverageError(f"{victim} is not a neighbor of {history.observer}")
    if len(history.neighbors) < 3:
        raise MarginalizationError(
            f"marginalization needs |nn(A)| ≥ 3, nn({history.observer}) has {len(history.neighbors)}"
        )
    others = [
        history.update(round_idx, u)
        for u in history.neighbors
        if u not in (victim, history.observer)
    ]
    return marginalize_updates(history.update(round_idx, victim), others)
