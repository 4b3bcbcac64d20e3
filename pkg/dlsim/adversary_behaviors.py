"""
dlsim Adversary — Node behaviors that plug into the round engine.

    PassiveBehavior         trains honestly, records every message it receives
    EchoBehavior            broadcasts the victim's (marginalized) update back
                            to all its neighbors every round, never trains
    StateOverrideBehavior   forges, per target, the update that makes the
                            target's aggregate equal an attacker-chosen payload
    SAColluderBehavior      follows the protocol; optionally claims the victim
                            dropped out of its secure-aggregation group

Every behavior keeps an ObservedHistory built only from messages addressed
to its own node.
"""

import logging
from typing import Dict, FrozenSet, Mapping, Optional, Sequence, Tuple

from .adversary import ObservedHistory, marginalize_updates
from .errors import CoverageError
from .numkit import ParamVec
from .protocol import NodeBehavior

logger = logging.getLogger("dlsim.adversary.behaviors")


class AdversaryRole:
    NONE = "none"
    PASSIVE = "passive"
    ECHO = "echo"
    STATE_OVERRIDE = "state-override"
    SA_COLLUDERS = "sa-colluders"


class ObservingBehavior(NodeBehavior):
    """Common base: keeps the node's ObservedHistory."""

    def __init__(self):
        super().__init__()
        self.history: Optional[ObservedHistory] = None

    def attach(self, user_id: int, neighbors: Tuple[int, ...], initial_params: ParamVec):
        super().attach(user_id, neighbors, initial_params)
        self.history = ObservedHistory(user_id, neighbors, initial_params)

    def observe(self, round_idx: int, inbox: Mapping[int, ParamVec], sent: Mapping[int, ParamVec]):
        self.history.record(round_idx, inbox, sent)

    def observe_aggregate(self, round_idx: int, total: ParamVec, survivors: Tuple[int, ...]):
        self.history.record_aggregate(round_idx, total)

    def _latest(self, round_idx: int, inbox: Optional[Mapping[int, ParamVec]]) -> Optional[Mapping[int, ParamVec]]:
        """This round's inbox when rushing, else the previous round's (None in round 0)."""
        if inbox is not None:
            return inbox
        return self.history.received.get(round_idx - 1)


class PassiveBehavior(ObservingBehavior):
    role = "passive"


# ── Echo ─────────────────────────────────────────────────────────────


class EchoSource:
    MARGINALIZED = "marginalized"
    RECEIVED = "received"


class EchoBehavior(ObservingBehavior):
    """
    Sends Θ̃ to every neighbor, where Θ̃ is the victim's marginalized update
    (or its raw update when marginalization is impossible or not requested).
    """

    role = "echo"
    trains = False
    active = True

    def __init__(self, victim: int, source: str = EchoSource.MARGINALIZED):
        super().__init__()
        self.victim = victim
        self.source = source
        self._warned = False

    def attach(self, user_id: int, neighbors: Tuple[int, ...], initial_params: ParamVec):
        if self.victim not in neighbors or self.victim == user_id:
            raise CoverageError(f"echo victim {self.victim} ∉ nn({user_id})")
        super().attach(user_id, neighbors, initial_params)

    def echo_update(self, updates: Mapping[int, ParamVec]) -> ParamVec:
        victim_update = updates[self.victim]
        if self.source == EchoSource.RECEIVED:
            return victim_update
        others = [updates[u] for u in self.neighbors if u not in (self.victim, self.user_id)]
        if not others:
            if not self._warned:
                logger.warning(
                    f"Echo: nn({self.user_id}) has fewer than 3 users, echoing the raw update of {self.victim}"
                )
                self._warned = True
            return victim_update
        return marginalize_updates(victim_update, others)

    def forge(self, round_idx: int, own: ParamVec, inbox: Optional[Mapping[int, ParamVec]]) -> Dict[int, ParamVec]:
        updates = self._latest(round_idx, inbox)
        forged = own if updates is None else self.echo_update(updates)
        return {u: forged for u in self.neighbors if u != self.user_id}


# ── State Override ───────────────────────────────────────────────────


class StateOverrideBehavior(ObservingBehavior):
    """
    For each target v with payload Θ̃ sends

        Θ_A = −Σ_{u∈nn(v)\\A} Θ_u^{t+1/2} + |nn(v)|·Θ̃

    so v's aggregate becomes Θ̃. Rushing makes the cancellation exact; in a
    synchronous schedule the previous round's updates stand in (stale).
    Non-targets receive the attacker's own state.
    """

    role = "state-override"
    trains = False
    active = True

    def __init__(self, payloads: Mapping[int, ParamVec], target_neighbors: Mapping[int, Sequence[int]]):
        super().__init__()
        self.payloads = dict(payloads)
        self.target_neighbors = {v: tuple(sorted(n)) for v, n in target_neighbors.items()}
        missing = set(self.payloads) - set(self.target_neighbors)
        if missing:
            raise CoverageError(f"neighbor sets unknown for targets {sorted(missing)}")
        self._initial: Optional[ParamVec] = None

    def attach(self, user_id: int, neighbors: Tuple[int, ...], initial_params: ParamVec):
        for v in sorted(self.payloads):
            if v == user_id:
                raise CoverageError(f"attacker {user_id} cannot target itself")
            uncovered = sorted(set(self.target_neighbors[v]) - set(neighbors))
            if uncovered:
                raise CoverageError(f"nn({v}) ⊄ nn({user_id}): missing {uncovered}")
            if len(self.payloads[v]) != len(initial_params):
                raise CoverageError(f"payload for {v} has wrong length {len(self.payloads[v])}")
        super().attach(user_id, neighbors, initial_params)
        self._initial = initial_params

    def forged_update(self, target: int, updates: Optional[Mapping[int, ParamVec]]) -> ParamVec:
        others = [u for u in self.target_neighbors[target] if u != self.user_id]
        payload = self.payloads[target]
        total = payload * len(self.target_neighbors[target])
        for u in others:
            estimate = updates.get(u) if updates is not None else None
            total = total - (estimate if estimate is not None else self._initial)
        return total

    def forge(self, round_idx: int, own: ParamVec, inbox: Optional[Mapping[int, ParamVec]]) -> Dict[int, ParamVec]:
        updates = self._latest(round_idx, inbox)
        out = {}
        for u in self.neighbors:
            if u == self.user_id:
                continue
            out[u] = self.forged_update(u, updates) if u in self.payloads else own
        logger.debug(f"Override: round {round_idx}, targets {sorted(self.payloads)}, exact={inbox is not None}")
        return out


# ── Secure-Aggregation Colluders ─────────────────────────────────────


class SAColluderBehavior(ObservingBehavior):
    """Protocol-following colluder; with ``drop_victim`` its SA group excludes the victim."""

    role = "sa-colluder"

    def __init__(self, victim: int, drop_victim: bool = False):
        super().__init__()
        self.victim = victim
        self.drop_victim = drop_victim

    def sa_dropped(self, round_idx: int) -> FrozenSet[int]:
        return frozenset({self.victim}) if self.drop_victim else frozenset()
