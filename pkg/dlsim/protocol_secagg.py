"""
dlsim Protocol — Simulated secure aggregation (SA).

Participants add cancelling pairwise masks to their inputs: for each pair
i < j, i adds +m_ij and j adds −m_ij. Summing the masked shares of all
participants cancels every mask; when some participants drop out, the
aggregator reconstructs the masks they shared with the survivors and strips
them, so the output is exactly the sum over survivors.

The construction is cryptographically trivial (masks come from a seeded
stream): what matters for the simulator is that only the sum is observable,
never an individual input.
"""

import logging
from dataclasses import dataclass
from typing import FrozenSet, Iterable, Mapping, Tuple

import numpy as np

from .errors import SecAggError
from .numkit import ParamVec, Rng

logger = logging.getLogger("dlsim.protocol.secagg")


@dataclass(frozen=True)
class SAGroup:
    """One aggregation group: who takes part, who dropped, and the survival threshold."""

    participants: Tuple[int, ...]
    rng: Rng
    threshold: int = 1
    dropped: FrozenSet[int] = frozenset()
    group_id: int = 0
    round_idx: int = 0
    mask_scale: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "participants", tuple(sorted(set(self.participants))))
        object.__setattr__(self, "dropped", frozenset(self.dropped))
        unknown = self.dropped - set(self.participants)
        if unknown:
            raise SecAggError(f"SA: dropped users {sorted(unknown)} are not participants")

    @property
    def survivors(self) -> Tuple[int, ...]:
        return tuple(u for u in self.participants if u not in self.dropped)

    def pair_mask(self, i: int, j: int, length: int) -> np.ndarray:
        """Mask shared by participants i < j; i adds it, j subtracts it."""
        if i >= j:
            raise ValueError("pair_mask expects i < j")
        stream = self.rng.child(f"masks/{self.group_id}/{i}/{j}")
        return stream.generator(self.round_idx).normal(0.0, self.mask_scale, size=length)

    def masked_share(self, user: int, value: ParamVec) -> ParamVec:
        """What ``user`` actually sends: its input plus all its pairwise masks."""
        if user not in self.participants:
            raise SecAggError(f"SA: user {user} is not a participant of group {self.group_id}")
        share = np.array(value.values)
        for other in self.participants:
            if other == user:
                continue
            if user < other:
                share += self.pair_mask(user, other, len(value))
            else:
                share -= self.pair_mask(other, user, len(value))
        return ParamVec._adopt(share)

    def check_threshold(self):
        alive = len(self.survivors)
        if alive < self.threshold:
            raise SecAggError(
                f"SA: group {self.group_id} has {alive} surviving participants, "
                f"below threshold {self.threshold}"
            )


def secure_aggregate(group: SAGroup, inputs: Mapping[int, ParamVec]) -> ParamVec:
    """
    Sum of the survivors' inputs computed through masked shares only.

    Inputs of dropped participants are ignored even if supplied.
    """
    group.check_threshold()
    survivors = group.survivors
    missing = [u for u in survivors if u not in inputs]
    if missing:
        raise SecAggError(f"SA: missing inputs for participants {missing}")

    shares = [group.masked_share(u, inputs[u]) for u in survivors]
    return unmask_sum(group, shares)


def unmask_sum(group: SAGroup, shares: Iterable[ParamVec]) -> ParamVec:
    """Aggregator side: add the survivors' shares, then strip masks shared with dropped users."""
    shares = list(shares)
    if not shares:
        raise SecAggError(f"SA: group {group.group_id} has no shares to aggregate")
    length = len(shares[0])
    total = np.zeros(length)
    for share in shares:
        total += share.values

    for d in sorted(group.dropped):
        for s in group.survivors:
            if s < d:
                total -= group.pair_mask(s, d, length)
            else:
                total += group.pair_mask(d, s, length)
    if group.dropped:
        logger.debug(f"SA: group {group.group_id} recovered from dropouts {sorted(group.dropped)}")
    return ParamVec._adopt(total)


def plain_sum(inputs: Mapping[int, ParamVec], users: Iterable[int]) -> ParamVec:
    """Reference sum in sorted user order, used to check the masked path."""
    users = sorted(users)
    total = np.zeros(len(inputs[users[0]]))
    for u in users:
        total += inputs[u].values
    return ParamVec._adopt(total)
