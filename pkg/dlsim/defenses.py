"""
dlsim Defenses — Self-centered clipping aggregation and local noise.

Both hook into the round engine through configuration: clipping replaces the
plain mean at the aggregation point, noise perturbs each outgoing update at
the broadcast point. Noise is a mechanism knob only; there is no privacy
accounting.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError
from .numkit import ParamVec, Rng, l2_norm

logger = logging.getLogger("dlsim.defenses")


@dataclass(frozen=True)
class ClipConfig:
    tau: float

    def __post_init__(self):
        if not math.isfinite(self.tau) or self.tau < 0:
            raise ValueError(f"clipping tau must be finite and ≥ 0, got {self.tau}")


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float

    def __post_init__(self):
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"noise sigma must be finite and ≥ 0, got {self.sigma}")


@dataclass(frozen=True)
class DefenseConfig:
    clipping: Optional[ClipConfig] = None
    noise: Optional[NoiseConfig] = None


def clip(x: ParamVec, tau: float) -> ParamVec:
    """CLIP(x, τ) = min(1, τ/‖x‖)·x; the zero vector when τ = 0."""
    norm = l2_norm(x)
    if norm <= tau:
        return x
    return ParamVec._adopt(x.values * (tau / norm))


def self_centered_aggregate(own: ParamVec, received: Sequence[ParamVec], tau: float) -> ParamVec:
    """
    Σ_{u∈nn(v)} w·(Θ_v + CLIP(Θ_u − Θ_v, τ)) with w = 1/|nn(v)|.

    ``received`` holds the neighbors' updates (not the node's own); the own
    term contributes w·Θ_v since CLIP(0) = 0.
    """
    for r in received:
        if len(r) != len(own):
            raise DimensionError(f"length mismatch: {len(own)} vs {len(r)}")
    if tau == 0:
        # Non-collaborative limit; skip the sum so the result is bit-exact.
        return own
    total = np.array(own.values)
    for r in received:
        total += own.values + clip(r - own, tau).values
    return ParamVec._adopt(total / (len(received) + 1))


def noisy_update(x: ParamVec, rng: Rng, sigma: float, counter: int = 0) -> ParamVec:
    """x + N(0, σ²) per coordinate."""
    if sigma < 0:
        raise ValueError(f"sigma must be ≥ 0, got {sigma}")
    if sigma == 0:
        return x
    noise = rng.generator(counter).normal(0.0, sigma, size=len(x))
    return ParamVec._adopt(x.values + noise)
