"""
dlsim numkit — Deterministic numeric primitives.

Everything else in the simulator is written against three things defined here:

    ParamVec   flat, immutable vector of 64-bit floats (parameters, model
               updates, gradients and attack payloads all use it)
    Rng        splittable counter-based random source keyed by (seed, stream)
    axpy / l2_norm / mean
               the handful of vector operations the protocol needs

All values are immutable after construction and safe to share across threads.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Sequence, Union

import numpy as np

from .errors import DimensionError, NonFiniteError

logger = logging.getLogger("dlsim.numkit")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


# ── Parameter Vectors ────────────────────────────────────────────────


class ParamVec:
    """
    Flat vector of model parameters.

    The backing array is float64, read-only and checked for NaN/inf on every
    construction, so no public operation can hand out a non-finite vector.
    Binary operations require equal lengths.
    """

    __slots__ = ("_values",)

    def __init__(self, values: Union[Sequence[float], np.ndarray]):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        self._values = _freeze(arr)

    @classmethod
    def _adopt(cls, arr: np.ndarray) -> "ParamVec":
        # Takes ownership of a freshly computed array without copying it.
        vec = cls.__new__(cls)
        vec._values = _freeze(np.asarray(arr, dtype=np.float64).reshape(-1))
        return vec

    @classmethod
    def zeros(cls, length: int) -> "ParamVec":
        return cls._adopt(np.zeros(length))

    # ── Access ───────────────────────────────────────────────────────

    @property
    def values(self) -> np.ndarray:
        """Read-only float64 view of the parameters."""
        return self._values

    def __len__(self) -> int:
        return self._values.shape[0]

    def __iter__(self) -> Iterator[float]:
        return iter(self._values.tolist())

    def __getitem__(self, index):
        item = self._values[index]
        if isinstance(item, np.ndarray):
            return item.copy()
        return float(item)

    def to_list(self) -> List[float]:
        return self._values.tolist()

    def to_bytes(self) -> bytes:
        """Little-endian byte image of the parameters."""
        return self._values.astype("<f8").tobytes()

    def digest(self) -> str:
        """FNV-1a 64 hash of the byte image, as 16 hex digits."""
        return f"{fnv1a64(self.to_bytes()):016x}"

    # ── Arithmetic ───────────────────────────────────────────────────

    def _check(self, other: "ParamVec"):
        if not isinstance(other, ParamVec):
            raise TypeError(f"expected ParamVec, got {type(other).__name__}")
        if len(other) != len(self):
            raise DimensionError(f"length mismatch: {len(self)} vs {len(other)}")

    def __add__(self, other: "ParamVec") -> "ParamVec":
        self._check(other)
        return ParamVec._adopt(self._values + other._values)

    def __sub__(self, other: "ParamVec") -> "ParamVec":
        self._check(other)
        return ParamVec._adopt(self._values - other._values)

    def __neg__(self) -> "ParamVec":
        return ParamVec._adopt(-self._values)

    def __mul__(self, scalar: float) -> "ParamVec":
        return ParamVec._adopt(self._values * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "ParamVec":
        return ParamVec._adopt(self._values / float(scalar))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVec):
            return NotImplemented
        return len(self) == len(other) and bool(np.array_equal(self._values, other._values))

    __hash__ = None

    def max_abs_diff(self, other: "ParamVec") -> float:
        self._check(other)
        if len(self) == 0:
            return 0.0
        return float(np.max(np.abs(self._values - other._values)))

    def __repr__(self):
        head = ", ".join(f"{v:.6g}" for v in self._values[:4])
        more = ", ..." if len(self) > 4 else ""
        return f"<ParamVec len={len(self)} [{head}{more}]>"


def _freeze(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("parameter vector contains NaN or infinite values")
    arr.setflags(write=False)
    return arr


# ── Vector Operations ────────────────────────────────────────────────


def axpy(a: float, x: ParamVec, y: ParamVec) -> ParamVec:
    """Return a·x + y."""
    x._check(y)
    return ParamVec._adopt(float(a) * x.values + y.values)


def l2_norm(x: ParamVec) -> float:
    """Euclidean norm."""
    return float(np.linalg.norm(x.values))


def mean(vs: Sequence[ParamVec]) -> ParamVec:
    """
    Elementwise mean.

    Accumulated as offsets from the first vector, so identical inputs
    come back unchanged. Summation runs left to right in the given order;
    callers that need bit-identical results across engines pass vectors
    sorted by user id.
    """
    if not vs:
        raise DimensionError("mean of an empty list")
    first = vs[0]
    offset = np.zeros(len(first), dtype=np.float64)
    for vec in vs[1:]:
        first._check(vec)
        offset += vec.values - first.values
    return ParamVec._adopt(first.values + offset / len(vs))


def stack(vs: Iterable[ParamVec]) -> np.ndarray:
    """Rows-of-vectors matrix (copy), for vectorized metrics."""
    return np.vstack([v.values for v in vs])


# ── Randomness ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class Rng:
    """
    Splittable, counter-based random source.

    Draws come from ``Philox`` keyed by ``SeedSequence(seed, spawn_key=(stream_id,
    counter))``, so a given (seed, stream_id, counter) yields the same sequence on
    every platform and in any execution order. Named sub-streams are derived with
    :meth:`child`.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not 0 <= int(value) <= _MASK64:
                raise ValueError(f"Rng {name} must be a 64-bit unsigned integer, got {value!r}")

    def child(self, name: Union[str, int]) -> "Rng":
        """Independent stream named relative to this one (e.g. ``"batches/3"``)."""
        key = f"{self.stream_id}/{name}".encode("utf-8")
        return Rng(self.seed, fnv1a64(key))

    def generator(self, counter: int = 0) -> np.random.Generator:
        """Fresh numpy Generator positioned at the start of block ``counter``."""
        seq = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.stream_id), int(counter))
        )
        return np.random.Generator(np.random.Philox(seq))

    def int_seed(self, counter: int = 0) -> int:
        """32-bit integer seed for libraries that take plain ints (networkx)."""
        return int(self.generator(counter).integers(0, 2**32 - 1))
