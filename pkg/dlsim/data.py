"""
dlsim Data — Datasets, CSV ingestion and uniform partitioning across users.

Every user gets a disjoint, uniformly sampled shard of equal size; rows that
do not fit go to the holdout pool, which doubles as the validation set and
as the source of membership-inference non-members.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DataFormatError, RunIOError
from .models import Batch
from .numkit import Rng

logger = logging.getLogger("dlsim.data")


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus dense integer labels 0..C−1."""

    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] != labels.shape[0]:
            raise DataFormatError("inputs must be a matrix with one row per label")
        if np.unique(labels).shape[0] < 2:
            raise DataFormatError("dataset needs at least 2 classes")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def batch(self, rows: Sequence[int]) -> Batch:
        idx = np.asarray(rows, dtype=np.int64)
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True)
class Partition:
    """Disjoint per-user shards plus the holdout pool (row indices)."""

    shards: Tuple[Tuple[int, ...], ...]
    holdout: Tuple[int, ...]

    @property
    def n_users(self) -> int:
        return len(self.shards)

    @property
    def shard_size(self) -> int:
        return len(self.shards[0]) if self.shards else 0

    def digest(self) -> str:
        """Content hash, recorded in run manifests to prove paired runs share it."""
        h = hashlib.sha256()
        for shard in self.shards:
            h.update(np.asarray(shard, dtype="<i8").tobytes())
            h.update(b"|")
        h.update(np.asarray(self.holdout, dtype="<i8").tobytes())
        return h.hexdigest()


# ── Generation ───────────────────────────────────────────────────────


def make_blobs(
    rng: Rng,
    n_samples: int,
    input_dim: int,
    num_classes: int,
    spread: float,
    radius: float = 3.0,
) -> Dataset:
    """
    Gaussian clusters, one per class.

    Class means are random directions scaled to ``radius``; samples are drawn
    around them with standard deviation ``spread``. Classes are balanced to
    within one sample.
    """
    if num_classes < 2 or n_samples < num_classes:
        raise DataFormatError(f"need n_samples ≥ num_classes ≥ 2, got {n_samples}, {num_classes}")
    if input_dim < 1:
        raise DataFormatError(f"input_dim must be ≥ 1, got {input_dim}")
    if spread <= 0:
        raise DataFormatError(f"spread must be > 0, got {spread}")

    gen = rng.generator()
    directions = gen.normal(size=(num_classes, input_dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    means = radius * directions / np.where(norms > 0, norms, 1.0)

    labels = gen.permutation(np.arange(n_samples) % num_classes)
    inputs = means[labels] + spread * gen.normal(size=(n_samples, input_dim))
    logger.debug(f"make_blobs: {n_samples} samples, {num_classes} classes, dim {input_dim}")
    return Dataset(inputs, labels, name=f"blobs-{num_classes}x{input_dim}")


# ── CSV Ingestion ────────────────────────────────────────────────────


def load_csv(path) -> Dataset:
    """
    Parse ``f1,f2,...,fk,label`` rows (no header, UTF-8, LF or CRLF).

    Labels are remapped to 0..C−1 in first-occurrence order.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise RunIOError(str(e), path=str(path))

    rows: List[List[float]] = []
    raw_labels: List[int] = []
    width = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) < 2:
            raise DataFormatError("expected at least one feature and a label", line=line_no)
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise DataFormatError(
                f"expected {width - 1} features, found {len(cells) - 1}", line=line_no
            )
        try:
            features = [float(c) for c in cells[:-1]]
        except ValueError:
            raise DataFormatError("non-numeric feature", line=line_no)
        if not all(math.isfinite(v) for v in features):
            raise DataFormatError("non-finite feature", line=line_no)
        try:
            label = int(cells[-1])
        except ValueError:
            raise DataFormatError(f"label {cells[-1]!r} is not an integer", line=line_no)
        rows.append(features)
        raw_labels.append(label)

    if not rows:
        raise DataFormatError(f"{path}: empty file")

    remap: Dict[int, int] = {}
    for label in raw_labels:
        remap.setdefault(label, len(remap))
    labels = [remap[label] for label in raw_labels]
    logger.info(f"Loaded {len(rows)} samples, {width - 1} features, {len(remap)} classes from {path}")
    return Dataset(np.array(rows), np.array(labels), name=path.stem)


# ── Partitioning ─────────────────────────────────────────────────────


def partition_uniform(rng: Rng, dataset: Dataset, n_users: int, holdout_fraction: float) -> Partition:
    """
    Draw the holdout first (⌈fraction·|X|⌉ rows), then split the shuffled
    remainder into ``n_users`` equal shards; leftover rows join the holdout.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise DataFormatError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    if n_users < 2:
        raise DataFormatError(f"n_users must be ≥ 2, got {n_users}")

    total = len(dataset)
    n_holdout = math.ceil(holdout_fraction * total)
    shard_size = (total - n_holdout) // n_users
    if shard_size < 1:
        raise DataFormatError(
            f"too few rows: {total} rows with holdout {n_holdout} cannot give {n_users} shards"
        )

    order = rng.generator().permutation(total)
    holdout = list(order[:n_holdout])
    rest = order[n_holdout:]
    shards = tuple(
        tuple(sorted(int(r) for r in rest[i * shard_size:(i + 1) * shard_size]))
        for i in range(n_users)
    )
    holdout.extend(rest[n_users * shard_size:])
    return Partition(shards=shards, holdout=tuple(sorted(int(r) for r in holdout)))


def sample_batch(rows: Sequence[int], batch_size: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform mini-batch of row indices, without replacement within the batch."""
    rows = np.asarray(rows, dtype=np.int64)
    if batch_size >= rows.shape[0]:
        return rows.copy()
    return np.sort(gen.choice(rows, size=batch_size, replace=False))


def sample_nonmembers(partition: Partition, size: int, gen: np.random.Generator) -> np.ndarray:
    """Non-member rows for MIA, drawn from the holdout pool."""
    if size > len(partition.holdout):
        raise DataFormatError(
            f"holdout has {len(partition.holdout)} rows, cannot sample {size} non-members"
        )
    return np.sort(gen.choice(np.asarray(partition.holdout), size=size, replace=False))
