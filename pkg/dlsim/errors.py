"""
dlsim Errors — Exception hierarchy shared by every module.

Each exception carries an ``exit_code`` that the CLI turns into the process
status, so library code only ever raises and ``cli.main`` decides how to exit:

    0  ok
    2  configuration / input errors
    3  attack precondition errors
    4  I/O errors
"""

from typing import List, Optional, Sequence, Tuple


class DLSimError(Exception):
    """Base class for all simulator errors."""

    exit_code: int = 1

    def __init__(self, detail: str = ""):
        self.detail = detail
        super().__init__(detail)


# ── Numeric ──────────────────────────────────────────────────────────


class DimensionError(DLSimError, ValueError):
    """Length or shape mismatch between vectors, parameters and batches."""


class NonFiniteError(DLSimError, ValueError):
    """A parameter vector would contain NaN or infinite values."""


# ── Inputs ───────────────────────────────────────────────────────────


class DataFormatError(DLSimError, ValueError):
    """Malformed dataset input or invalid generator arguments."""

    exit_code = 2

    def __init__(self, detail: str = "", line: Optional[int] = None):
        self.line = line
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)


class TopologyError(DLSimError, ValueError):
    """Invalid topology arguments or a graph violating the topology invariants."""

    exit_code = 2

    def __init__(
        self,
        detail: str = "",
        components: Optional[List[List[int]]] = None,
        attempts: Optional[int] = None,
    ):
        self.components = components
        self.attempts = attempts
        super().__init__(detail)


class ConfigError(DLSimError):
    """
    Configuration rejected by the schema.

    All problems are collected before raising; each is a (json_pointer, message)
    pair such as ``("/lr", "required key missing")``.
    """

    exit_code = 2

    def __init__(self, problems: Sequence[Tuple[str, str]]):
        self.problems = list(problems)
        lines = [f"{pointer}: {message}" for pointer, message in self.problems]
        super().__init__("invalid configuration\n  " + "\n  ".join(lines))


# ── Attack preconditions ─────────────────────────────────────────────


class PreconditionError(DLSimError):
    """An attack or experiment was asked to run outside its preconditions."""

    exit_code = 3


class CoverageError(PreconditionError):
    """The attacker does not observe every neighbor of the victim."""


class UninvertibleError(PreconditionError):
    """Gradient carries no signal to invert (perfectly fit sample)."""


class MarginalizationError(PreconditionError):
    """Too few neighbors to marginalize a victim's update."""


class SecAggError(PreconditionError):
    """Secure aggregation could not produce an output."""


# ── I/O ──────────────────────────────────────────────────────────────


class RunIOError(DLSimError):
    """File-system failure while reading or writing run artifacts."""

    exit_code = 4

    def __init__(self, detail: str = "", path: Optional[str] = None):
        self.path = path
        if path is not None:
            detail = f"{path}: {detail}"
        super().__init__(detail)
