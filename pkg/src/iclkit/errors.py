"""Exception hierarchy shared by every iclkit module."""
from __future__ import annotations


class ICLError(Exception):
    """Base class for all iclkit errors."""


class InputContractError(ICLError, ValueError):
    """An argument violates a documented shape or value contract."""


class IllegalStateError(ICLError, RuntimeError):
    """An operation was called in a model/trainer state that forbids it."""


class DegenerateSimilarityError(InputContractError):
    """Cosine similarity requested for a zero-norm vector."""


class StreamContractError(InputContractError):
    """Class sets that must be disjoint overlap, or a step is empty."""


class ProtocolError(InputContractError):
    """Class counts do not fit the requested incremental protocol."""


class SpecError(InputContractError):
    """An invalid synthetic-data description."""


class IngestionError(ICLError):
    """A dataset on disk could not be read."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class TrainingDivergenceError(ICLError, FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, phase: str, epoch: int, step: int, value: float):
        self.phase = phase
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} in phase {phase} at epoch {epoch} (step {step})"
        )


class ConfigError(ICLError, ValueError):
    """Experiment configuration failed validation.

    ``field`` holds the dotted path of the offending entry.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ReportingError(ICLError):
    """A run directory is incomplete or unreadable for reporting."""
