"""Exception types shared across the package."""


class DuologError(Exception):
    """Base class for all package errors."""


class ShapeError(DuologError):
    """Tensor shapes are incompatible for an operation."""


class TokenIndexError(DuologError):
    """A token id falls outside the vocabulary range."""


class CapacityError(DuologError):
    """A sequence does not fit the positional capacity of a model."""


class ConfigError(DuologError):
    """A configuration value is invalid or inconsistent."""


class FormatError(DuologError):
    """Text violates the unified dialog serialization rules."""


class DialogParseError(DuologError):
    """Unified-format text failed to parse.

    ``offset`` is the byte offset (into the UTF-8 encoding of the input)
    where parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IngestionError(DuologError):
    """Tabular dialog records could not be ingested."""


class VocabError(DuologError):
    """A tokenizer vocabulary is malformed or an id is unknown."""


class NonFiniteGradientError(DuologError):
    """A gradient contained NaN or infinity.

    Carries the name of the offending parameter so training can abort
    with a useful message.
    """

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter {param_name!r}")
        self.param_name = param_name


class TrainingAborted(DuologError):
    """Training stopped on a non-finite loss; the last good checkpoint survives."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class TurnOrderError(DuologError):
    """A chat participant spoke out of turn."""
