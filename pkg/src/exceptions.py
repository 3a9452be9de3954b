"""
src/exceptions.py - Custom Exceptions for the OOD Self-Distillation Toolkit

This module defines the exception classes used throughout the training and
evaluation pipeline. Every exception derives from OODError so the CLI can map
whole families of failures onto its stable exit codes.

EXCEPTIONS:
-----------
ConfigError:
    Invalid or unknown configuration field. Carries the dotted field path
    (e.g. "loss.tau_s") so the user can fix the YAML directly.

DataError / DataFormatError:
    Dataset could not be loaded. DataFormatError additionally carries the
    byte offset of the first malformed record (CIFAR binary files).

DimensionError:
    Shape mismatch inside the tensor core or a transform (non-square rotate).

ParameterError:
    Out-of-range numeric parameter (tau <= 0, momentum outside [0, 1], k > M).

UsageError:
    API misuse (backward on a non-scalar, empty AUROC input).

NumericalError:
    NaN/Inf produced during a forward pass or loss computation. Carries an
    optional context dict (step, epoch, batch seeds) for the failure dump.

USAGE:
------
    from src.exceptions import ConfigError, NumericalError

    if tau_t >= tau_s:
        raise ConfigError("loss.tau_t_start", "must be smaller than loss.tau_s")

EXIT CODES (src/cli/main.py):
-----------------------------
    ConfigError, DataError, DataFormatError -> 2
    NumericalError                          -> 3
"""


class OODError(Exception):
    """Base class for every error raised by this package."""
    pass


class ConfigError(OODError):
    """
    Raised when an experiment config field is unknown, mistyped or out of range.

    Attributes:
        field (str): Dotted path of the offending field ("optim.base_lr")
        reason (str): Human-readable explanation

    Example:
        raise ConfigError("negatives.grid_n", "expected one of [1, 2, 4], got 3")
    """

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class DataError(OODError):
    """Dataset missing, empty, or otherwise unusable."""
    pass


class DataFormatError(DataError):
    """
    Raised when a binary dataset file does not match its record layout.

    Attributes:
        offset (int): Byte offset of the first incomplete/malformed record
    """

    def __init__(self, message: str, offset: int = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DimensionError(OODError):
    """Shape mismatch between operands."""
    pass


class ParameterError(OODError):
    """Numeric parameter outside its valid range."""
    pass


class UsageError(OODError):
    """API called in a way its contract does not allow."""
    pass


class NumericalError(OODError):
    """
    Raised when a computation produces NaN or Inf.

    Attributes:
        context (dict): Where it happened - op name, step, epoch, batch seeds.
                        The trainer extends this dict before re-raising so the
                        CLI can dump it to <out>/tmp/.
    """

    def __init__(self, message: str, context: dict = None):
        self.context = dict(context or {})
        super().__init__(message)

    def with_context(self, **extra) -> "NumericalError":
        self.context.update(extra)
        return self
