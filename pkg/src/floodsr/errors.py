"""Exception taxonomy shared across the package.

Contract violations (bad arguments, shape mismatches) are bugs in the
caller; numeric errors mean the computation itself went bad (NaN/Inf);
format errors come from on-disk containers.
"""


class FloodSRError(Exception):
    """Base class for all package errors."""


class ContractError(FloodSRError):
    """A precondition on an operation was violated."""


class DimensionError(ContractError):
    """Tensor or grid shapes are incompatible."""


class NumericError(FloodSRError):
    """A computation produced NaN or Inf."""


class TrainingError(NumericError):
    """Optimization diverged (non-finite loss)."""


class FormatError(FloodSRError):
    """An on-disk container violates its format."""


class CorruptionError(FormatError):
    """Declared and actual payload sizes disagree."""
