"""Exception hierarchy shared by all cyclelife modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericalError (and subclasses) -> 4.
"""


class CycleLifeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CycleLifeError):
    """Invalid configuration: unknown keys, out-of-range values, bad combinations."""


class DataError(CycleLifeError):
    """Problems with input data: missing files, empty datasets, bad records."""


class ParseError(DataError):
    """A file failed to parse; the message carries a file/record locus."""


class ValidationError(DataError):
    """A domain invariant or precondition was violated."""


class InsufficientDataError(DataError):
    """An operation needs more cycles/points/batteries than are available."""


class NumericalError(CycleLifeError):
    """Non-finite values, divergence, or other numerical failure."""


class ShapeError(NumericalError):
    """Array shapes do not agree; the message names both shapes."""
