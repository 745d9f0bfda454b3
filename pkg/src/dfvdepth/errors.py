"""Exception types shared across the package."""


class DfvError(Exception):
    """Base class for all package errors."""


class ShapeError(DfvError, ValueError):
    """Array dimensions or extents do not match what an operation expects."""


class NumericError(DfvError, ArithmeticError):
    """A numeric invariant was violated (NaN/Inf, divergence, bad domain)."""


class EmptyMaskError(DfvError, ValueError):
    """A masked reduction was asked to average over zero pixels."""


class ConfigError(DfvError, ValueError):
    """A configuration value or file is invalid."""


class DataIOError(DfvError, OSError):
    """Reading or writing dataset/checkpoint files failed."""


class CompatibilityError(DfvError, ValueError):
    """A checkpoint and a configuration disagree on a parameter."""
