"""Exception types shared across the package.

Every failure mode raises a subclass of RegionEditError so callers can
catch package errors without catching unrelated bugs. The CLI maps these
onto process exit codes.
"""


class RegionEditError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RegionEditError):
    """Invalid configuration value or malformed config file."""


class DimensionError(RegionEditError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(RegionEditError):
    """A computation produced NaN or inf, or numeric state is corrupt."""


class DivergenceError(RegionEditError):
    """Training loss diverged (NaN/inf loss or unbounded growth)."""


class ContractError(RegionEditError):
    """An internal invariant that callers rely on was violated."""


class PlanError(RegionEditError):
    """Window partition plan is inconsistent with the token grid."""


class PlacementError(RegionEditError):
    """Positional coordinate assignment produced an illegal collision."""


class StalenessError(RegionEditError):
    """A cache was consulted after its source tokens changed."""


class ResampleError(RegionEditError):
    """Resolution change failed (non-integer factor, empty output)."""


class FormatError(RegionEditError):
    """A serialized artifact (tensor file, checkpoint, image) is malformed."""


class UsageError(RegionEditError):
    """Command line arguments or subcommand usage is invalid."""
