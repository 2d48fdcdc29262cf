"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration and precondition problems
exit 2, I/O and file-format problems exit 3, runtime invariant violations
exit 4.
"""


class BuddySimError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BuddySimError):
    """Invalid configuration value or inconsistent component shapes."""


class InputError(BuddySimError):
    """A caller violated an operation's precondition."""


class CalibrationError(BuddySimError):
    """Not enough (or otherwise unusable) samples for threshold calibration."""


class DegeneratePivotError(BuddySimError):
    """A pivot expert has no co-activation mass and no smoothing to fall back on."""


class FormatError(BuddySimError):
    """Unreadable or schema-incompatible serialized file."""


class InternalError(BuddySimError):
    """An internal contract was violated; indicates a bug upstream."""


class InvariantViolation(BuddySimError):
    """A runtime self-check failed during simulation."""
