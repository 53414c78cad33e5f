"""Exception types shared across the package.

Every error raised deliberately by voxseg derives from VoxsegError so callers
can catch the whole family with one clause.  The CLI maps these onto process
exit codes; see voxseg.cli.
"""


class VoxsegError(Exception):
    """Base class for all voxseg errors."""


class ShapeError(VoxsegError):
    """An array had the wrong rank or extents for the requested operation."""


class InputError(VoxsegError):
    """User-supplied data was missing, malformed, or out of range."""


class ConfigError(VoxsegError):
    """A configuration value was invalid or inconsistent."""


class ParseError(InputError):
    """A file on disk could not be decoded (bad magic, truncation, bad JSON)."""


class ContractError(VoxsegError):
    """An internal invariant was violated (caller misuse of a stateful API)."""


class NumericError(VoxsegError):
    """A computation produced a non-finite value."""


class TrainingError(NumericError):
    """Optimisation produced a non-finite value or otherwise diverged."""
