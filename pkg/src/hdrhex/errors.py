"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, data and
parse problems exit 2, numerical failures exit 3.
"""


class HdrHexError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HdrHexError):
    """Inconsistent component wiring, e.g. optimizer state shape mismatch."""


class ArgumentError(HdrHexError, ValueError):
    """A caller passed a value outside an operation's documented domain."""


class DataError(HdrHexError):
    """A dataset, manifest, image file, or checkpoint failed to parse.

    Messages name the offending path where one exists.
    """


class NumericalError(HdrHexError):
    """A non-finite value surfaced where the pipeline requires finiteness."""
