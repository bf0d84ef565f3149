"""Exception types shared across the package.

Each maps to a CLI exit code prefix, see `cli.ERROR_CODES`.
"""


class MaxStyleError(Exception):
    """Base class for all package errors."""

    code = "error"


class DimensionError(MaxStyleError):
    """Shape or axis mismatch between tensors."""

    code = "dimension"


class ValidationError(MaxStyleError):
    """Invalid argument values or malformed inputs."""

    code = "validation"


class ConfigurationError(MaxStyleError):
    """Inconsistent model/experiment configuration."""

    code = "config"
