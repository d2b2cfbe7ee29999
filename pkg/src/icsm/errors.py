"""Exception hierarchy shared across the package.

Every error raised by icsm derives from IcsmError so callers (and the CLI)
can distinguish our failures from programming bugs. Backend failures get
their own branch because the CLI maps them to a different exit code.
"""


class IcsmError(Exception):
    """Base class for all icsm errors."""


class ConfigError(IcsmError):
    """Invalid experiment or backend configuration."""


class BackendError(IcsmError):
    """Base class for model-backend failures (CLI exit code 3)."""
