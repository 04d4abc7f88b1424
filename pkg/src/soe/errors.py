"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class SOEError(Exception):
    exit_code = 1


class UsageError(SOEError):
    """An API was called out of contract (empty batch, untracked root, ...)."""


class ConfigError(SOEError):
    pass


class DimensionError(SOEError):
    pass


class GeometryError(SOEError):
    pass


class NotPSDError(SOEError):
    pass


class SingularScheduleError(SOEError):
    pass


class DegenerateInputError(SOEError):
    pass


class ServiceError(SOEError):
    """A VQA or embedding client failed; carries the client's diagnostic."""

    exit_code = 3


class AttributionError(SOEError):
    exit_code = 3


class StorageError(SOEError):
    exit_code = 2


class NonFiniteError(SOEError):
    pass
