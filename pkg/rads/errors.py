"""Exception hierarchy shared by every RADS module.

Each error carries the process exit code the CLI should use when it escapes
to the top level: 2 for usage/config problems, 3 for storage and I/O, 4 for
input data that cannot be used.
"""

from __future__ import annotations

from typing import ClassVar


class RadsError(Exception):
    """Base class for all RADS errors."""

    exit_code: ClassVar[int] = 1


class ConfigError(RadsError, ValueError):
    """Invalid configuration value or flag combination."""

    exit_code = 2


class DataFormatError(RadsError, ValueError):
    """Input data is malformed or violates an invariant."""

    exit_code = 4


class EmptyInputError(DataFormatError):
    """An operation received no data to work on."""


class InsufficientDataError(DataFormatError):
    """Too little data for the requested statistic or model."""


class DegenerateRangeError(DataFormatError):
    """Min-max normalization over a zero-width range."""


class OrderingError(DataFormatError):
    """Timestamps went backwards within one VM."""


class MappingError(DataFormatError):
    """An external trace column mapping names a column that is not there."""


class GridMismatchError(DataFormatError):
    """Verdicts and ground truth do not cover the same windows."""


class NotTrainedError(DataFormatError):
    """Detection was requested before any model exists."""


class StorageError(RadsError, OSError):
    """Model store could not be read or written."""

    exit_code = 3


class ModelNotFoundError(StorageError):
    """No stored model for the requested key."""


class IntegrityError(StorageError):
    """A stored document is truncated or fails its checksum."""
