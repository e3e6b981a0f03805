"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class LitmError(Exception):
    exit_code = 1


class ConfigError(LitmError, ValueError):
    exit_code = 3


class DimensionError(LitmError, ValueError):
    exit_code = 4


class DatasetFormatError(LitmError):
    exit_code = 5


class VersionMismatchError(DatasetFormatError):
    exit_code = 6


class TruncatedFileError(DatasetFormatError):
    exit_code = 7


class InconsistentDataError(DatasetFormatError):
    exit_code = 8


class CheckpointError(LitmError):
    exit_code = 9


class SamplingError(LitmError):
    exit_code = 10


class NonFiniteError(LitmError, FloatingPointError):
    exit_code = 11
