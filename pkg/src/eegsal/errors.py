"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes: usage -> 1, data/config -> 2,
numerical -> 3.
"""


class EegSalError(Exception):
    exit_code = 2


class UsageError(EegSalError):
    exit_code = 1


class ConfigError(EegSalError, ValueError):
    exit_code = 2


class DataError(EegSalError, ValueError):
    exit_code = 2


class DimensionError(EegSalError, ValueError):
    exit_code = 2


class StateError(EegSalError, RuntimeError):
    exit_code = 2


class NumericalError(EegSalError, ArithmeticError):
    exit_code = 3


class ModelFileError(DataError):
    pass


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class TruncatedError(ModelFileError):
    pass
