"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line uses for it.
"""


class MsraError(Exception):
    exit_code = 1


class ShapeError(MsraError, ValueError):
    exit_code = 1


class ContractError(MsraError):
    exit_code = 1


class StateError(MsraError, RuntimeError):
    exit_code = 1


class ConfigError(MsraError, ValueError):
    exit_code = 3


class DataError(MsraError, ValueError):
    exit_code = 4


class FormatError(MsraError, ValueError):
    exit_code = 5


class IOFailure(MsraError, OSError):
    exit_code = 6
