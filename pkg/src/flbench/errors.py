"""Exception hierarchy; each class maps to a CLI exit code."""


class FlbenchError(Exception):
    exit_code = 4


class ConfigError(FlbenchError):
    exit_code = 2


class DataError(FlbenchError):
    exit_code = 3


class ModelError(FlbenchError, ValueError):
    exit_code = 4


class PartitionError(FlbenchError, ValueError):
    exit_code = 4


class TrainingError(FlbenchError):
    exit_code = 4
