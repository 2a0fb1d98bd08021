"""Exception families; ``exit_code`` is what the CLI returns for each."""


class StageDetectError(Exception):
    exit_code = 1


class ConfigError(StageDetectError, ValueError):
    exit_code = 2


class DataError(StageDetectError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ModelFormatError(StageDetectError, ValueError):
    exit_code = 4
