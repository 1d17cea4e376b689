"""Exception hierarchy. The CLI maps each family to its own exit status."""


class DMCHError(Exception):
    exit_code = 1


class ConfigError(DMCHError):
    exit_code = 3


class DataError(DMCHError):
    exit_code = 4


class FormatError(DataError):
    """A binary file (grid, checkpoint, code database) is malformed."""


class DMCHIOError(DMCHError):
    exit_code = 5


class DimensionError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass
