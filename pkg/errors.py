"""
Error classes shared by every forenvit module.

Each class carries the exit code the command-line tool uses when the error
escapes a subcommand. Library code raises; only forenvit.main() prints.
"""


class ForenvitError(Exception):
    exit_code = 1


class ConfigurationError(ForenvitError):
    exit_code = 2


class ContractError(ConfigurationError):
    """An operation was called outside its precondition."""


class StateError(ConfigurationError):
    """An object is not in the state the operation needs (e.g. uncalibrated policy)."""


class ShapeError(ConfigurationError):
    pass


class DataError(ForenvitError):
    exit_code = 3


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateDataError(DataError):
    pass


class CheckpointError(DataError):
    pass


class MagicMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"unknown parameter '{name}'")


class ShapeMismatchError(CheckpointError):
    def __init__(self, name, expected, found):
        self.name = name
        super().__init__(
            f"parameter '{name}' has shape {tuple(found)}, model expects {tuple(expected)}"
        )


class ForenvitIOError(ForenvitError):
    exit_code = 4


class NumericError(ForenvitError):
    exit_code = 5


class InvalidValueError(NumericError):
    pass


class DivergenceError(NumericError):
    pass
