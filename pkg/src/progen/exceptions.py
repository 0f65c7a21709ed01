"""Exception types. Each maps to one CLI exit code."""


class ProgenError(Exception):
    exit_code = 1


class ContractError(ProgenError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ShapeError(ContractError):
    """Tensor dimensions do not agree."""


class ConfigError(ContractError):
    """Invalid hyperparameter or run configuration."""


class DataError(ProgenError):
    """Malformed or missing input data."""

    exit_code = 2


class ParseError(DataError):
    """A serialized concept context does not follow the grammar."""

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at token {position})")
        self.position = position


class CheckpointError(DataError):
    """Checkpoint file is truncated or its checksum does not match."""


class UnsupportedVersionError(CheckpointError):
    pass


class NumericError(ProgenError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""

    exit_code = 3
