"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class BiasTransferError(Exception):
    exit_code = 1


class DimensionError(BiasTransferError, ValueError):
    exit_code = 3


class ChannelError(BiasTransferError, ValueError):
    exit_code = 10


class ConfigError(BiasTransferError, ValueError):
    exit_code = 2


class DataError(BiasTransferError, ValueError):
    exit_code = 4


class SpecMismatchError(BiasTransferError):
    exit_code = 5


class TrainingDivergedError(BiasTransferError, RuntimeError):
    exit_code = 6

    def __init__(self, message, manifest=None):
        super().__init__(message)
        self.manifest = manifest


class BenchmarkInvalidError(BiasTransferError, RuntimeError):
    exit_code = 7


class SelectionGuardError(BiasTransferError):
    """Raised when model selection would consult test-split metrics."""

    exit_code = 8
