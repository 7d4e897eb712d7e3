"""Exception types shared across the package."""


class FedAtomsError(Exception):
    """Base class for all library errors."""


class DimensionError(FedAtomsError, ValueError):
    """Array shapes do not line up."""


class ContractError(FedAtomsError, ValueError):
    """A precondition of an operation was violated."""


class PartitionError(FedAtomsError, ValueError):
    """A data partition cannot be constructed."""


class ConfigError(FedAtomsError, ValueError):
    """An experiment config is malformed or inconsistent."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class RunAborted(FedAtomsError):
    """A federation run failed part-way; ``metrics`` holds the completed rounds."""

    def __init__(self, message, metrics):
        self.metrics = metrics
        super().__init__(message)
