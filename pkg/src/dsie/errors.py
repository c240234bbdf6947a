"""Exception hierarchy shared by the estimation toolkit."""


class DsieError(Exception):
    """Base class for all toolkit errors."""


class TopologyError(DsieError):
    """Invalid network topology (dangling endpoints, self loops, disconnected graph)."""


class ParameterError(DsieError):
    """Non-physical line parameters."""


class ConfigurationError(DsieError):
    """Inconsistent sensor layout, partition, scenario or experiment configuration."""


class PartitionError(ConfigurationError):
    """Area assignment that does not decompose the network."""


class UnobservableError(DsieError):
    """Raised when a regression cannot be solved because the model is not observable."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericalError(DsieError):
    """A covariance that should be SPD is not."""


class SynchronizationError(DsieError):
    """Messages or frames refer to different time steps."""


class AttackError(DsieError):
    """An attack specification that cannot be realised on the given layout."""
