"""Exception types raised across the package."""


class FedKDError(Exception):
    pass


class ShapeError(FedKDError, ValueError):
    pass


class ParameterError(FedKDError, ValueError):
    pass


class StateError(FedKDError, RuntimeError):
    pass


class DataError(FedKDError, ValueError):
    pass


class FormatError(FedKDError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ProtocolError(FedKDError, RuntimeError):
    pass


class ConfigError(FedKDError, ValueError):
    pass


class MetricError(FedKDError, ValueError):
    pass
