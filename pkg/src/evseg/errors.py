"""Exception hierarchy shared by every evseg module."""


class EvsegError(Exception):
    """Base class for all library errors."""


class DimensionError(EvsegError, ValueError):
    pass


class OrderingError(EvsegError, ValueError):
    pass


class DataError(EvsegError, ValueError):
    pass


class ValidationError(EvsegError, ValueError):
    pass


class ConfigError(EvsegError, ValueError):
    pass


class UsageError(EvsegError):
    pass


class ParseError(EvsegError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(EvsegError, ArithmeticError):
    def __init__(self, message, node=None):
        if node is not None:
            message = f"{message} [node: {node}]"
        super().__init__(message)
        self.node = node
