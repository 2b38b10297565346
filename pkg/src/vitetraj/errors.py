"""Exception types shared across the package."""


class VitetrajError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VitetrajError, ValueError):
    pass


class UnsupportedPrimitive(VitetrajError, KeyError):
    pass


class ContractError(VitetrajError, ValueError):
    """A caller violated an operation's precondition."""


class DisconnectedError(VitetrajError):
    """Effective resistance requested between different components."""


class ParseError(VitetrajError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDataset(VitetrajError):
    pass


class ConfigError(VitetrajError, ValueError):
    pass


class NumericalError(VitetrajError, FloatingPointError):
    """Non-finite loss during training."""
