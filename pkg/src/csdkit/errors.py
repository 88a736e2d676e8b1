"""Exception hierarchy shared by all modules."""


class CsdError(Exception):
    """Base class for every error raised by csdkit."""


class ConfigError(CsdError, ValueError):
    """Invalid network layout or configuration value."""


class ShapeError(CsdError, ValueError):
    """Input dimensions do not match what the model expects."""


class NumericError(CsdError, ArithmeticError):
    """Non-finite values or a failed numerical routine."""


class DivergenceError(NumericError):
    """Training loss blew up.  ``step`` names the offending iteration."""

    def __init__(self, message, step=None, seed=None):
        super().__init__(message)
        self.step = step
        self.seed = seed


class SingularKernelError(NumericError):
    """Kernel matrix could not be factorized even at the largest jitter."""


class ParseError(CsdError, ValueError):
    """Malformed binary or text file.  ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
