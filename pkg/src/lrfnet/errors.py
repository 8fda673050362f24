"""Exception types shared across the package."""


class LRFNetError(Exception):
    pass


class ShapeError(LRFNetError, ValueError):
    pass


class NonConvergence(LRFNetError, RuntimeError):
    pass


class DomainError(LRFNetError, ValueError):
    pass


class StaleCache(LRFNetError, RuntimeError):
    """backward() called without a preceding forward()."""


class DegenerateOutput(LRFNetError, ArithmeticError):
    """Layer output has (numerically) zero Frobenius norm."""


class AllZero(LRFNetError, ValueError):
    pass


class NonFiniteLoss(LRFNetError, FloatingPointError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class ConfigError(LRFNetError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ParseError(LRFNetError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingLabel(LRFNetError, KeyError):
    pass
