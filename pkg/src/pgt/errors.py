"""Exception types raised across the package."""


class PGTError(Exception):
    pass


class ShapeError(PGTError, ValueError):
    pass


class NumericError(PGTError, ArithmeticError):
    """Non-finite value encountered; ``step`` names the progressive step if known."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ScheduleError(PGTError, ValueError):
    pass


class ConfigError(PGTError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ContractError(PGTError, RuntimeError):
    pass


class DomainError(PGTError, ValueError):
    pass
