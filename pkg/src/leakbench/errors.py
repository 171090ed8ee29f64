"""Exception hierarchy shared by every leakbench module."""


class LeakBenchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LeakBenchError, ValueError):
    pass


class InvalidDocument(LeakBenchError, ValueError):
    pass


class InvalidLabel(LeakBenchError, ValueError):
    pass


class InvalidInput(LeakBenchError, ValueError):
    pass


class EmptyInput(InvalidInput):
    pass


class EmptyDataset(LeakBenchError, ValueError):
    pass


class ShapeError(LeakBenchError, ValueError):
    pass


class NumericError(LeakBenchError, ArithmeticError):
    pass


class ParseError(LeakBenchError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(LeakBenchError, ValueError):
    pass


class StartupError(LeakBenchError, RuntimeError):
    pass


class BudgetExhausted(LeakBenchError, RuntimeError):
    pass


class ApiError(LeakBenchError, RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        self.status = status
        super().__init__(message if status is None else f"HTTP {status}: {message}")
