"""Exception hierarchy shared across the package."""


class TokMemError(Exception):
    pass


class ConfigError(TokMemError, ValueError):
    pass


class InputError(TokMemError, ValueError):
    pass


class LengthError(InputError):
    pass


class EmptyLossError(TokMemError, ValueError):
    pass


class NonFiniteError(TokMemError, FloatingPointError):
    pass


class CorruptFormatError(TokMemError, ValueError):
    pass


class ScheduleError(TokMemError, ValueError):
    pass


class DataError(TokMemError, ValueError):
    pass


class CapacityError(TokMemError, ValueError):
    pass


class ValidationError(TokMemError, ValueError):
    pass


class ParseError(TokMemError, ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
