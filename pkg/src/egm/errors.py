"""Exception types shared across the package."""


class EgmError(Exception):
    """Base class for all package errors."""


class ParseError(EgmError):
    """A file could not be parsed; carries the offending location."""

    def __init__(self, message, *, path=None, line=None, field=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.path = path
        self.line = line
        self.field = field


class ValidationError(EgmError):
    """A domain invariant was violated."""


class ArgumentError(EgmError, ValueError):
    """An operation was called outside its precondition."""


class MissingEvaluationError(EgmError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"no evaluation for clip {self.name!r}"


class MetricError(EgmError, ValueError):
    """A metric value was non-finite or negative."""


class ShapeError(EgmError, ValueError):
    pass


class ConfigError(EgmError):
    """Invalid configuration: unknown key, bound violation, or layout mismatch."""


class NumericalError(EgmError, FloatingPointError):
    """A non-finite value appeared; ``stage`` names where."""

    def __init__(self, message, stage=None):
        super().__init__(f"{stage}: {message}" if stage else message)
        self.stage = stage
