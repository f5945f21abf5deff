"""Exception hierarchy shared by every module.

Input problems (bad shapes, malformed files, invalid parameters) raise
:class:`InputError`; failed factorizations raise :class:`NumericalError`.
The CLI maps the two to exit codes 2 and 1.
"""


class ShfmError(Exception):
    """Base class; carries optional structured context for error JSON."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def to_dict(self):
        out = {"error": type(self).__name__, "message": str(self)}
        out.update({k: v for k, v in self.context.items() if v is not None})
        return out


class InputError(ShfmError, ValueError):
    pass


class ParseError(InputError):
    def __init__(self, message, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message, path=str(path) if path else None, line=line, column=column)


class NumericalError(ShfmError, ArithmeticError):
    pass


class DegenerateError(ShfmError, ValueError):
    """Statistic undefined for the input (constant field, zero variance)."""
