"""Exception types raised across the package."""


class CRELabError(Exception):
    pass


class ShapeError(CRELabError, ValueError):
    pass


class LabelError(CRELabError, ValueError):
    pass


class NumericError(CRELabError, ArithmeticError):
    pass


class SpanError(CRELabError, ValueError):
    pass


class LengthError(CRELabError, ValueError):
    pass


class DuplicateError(CRELabError, ValueError):
    pass


class ParseError(CRELabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(CRELabError, ValueError):
    """Invalid configuration. ``problems`` lists every violated field."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CoverageError(CRELabError, ValueError):
    pass


class EmptyDataError(CRELabError, ValueError):
    pass


class VersionError(CRELabError, ValueError):
    pass


class CompatibilityError(CRELabError, ValueError):
    pass
