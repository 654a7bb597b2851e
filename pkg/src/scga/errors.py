class DomainError(ValueError):
    """An input lies outside an operation's domain."""


class DegenerateConfigurationError(DomainError):
    """Geometry too degenerate to estimate a transform (e.g. collinear points)."""


class ParseError(ValueError):
    """Malformed point file; carries the offending line number when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line
