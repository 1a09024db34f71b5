"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific class that applies.
"""


class NegrecError(Exception):
    """Base class for all library errors."""


class ParseError(NegrecError):
    """A file could not be parsed (bad magic, truncation, malformed row)."""

    def __init__(self, message, path=None, line=None, offset=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"offset {offset}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class ValidationError(NegrecError):
    """Inputs are well-formed but violate a contract (dimensions, ranges,
    fingerprints, preconditions)."""


class ComputationError(NegrecError):
    """A numeric procedure failed (e.g. non-finite training loss)."""
