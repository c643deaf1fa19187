"""Exception hierarchy shared by every module."""


class CMFLError(Exception):
    """Base class for all simulator errors."""


class ConfigError(CMFLError, ValueError):
    """Invalid configuration or inconsistent derived quantities."""


class DomainError(CMFLError, ValueError):
    """A numerical operation was called outside its domain (empty batch, bad shapes)."""


class ParseError(CMFLError, ValueError):
    """A file could not be parsed. Carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateScore(CMFLError, ArithmeticError):
    """Two gradients are numerically identical, so their pairwise score is undefined."""

    def __init__(self, message, pair=None):
        self.pair = pair
        super().__init__(message)


class RunAbort(CMFLError, RuntimeError):
    """A simulation stopped mid-run (non-finite parameters, committee collapse)."""

    def __init__(self, message, round_t=None):
        self.round_t = round_t
        super().__init__(message)


class DiagnosticError(CMFLError, RuntimeError):
    """A theory diagnostic could not be computed (optimizer failed, undefined bound)."""
