"""Exception types shared across the package."""


class SupportSelectError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SupportSelectError):
    """Array dimensions do not match what an operation requires."""


class NumericError(SupportSelectError):
    """Non-finite values or numerical divergence."""


class ProtocolError(SupportSelectError):
    """API called out of order (e.g. backward before forward)."""


class ValidationError(SupportSelectError):
    """Invalid argument values or degenerate configuration."""


class ParseError(SupportSelectError):
    """Malformed or truncated artifact file."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f" [{path}"
            loc += f":{line}]" if line is not None else "]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class PipelineError(SupportSelectError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
