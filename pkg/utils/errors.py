# utils/errors.py
"""
Module `errors` for depth-trace.

Every failure raised by the toolkit derives from `DepthError`, so the CLI can
tell a runtime failure (exit 2) from a crash. Each subclass also derives from
the matching built-in, which keeps `except ValueError` callers working.
"""


class DepthError(Exception):
    """Base class for depth-trace failures."""


class ShapeError(DepthError, ValueError):
    """Dimensions disagree or an input is empty."""


class ParameterError(DepthError, ValueError):
    """An argument is outside its allowed range."""


class NonFiniteError(DepthError, FloatingPointError):
    """A kernel produced (or a file contained) NaN or Inf."""


class InputError(DepthError, ValueError):
    """Bad user input: out-of-vocab tokens, malformed policy strings."""


class WeightsFormatError(DepthError, ValueError):
    """The weight container is malformed, truncated or inconsistent."""


class SchemaError(DepthError, ValueError):
    """A JSON document does not follow its schema.

    `path` points at the offending field, e.g. ``turns[1].segments[0].kind``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ReportError(DepthError, ValueError):
    """Effective-depth reports cannot be merged."""
