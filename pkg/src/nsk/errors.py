"""Error types shared across the toolchain.

Every error that can surface to a script author carries a source line
(1-based) when one is known; the CLI renders them as ``file:line: message``.
"""

from __future__ import annotations


class NskError(Exception):
    """Base class for all user-facing errors."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.message = message
        self.line = line
        self.column = column

    def render(self, path: str | None = None) -> str:
        loc = []
        if path:
            loc.append(path)
        if self.line is not None:
            loc.append(str(self.line))
            if self.column is not None:
                loc.append(str(self.column))
        prefix = ":".join(loc)
        return f"{prefix}: {self.message}" if prefix else self.message


class LexError(NskError):
    pass


class NskParseError(NskError):
    pass


class NskRuntimeError(NskError):
    pass


class NskTypeError(NskRuntimeError):
    """Strong-typing violation: an operator applied to mismatched value kinds."""


class DataLoadError(NskError):
    """CSV/dataset loading failure."""
