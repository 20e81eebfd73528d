"""nsk-mini: a small indentation-based OO language with a tensor training runtime."""

__version__ = "0.1.0"

from nsk.errors import LexError, NskError, NskParseError, NskRuntimeError, NskTypeError

__all__ = [
    "NskError",
    "LexError",
    "NskParseError",
    "NskRuntimeError",
    "NskTypeError",
    "__version__",
]
