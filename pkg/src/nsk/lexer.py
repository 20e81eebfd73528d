"""Indentation-sensitive lexer.

Turns UTF-8 source text into a flat token stream in which block structure
is explicit: changes of leading whitespace at line starts emit INDENT and
DEDENT tokens, Python style. Blank lines and comment-only lines produce no
tokens at all. The stream always ends with EOF, and INDENT/DEDENT counts
balance by then.

Indentation rules are deliberately strict: one file uses spaces or tabs
exclusively (one tab = one level), every indented line's width must be a
multiple of the file's indent unit (the width of the first indented line),
and a block may only open one level deeper than its parent.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from nsk.errors import LexError

KEYWORDS = frozenset(
    {
        "def", "class", "if", "else", "for", "while", "return",
        "finish", "async", "self", "and", "or", "not", "true", "false",
    }
)

# Longest-match first: two-character operators before their prefixes.
_TWO_CHAR_OPS = ("==", "!=", "<=", ">=")
_ONE_CHAR_OPS = "=<>+-*/@(),.:"

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"\d+(\.\d+)?")
_INDENT_RE = re.compile(r"[ \t]*")

DEFAULT_INDENT_WIDTH = 4


class TokenKind(Enum):
    IDENT = "identifier"
    NUMBER = "number-literal"
    STRING = "string-literal"
    OP = "operator"
    KEYWORD = "keyword"
    NEWLINE = "newline"
    INDENT = "indent"
    DEDENT = "dedent"
    EOF = "end-of-file"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    line: int
    column: int

    def __repr__(self):
        return f"Token({self.kind.name}, {self.text!r}, {self.line}:{self.column})"


def tokenize(source: str) -> list[Token]:
    """Lex ``source`` into a token list ending in EOF.

    Raises LexError (with a line number) on mixed tab/space indentation,
    indentation that is not a multiple of the file's unit, over-indented
    blocks, dedents to depths never on the stack, unterminated strings,
    and characters outside the language.
    """
    tokens: list[Token] = []
    levels = [0]
    indent_char: str | None = None  # ' ' or '\t', fixed by first indented line
    unit: int | None = None

    lines = source.split("\n")
    lineno = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r")
        prefix = _INDENT_RE.match(line).group()
        body = line[len(prefix):]
        if not body or body.startswith("#"):
            continue  # blank or comment-only: no structural tokens

        if " " in prefix and "\t" in prefix:
            raise LexError("mixed tabs and spaces in indentation", line=lineno)
        if prefix:
            char = "\t" if "\t" in prefix else " "
            if indent_char is None:
                indent_char = char
                unit = 1 if char == "\t" else len(prefix)
            elif char != indent_char:
                have = "tabs" if indent_char == "\t" else "spaces"
                found = "tabs" if char == "\t" else "spaces"
                raise LexError(f"file is indented with {have}, found {found}", line=lineno)
            width = len(prefix)
            if width % unit != 0:
                raise LexError(
                    f"indentation of {width} is not a multiple of the indent unit {unit}",
                    line=lineno,
                )
            level = width // unit
        else:
            level = 0

        if level > levels[-1]:
            if level != levels[-1] + 1:
                raise LexError("block is indented more than one level deeper than its parent", line=lineno)
            levels.append(level)
            tokens.append(Token(TokenKind.INDENT, "", lineno, 1))
        else:
            while levels[-1] > level:
                levels.pop()
                tokens.append(Token(TokenKind.DEDENT, "", lineno, 1))
            if levels[-1] != level:
                raise LexError("dedent to an indentation depth never seen", line=lineno)

        _lex_line(body, lineno, len(prefix) + 1, tokens)
        tokens.append(Token(TokenKind.NEWLINE, "\n", lineno, len(line) + 1))

    eof_line = lineno + 1
    while levels[-1] > 0:
        levels.pop()
        tokens.append(Token(TokenKind.DEDENT, "", eof_line, 1))
    tokens.append(Token(TokenKind.EOF, "", eof_line, 1))
    return tokens


def _lex_line(body: str, lineno: int, start_col: int, out: list[Token]) -> None:
    pos = 0
    n = len(body)
    while pos < n:
        ch = body[pos]
        col = start_col + pos
        if ch in " \t":
            pos += 1
            continue
        if ch == "#":
            return
        if ch == '"':
            text, pos = _lex_string(body, pos, lineno, col)
            out.append(Token(TokenKind.STRING, text, lineno, col))
            continue
        m = _NUMBER_RE.match(body, pos)
        if m:
            out.append(Token(TokenKind.NUMBER, m.group(), lineno, col))
            pos = m.end()
            continue
        m = _IDENT_RE.match(body, pos)
        if m:
            word = m.group()
            kind = TokenKind.KEYWORD if word in KEYWORDS else TokenKind.IDENT
            out.append(Token(kind, word, lineno, col))
            pos = m.end()
            continue
        two = body[pos:pos + 2]
        if two in _TWO_CHAR_OPS:
            out.append(Token(TokenKind.OP, two, lineno, col))
            pos += 2
            continue
        if ch in _ONE_CHAR_OPS:
            out.append(Token(TokenKind.OP, ch, lineno, col))
            pos += 1
            continue
        raise LexError(f"unexpected character {ch!r}", line=lineno, column=col)


def _lex_string(body: str, pos: int, lineno: int, col: int) -> tuple[str, int]:
    # pos sits on the opening quote; returns the raw slice including quotes.
    i = pos + 1
    n = len(body)
    while i < n:
        c = body[i]
        if c == "\\":
            i += 2
            continue
        if c == '"':
            return body[pos:i + 1], i + 1
        i += 1
    raise LexError("unterminated string literal", line=lineno, column=col)


def string_value(token: Token) -> str:
    """Decode a STRING token's raw text (quotes and escapes) into its value."""
    raw = token.text[1:-1]
    out = []
    i = 0
    while i < len(raw):
        c = raw[i]
        if c == "\\" and i + 1 < len(raw):
            esc = raw[i + 1]
            out.append({"n": "\n", "t": "\t", "\\": "\\", '"': '"'}.get(esc, esc))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def number_value(token: Token) -> float:
    return float(token.text)


def indent_width(source: str) -> int:
    """Width (in spaces) of the first indented line; 4 when nothing is indented.

    Also validates that every deeper indentation in the file is an integer
    multiple of that unit, raising LexError otherwise.
    """
    unit: int | None = None
    for lineno, raw in enumerate(source.split("\n"), start=1):
        line = raw.rstrip("\r")
        prefix = _INDENT_RE.match(line).group()
        body = line[len(prefix):]
        if not body or body.startswith("#"):
            continue
        if not prefix:
            continue
        if " " in prefix and "\t" in prefix:
            raise LexError("mixed tabs and spaces in indentation", line=lineno)
        if unit is None:
            unit = 1 if "\t" in prefix else len(prefix)
        if len(prefix) % unit != 0:
            raise LexError(
                f"indentation of {len(prefix)} is not a multiple of the indent unit {unit}",
                line=lineno,
            )
    return unit if unit is not None else DEFAULT_INDENT_WIDTH


def render_tokens(tokens: list[Token], unit: int = DEFAULT_INDENT_WIDTH) -> str:
    """Reconstruct equivalent source text from a token stream.

    Used by the round-trip property test: rendering and re-lexing yields an
    identical (kind, text) stream.
    """
    lines: list[str] = []
    depth = 0
    current: list[str] = []
    for tok in tokens:
        if tok.kind is TokenKind.NEWLINE:
            lines.append(" " * (depth * unit) + " ".join(current))
            current = []
        elif tok.kind is TokenKind.INDENT:
            depth += 1
        elif tok.kind is TokenKind.DEDENT:
            depth -= 1
        elif tok.kind is TokenKind.EOF:
            break
        else:
            current.append(tok.text)
    if current:
        lines.append(" " * (depth * unit) + " ".join(current))
    return "\n".join(lines) + ("\n" if lines else "")
