"""AST node types and the deterministic line-oriented dump.

Statement blocks are plain lists of statements (one list per indentation
block). Expressions are binary trees: every operator node has exactly two
children, and operator precedence decides nesting depth, so high-precedence
operators like ``@`` sit closest to the leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field


# --- expressions -----------------------------------------------------------

@dataclass
class NumberLit:
    value: float
    line: int = 0


@dataclass
class StringLit:
    value: str
    line: int = 0


@dataclass
class BoolLit:
    value: bool
    line: int = 0


@dataclass
class Var:
    name: str
    line: int = 0


@dataclass
class SelfAccess:
    name: str
    line: int = 0


@dataclass
class Binary:
    op: str
    left: Expr
    right: Expr
    line: int = 0


@dataclass
class Unary:
    op: str  # '-' or 'not'
    operand: Expr
    line: int = 0


@dataclass
class Call:
    name: str
    args: list[Expr] = field(default_factory=list)
    line: int = 0


@dataclass
class MethodCall:
    obj: Expr | None  # None means a call on the current object (self.m(...))
    name: str
    args: list[Expr] = field(default_factory=list)
    line: int = 0


Expr = NumberLit | StringLit | BoolLit | Var | SelfAccess | Binary | Unary | Call | MethodCall


# --- statements -------------------------------------------------------------

@dataclass
class ExprStmt:
    expr: Expr
    line: int = 0


@dataclass
class Assign:
    target: Expr  # Var or SelfAccess
    value: Expr
    line: int = 0


@dataclass
class If:
    cond: Expr
    then_block: list[Stmt]
    else_block: list[Stmt] | None = None
    line: int = 0


@dataclass
class While:
    cond: Expr
    block: list[Stmt] = field(default_factory=list)
    line: int = 0


@dataclass
class For:
    var: str
    start: Expr
    end: Expr
    step: Expr
    block: list[Stmt] = field(default_factory=list)
    line: int = 0


@dataclass
class Return:
    value: Expr | None = None
    line: int = 0


@dataclass
class FunctionDef:
    name: str
    params: list[str] = field(default_factory=list)
    block: list[Stmt] = field(default_factory=list)
    is_method: bool = False
    line: int = 0


@dataclass
class ClassDef:
    name: str
    attr_defaults: list[tuple[str, Expr]] = field(default_factory=list)
    methods: list[FunctionDef] = field(default_factory=list)
    line: int = 0


@dataclass
class Finish:
    serial: list[Stmt] = field(default_factory=list)
    async_stmts: list[Stmt] = field(default_factory=list)
    line: int = 0


Stmt = ExprStmt | Assign | If | While | For | Return | FunctionDef | ClassDef | Finish


@dataclass
class Program:
    body: list[Stmt] = field(default_factory=list)


# --- dump -------------------------------------------------------------------

def dump_program(program: Program) -> str:
    """Render the AST one node per line: kind, op/name, source line."""
    out: list[str] = ["program"]
    for stmt in program.body:
        _dump_stmt(stmt, 1, out)
    return "\n".join(out) + "\n"


def _emit(out: list[str], depth: int, text: str) -> None:
    out.append("  " * depth + text)


def _dump_block(label: str, block: list[Stmt], depth: int, out: list[str]) -> None:
    _emit(out, depth, label)
    for stmt in block:
        _dump_stmt(stmt, depth + 1, out)


def _dump_stmt(stmt: Stmt, depth: int, out: list[str]) -> None:
    if isinstance(stmt, ExprStmt):
        _emit(out, depth, f"expr-stmt line={stmt.line}")
        _dump_expr(stmt.expr, depth + 1, out)
    elif isinstance(stmt, Assign):
        _emit(out, depth, f"assign line={stmt.line}")
        _dump_expr(stmt.target, depth + 1, out)
        _dump_expr(stmt.value, depth + 1, out)
    elif isinstance(stmt, If):
        _emit(out, depth, f"if line={stmt.line}")
        _dump_block("cond:", [], depth + 1, out)
        _dump_expr(stmt.cond, depth + 2, out)
        _dump_block("then:", stmt.then_block, depth + 1, out)
        if stmt.else_block is not None:
            _dump_block("else:", stmt.else_block, depth + 1, out)
    elif isinstance(stmt, While):
        _emit(out, depth, f"while line={stmt.line}")
        _dump_block("cond:", [], depth + 1, out)
        _dump_expr(stmt.cond, depth + 2, out)
        _dump_block("body:", stmt.block, depth + 1, out)
    elif isinstance(stmt, For):
        _emit(out, depth, f"for {stmt.var} line={stmt.line}")
        _dump_block("start:", [], depth + 1, out)
        _dump_expr(stmt.start, depth + 2, out)
        _dump_block("end:", [], depth + 1, out)
        _dump_expr(stmt.end, depth + 2, out)
        _dump_block("step:", [], depth + 1, out)
        _dump_expr(stmt.step, depth + 2, out)
        _dump_block("body:", stmt.block, depth + 1, out)
    elif isinstance(stmt, Return):
        _emit(out, depth, f"return line={stmt.line}")
        if stmt.value is not None:
            _dump_expr(stmt.value, depth + 1, out)
    elif isinstance(stmt, FunctionDef):
        kind = "method" if stmt.is_method else "def"
        _emit(out, depth, f"{kind} {stmt.name}({', '.join(stmt.params)}) line={stmt.line}")
        for s in stmt.block:
            _dump_stmt(s, depth + 1, out)
    elif isinstance(stmt, ClassDef):
        _emit(out, depth, f"class {stmt.name} line={stmt.line}")
        for name, expr in stmt.attr_defaults:
            _emit(out, depth + 1, f"attr-default {name}")
            _dump_expr(expr, depth + 2, out)
        for m in stmt.methods:
            _dump_stmt(m, depth + 1, out)
    elif isinstance(stmt, Finish):
        _emit(out, depth, f"finish line={stmt.line}")
        _dump_block("serial:", stmt.serial, depth + 1, out)
        _dump_block("async:", stmt.async_stmts, depth + 1, out)
    else:  # pragma: no cover
        raise TypeError(f"unknown statement node {stmt!r}")


def _dump_expr(expr: Expr, depth: int, out: list[str]) -> None:
    if isinstance(expr, NumberLit):
        _emit(out, depth, f"number {expr.value:g} line={expr.line}")
    elif isinstance(expr, StringLit):
        _emit(out, depth, f"string {expr.value!r} line={expr.line}")
    elif isinstance(expr, BoolLit):
        _emit(out, depth, f"bool {'true' if expr.value else 'false'} line={expr.line}")
    elif isinstance(expr, Var):
        _emit(out, depth, f"var {expr.name} line={expr.line}")
    elif isinstance(expr, SelfAccess):
        _emit(out, depth, f"self-access {expr.name} line={expr.line}")
    elif isinstance(expr, Binary):
        _emit(out, depth, f"binary {expr.op} line={expr.line}")
        _dump_expr(expr.left, depth + 1, out)
        _dump_expr(expr.right, depth + 1, out)
    elif isinstance(expr, Unary):
        _emit(out, depth, f"unary {expr.op} line={expr.line}")
        _dump_expr(expr.operand, depth + 1, out)
    elif isinstance(expr, Call):
        _emit(out, depth, f"call {expr.name} line={expr.line}")
        for a in expr.args:
            _dump_expr(a, depth + 1, out)
    elif isinstance(expr, MethodCall):
        target = "self" if expr.obj is None else "object"
        _emit(out, depth, f"method-call {expr.name} on {target} line={expr.line}")
        if expr.obj is not None:
            _dump_expr(expr.obj, depth + 1, out)
        for a in expr.args:
            _dump_expr(a, depth + 1, out)
    else:  # pragma: no cover
        raise TypeError(f"unknown expression node {expr!r}")
