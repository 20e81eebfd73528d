"""Recursive-descent parser with precedence climbing for expressions.

Blocks mirror the lexer's INDENT/DEDENT structure: every control statement
owns a non-empty list of statements. Expressions become binary trees whose
nesting follows the precedence table below; ``=`` (precedence 1) exists only
as the root of an assignment statement and can never nest inside an
expression.
"""

from __future__ import annotations

from nsk import ast
from nsk.errors import NskParseError
from nsk.lexer import Token, TokenKind, number_value, string_value, tokenize

# Precedence (low -> high). '=' (1) is handled at statement level.
PRECEDENCE = {
    "or": 2,
    "and": 3,
    "==": 4, "!=": 4, "<": 4, "<=": 4, ">": 4, ">=": 4,
    "+": 5, "-": 5,
    "*": 6, "/": 6,
    "@": 7,
}
COMPARISONS = frozenset({"==", "!=", "<", "<=", ">", ">="})
UNARY_PRECEDENCE = 8


def parse(tokens: list[Token]) -> ast.Program:
    """Parse a full token stream (ending in EOF) into a Program."""
    return _Parser(tokens).parse_program()


def parse_source(source: str) -> ast.Program:
    return parse(tokenize(source))


def parse_expression(tokens: list[Token], minimum_precedence: int = 1) -> ast.Expr | ast.Assign:
    """Parse a single expression from the stream.

    With ``minimum_precedence`` <= 1 an assignment form ``name = expr`` is
    accepted and returned as the tree root; at 2 or above only pure
    expressions parse.
    """
    p = _Parser(tokens)
    if minimum_precedence <= 1:
        return p.expression_or_assignment()
    return p.expression(minimum_precedence)


def parse_finish(tokens: list[Token]) -> ast.Finish:
    """Parse a finish statement; the cursor must rest on the `finish` keyword."""
    p = _Parser(tokens)
    return p.finish_statement()


def parse_class(tokens: list[Token]) -> ast.ClassDef:
    """Parse a class definition; the cursor must rest on the `class` keyword."""
    p = _Parser(tokens)
    return p.class_definition()


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0
        self.function_depth = 0
        self.in_method = False

    # --- token plumbing ---

    def peek(self, offset: int = 0) -> Token:
        i = min(self.pos + offset, len(self.tokens) - 1)
        return self.tokens[i]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind is not TokenKind.EOF:
            self.pos += 1
        return tok

    def at(self, kind: TokenKind, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind is kind and (text is None or tok.text == text)

    def expect(self, kind: TokenKind, text: str | None = None, what: str | None = None) -> Token:
        if self.at(kind, text):
            return self.advance()
        expected = what or (repr(text) if text else kind.value)
        tok = self.peek()
        found = tok.text or tok.kind.value
        raise NskParseError(f"expected {expected}, found {found!r}", tok.line, tok.column)

    def error(self, message: str, tok: Token | None = None):
        tok = tok or self.peek()
        raise NskParseError(message, tok.line, tok.column)

    # --- program and statements ---

    def parse_program(self) -> ast.Program:
        body: list[ast.Stmt] = []
        while not self.at(TokenKind.EOF):
            body.append(self.statement())
        seen: set[str] = set()
        for stmt in body:
            if isinstance(stmt, (ast.FunctionDef, ast.ClassDef)):
                if stmt.name in seen:
                    kind = "function" if isinstance(stmt, ast.FunctionDef) else "class"
                    raise NskParseError(f"duplicate top-level {kind} name {stmt.name!r}", stmt.line)
                seen.add(stmt.name)
        return ast.Program(body)

    def statement(self) -> ast.Stmt:
        tok = self.peek()
        if tok.kind is TokenKind.KEYWORD:
            if tok.text == "def":
                return self.function_definition()
            if tok.text == "class":
                return self.class_definition()
            if tok.text == "if":
                return self.if_statement()
            if tok.text == "while":
                return self.while_statement()
            if tok.text == "for":
                return self.for_statement()
            if tok.text == "finish":
                return self.finish_statement()
            if tok.text == "return":
                return self.return_statement()
            if tok.text == "async":
                self.error("'async' is only allowed inside a finish block")
            if tok.text == "else":
                self.error("'else' without a matching 'if'")
        return self.simple_statement()

    def simple_statement(self) -> ast.Stmt:
        tok = self.peek()
        expr = self.expression(2)
        if self.at(TokenKind.OP, "="):
            if not isinstance(expr, (ast.Var, ast.SelfAccess)):
                self.error("cannot assign to this expression")
            self.advance()
            value = self.expression(2)
            self.expect(TokenKind.NEWLINE, what="end of line")
            return ast.Assign(expr, value, line=tok.line)
        self.expect(TokenKind.NEWLINE, what="end of line")
        return ast.ExprStmt(expr, line=tok.line)

    def block(self, context: str) -> list[ast.Stmt]:
        self.expect(TokenKind.OP, ":")
        self.expect(TokenKind.NEWLINE, what="end of line")
        if not self.at(TokenKind.INDENT):
            self.error(f"expected an indented block after {context}")
        self.advance()
        stmts: list[ast.Stmt] = []
        while not self.at(TokenKind.DEDENT):
            stmts.append(self.statement())
        self.advance()
        return stmts

    def if_statement(self) -> ast.If:
        tok = self.advance()
        cond = self.expression(2)
        then_block = self.block("'if'")
        else_block = None
        if self.at(TokenKind.KEYWORD, "else"):
            self.advance()
            else_block = self.block("'else'")
        return ast.If(cond, then_block, else_block, line=tok.line)

    def while_statement(self) -> ast.While:
        tok = self.advance()
        cond = self.expression(2)
        block = self.block("'while'")
        return ast.While(cond, block, line=tok.line)

    def for_statement(self) -> ast.For:
        # Surface form `for i in range(start, end[, step])`, desugared here;
        # `in` and `range` are contextual words, not keywords.
        tok = self.advance()
        var = self.expect(TokenKind.IDENT, what="a loop variable name").text
        word = self.expect(TokenKind.IDENT, what="'in'")
        if word.text != "in":
            self.error("expected 'in' in for statement", word)
        word = self.expect(TokenKind.IDENT, what="'range'")
        if word.text != "range":
            self.error("for loops support only the range(start, end, step) form", word)
        self.expect(TokenKind.OP, "(")
        start = self.expression(2)
        self.expect(TokenKind.OP, ",")
        end = self.expression(2)
        if self.at(TokenKind.OP, ","):
            self.advance()
            step = self.expression(2)
        else:
            step = ast.NumberLit(1.0, line=tok.line)
        self.expect(TokenKind.OP, ")")
        block = self.block("'for'")
        return ast.For(var, start, end, step, block, line=tok.line)

    def return_statement(self) -> ast.Return:
        tok = self.advance()
        if self.function_depth == 0:
            self.error("'return' outside of a function", tok)
        value = None
        if not self.at(TokenKind.NEWLINE):
            value = self.expression(2)
        self.expect(TokenKind.NEWLINE, what="end of line")
        return ast.Return(value, line=tok.line)

    def function_definition(self, in_class: bool = False) -> ast.FunctionDef:
        tok = self.advance()
        if self.function_depth > 0:
            self.error("nested function definitions are not supported", tok)
        name = self.expect(TokenKind.IDENT, what="a function name").text
        self.expect(TokenKind.OP, "(")
        params: list[str] = []
        if in_class:
            self.expect(TokenKind.KEYWORD, "self", what="'self' as the first method parameter")
            if self.at(TokenKind.OP, ","):
                self.advance()
        if not self.at(TokenKind.OP, ")"):
            while True:
                params.append(self.expect(TokenKind.IDENT, what="a parameter name").text)
                if not self.at(TokenKind.OP, ","):
                    break
                self.advance()
        self.expect(TokenKind.OP, ")")
        self.function_depth += 1
        old_in_method = self.in_method
        self.in_method = in_class
        try:
            block = self.block(f"'def {name}'")
        finally:
            self.function_depth -= 1
            self.in_method = old_in_method
        return ast.FunctionDef(name, params, block, is_method=in_class, line=tok.line)

    def class_definition(self) -> ast.ClassDef:
        tok = self.advance()
        if self.function_depth > 0:
            self.error("classes must be declared at top level", tok)
        name = self.expect(TokenKind.IDENT, what="a class name").text
        if self.at(TokenKind.OP, "("):
            self.error("class inheritance is not supported")
        self.expect(TokenKind.OP, ":")
        self.expect(TokenKind.NEWLINE, what="end of line")
        if not self.at(TokenKind.INDENT):
            self.error(f"expected an indented block after 'class {name}'")
        self.advance()
        attr_defaults: list[tuple[str, ast.Expr]] = []
        methods: list[ast.FunctionDef] = []
        method_names: set[str] = set()
        while not self.at(TokenKind.DEDENT):
            if self.at(TokenKind.KEYWORD, "def"):
                method = self.function_definition(in_class=True)
                if method.name in method_names:
                    raise NskParseError(f"duplicate method name {method.name!r}", method.line)
                method_names.add(method.name)
                methods.append(method)
            elif self.at(TokenKind.IDENT):
                attr = self.advance()
                self.expect(TokenKind.OP, "=", what="'=' in attribute default")
                value = self.expression(2)
                self.expect(TokenKind.NEWLINE, what="end of line")
                attr_defaults.append((attr.text, value))
            else:
                self.error("expected a method definition or attribute default")
        self.advance()
        return ast.ClassDef(name, attr_defaults, methods, line=tok.line)

    def finish_statement(self) -> ast.Finish:
        tok = self.advance()
        self.expect(TokenKind.OP, ":")
        self.expect(TokenKind.NEWLINE, what="end of line")
        if not self.at(TokenKind.INDENT):
            self.error("expected an indented block after 'finish:'")
        self.advance()
        serial: list[ast.Stmt] = []
        async_stmts: list[ast.Stmt] = []
        while not self.at(TokenKind.DEDENT):
            if self.at(TokenKind.KEYWORD, "async"):
                self.advance()
                async_stmts.append(self.statement())
            else:
                serial.append(self.statement())
        self.advance()
        if not serial and not async_stmts:
            self.error("empty finish body", tok)
        return ast.Finish(serial, async_stmts, line=tok.line)

    # --- expressions ---

    def expression_or_assignment(self) -> ast.Expr | ast.Assign:
        tok = self.peek()
        expr = self.expression(2)
        if self.at(TokenKind.OP, "="):
            if not isinstance(expr, (ast.Var, ast.SelfAccess)):
                self.error("cannot assign to this expression")
            self.advance()
            value = self.expression(2)
            return ast.Assign(expr, value, line=tok.line)
        return expr

    def expression(self, min_prec: int) -> ast.Expr:
        left = self.unary()
        while True:
            tok = self.peek()
            if tok.kind is TokenKind.OP and tok.text in PRECEDENCE:
                op = tok.text
            elif tok.kind is TokenKind.KEYWORD and tok.text in ("and", "or"):
                op = tok.text
            else:
                break
            prec = PRECEDENCE[op]
            if prec < min_prec:
                break
            if op in COMPARISONS and isinstance(left, ast.Binary) and left.op in COMPARISONS:
                self.error("chained comparisons are not allowed")
            self.advance()
            right = self.expression(prec + 1)  # all binary operators associate left
            left = ast.Binary(op, left, right, line=tok.line)
        return left

    def unary(self) -> ast.Expr:
        tok = self.peek()
        if tok.kind is TokenKind.OP and tok.text == "-":
            self.advance()
            return ast.Unary("-", self.unary(), line=tok.line)
        if tok.kind is TokenKind.KEYWORD and tok.text == "not":
            self.advance()
            return ast.Unary("not", self.unary(), line=tok.line)
        return self.postfix(self.primary())

    def postfix(self, expr: ast.Expr) -> ast.Expr:
        while True:
            if self.at(TokenKind.OP, "."):
                dot = self.advance()
                name = self.expect(TokenKind.IDENT, what="a method name").text
                if not self.at(TokenKind.OP, "("):
                    self.error("attribute access requires a method call", dot)
                args = self.call_args()
                expr = ast.MethodCall(expr, name, args, line=dot.line)
            elif self.at(TokenKind.OP, "("):
                self.error("only named functions can be called")
            else:
                return expr

    def call_args(self) -> list[ast.Expr]:
        self.expect(TokenKind.OP, "(")
        args: list[ast.Expr] = []
        if not self.at(TokenKind.OP, ")"):
            while True:
                args.append(self.expression(2))
                if not self.at(TokenKind.OP, ","):
                    break
                self.advance()
        self.expect(TokenKind.OP, ")")
        return args

    def primary(self) -> ast.Expr:
        tok = self.peek()
        if tok.kind is TokenKind.NUMBER:
            self.advance()
            return ast.NumberLit(number_value(tok), line=tok.line)
        if tok.kind is TokenKind.STRING:
            self.advance()
            return ast.StringLit(string_value(tok), line=tok.line)
        if tok.kind is TokenKind.KEYWORD and tok.text in ("true", "false"):
            self.advance()
            return ast.BoolLit(tok.text == "true", line=tok.line)
        if tok.kind is TokenKind.KEYWORD and tok.text == "self":
            if not self.in_method:
                self.error("'self' outside of a class method")
            self.advance()
            self.expect(TokenKind.OP, ".", what="'.' after self")
            name = self.expect(TokenKind.IDENT, what="an attribute name").text
            if self.at(TokenKind.OP, "("):
                # self.method(...) calls a method on the current object
                args = self.call_args()
                return ast.MethodCall(None, name, args, line=tok.line)
            return ast.SelfAccess(name, line=tok.line)
        if tok.kind is TokenKind.IDENT:
            self.advance()
            if self.at(TokenKind.OP, "("):
                args = self.call_args()
                return ast.Call(tok.text, args, line=tok.line)
            return ast.Var(tok.text, line=tok.line)
        if tok.kind is TokenKind.OP and tok.text == "(":
            self.advance()
            inner = self.expression(2)
            self.expect(TokenKind.OP, ")")
            return inner
        found = tok.text or tok.kind.value
        self.error(f"expected an expression, found {found!r}")
