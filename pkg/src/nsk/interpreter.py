"""Lowers the AST to closures and executes programs.

Lowering happens once per function body (the compile-once contract); the
produced closures take a Frame and run directly, so repeated calls never
revisit the AST. Statement closures stamp their source line onto any error
passing through.

Assignments are where the concurrency and autodiff contracts meet: a write
that targets storage visible to other tasks (an outer scope while a finish
is active, or the object-attribute store) runs its whole read-modify-write
under that key's lock; and any assignment whose value is a freshly recorded
tensor pushes its backward tree onto the thread's tape.
"""

from __future__ import annotations

from nsk import ast
from nsk.autodiff import rec_elementwise, rec_matmul_t
from nsk.concurrency import locked_assign, run_finish
from nsk.errors import NskError, NskRuntimeError, NskTypeError
from nsk.runtime import (
    ClassRecord,
    Frame,
    FunctionRecord,
    ObjectInstance,
    Scope,
    Session,
    value_kind,
)
from nsk.tensor import Tensor


class _ReturnSignal(Exception):
    pass


# User-call nesting cap: deep enough for real recursion, shallow enough that
# the host interpreter's own stack (about 5 frames per user call) stays safe.
MAX_CALL_DEPTH = 1500


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _truthy(v, line=None) -> bool:
    if isinstance(v, bool):
        return v
    if _is_number(v):
        return v != 0
    raise NskTypeError(f"condition must be a boolean or number, got {value_kind(v)}", line)


# --- compilation -----------------------------------------------------------------

def compile_block(stmts: list[ast.Stmt], session: Session) -> list:
    return [compile_stmt(s, session) for s in stmts]


def compile_stmt(stmt: ast.Stmt, session: Session):
    line = stmt.line
    if isinstance(stmt, ast.Assign):
        run = _compile_assign(stmt, session)
    elif isinstance(stmt, ast.ExprStmt):
        run = _compile_expr_stmt(stmt, session)
    elif isinstance(stmt, ast.If):
        run = _compile_if(stmt, session)
    elif isinstance(stmt, ast.While):
        run = _compile_while(stmt, session)
    elif isinstance(stmt, ast.For):
        run = _compile_for(stmt, session)
    elif isinstance(stmt, ast.Return):
        run = _compile_return(stmt, session)
    elif isinstance(stmt, ast.Finish):
        run = _compile_finish(stmt, session)
    elif isinstance(stmt, (ast.FunctionDef, ast.ClassDef)):
        raise NskRuntimeError("definitions are only allowed at top level", line)
    else:  # pragma: no cover
        raise NskRuntimeError(f"cannot compile statement {stmt!r}", line)

    def wrapped(frame, _run=run, _line=line):
        try:
            _run(frame)
        except NskError as e:
            if e.line is None:
                e.line = _line
            raise

    return wrapped


def _find_scope(frame: Frame, name: str) -> Scope | None:
    for scope in frame.scopes:
        if scope.has(name):
            return scope
    return None


def _write_var(frame: Frame, name: str, compute, line):
    """Assign through the scope chain; cross-task-visible targets lock."""
    session = frame.session
    target = _find_scope(frame, name) or frame.scopes[0]
    key = target.key(name)
    if session.strict and target.shared_depth > 0:
        def locked_write():
            value = compute(frame)
            target.write(key, value, locked=True, strict=True)
            return value
        value = locked_assign(session.locks, key, locked_write)
    else:
        value = compute(frame)
        target.write(key, value, locked=False, strict=session.strict)
    return key, value


def _write_attr(frame: Frame, name: str, compute, line):
    session = frame.session
    if frame.object_name is None:
        raise NskRuntimeError(f"'self.{name}' outside of a method call", line)
    key = f"{frame.object_name}.{name}"
    if session.strict and session.active_finishes > 0:
        def locked_write():
            value = compute(frame)
            session.write_attr(key, value, locked=True)
            return value
        value = locked_assign(session.locks, key, locked_write)
    else:
        value = compute(frame)
        session.write_attr(key, value, locked=False)
    return key, value


def _compile_assign(stmt: ast.Assign, session: Session):
    rhs = compile_expr(stmt.value, session)
    line = stmt.line
    if isinstance(stmt.target, ast.Var):
        name = stmt.target.name

        def run(frame):
            key, value = _write_var(frame, name, rhs, line)
            frame.session.push_named(key, value)
            frame.session.end_statement(frame)

        return run
    name = stmt.target.name

    def run(frame):
        key, value = _write_attr(frame, name, rhs, line)
        frame.session.push_named(key, value)
        frame.session.end_statement(frame)

    return run


def _compile_expr_stmt(stmt: ast.ExprStmt, session: Session):
    evaluate = compile_expr(stmt.expr, session)

    def run(frame):
        value = evaluate(frame)
        if isinstance(value, Tensor):
            frame.session.push_named(f"{frame.scopes[0].scope_id}.%expr", value)
        frame.session.end_statement(frame)

    return run


def _compile_if(stmt: ast.If, session: Session):
    cond = compile_expr(stmt.cond, session)
    then_block = compile_block(stmt.then_block, session)
    else_block = compile_block(stmt.else_block, session) if stmt.else_block else None
    line = stmt.line

    def run(frame):
        if _truthy(cond(frame), line):
            for st in then_block:
                st(frame)
        elif else_block is not None:
            for st in else_block:
                st(frame)

    return run


def _compile_while(stmt: ast.While, session: Session):
    cond = compile_expr(stmt.cond, session)
    block = compile_block(stmt.block, session)
    line = stmt.line

    def run(frame):
        while _truthy(cond(frame), line):
            for st in block:
                st(frame)

    return run


def _compile_for(stmt: ast.For, session: Session):
    start = compile_expr(stmt.start, session)
    end = compile_expr(stmt.end, session)
    step = compile_expr(stmt.step, session)
    block = compile_block(stmt.block, session)
    name = stmt.var
    line = stmt.line

    def run(frame):
        lo, hi, inc = start(frame), end(frame), step(frame)
        for v in (lo, hi, inc):
            if not _is_number(v):
                raise NskTypeError(f"range() bounds must be numbers, got {value_kind(v)}", line)
        if inc == 0:
            raise NskRuntimeError("range() step must be nonzero", line)
        i = float(lo)
        while (inc > 0 and i < hi) or (inc < 0 and i > hi):
            _write_var(frame, name, lambda _f, _i=i: _i, line)
            for st in block:
                st(frame)
            i += inc

    return run


def _compile_return(stmt: ast.Return, session: Session):
    rhs = compile_expr(stmt.value, session) if stmt.value is not None else None
    line = stmt.line

    def run(frame):
        value = rhs(frame) if rhs is not None else None
        frame.session.end_statement(frame, exempt=value if isinstance(value, Tensor) else None)
        caller = frame.caller_scope
        if caller is None:
            raise NskRuntimeError("'return' outside of a function call", line)
        caller.bindings[f"{caller.scope_id}.%ret"] = value
        raise _ReturnSignal()

    return run


def _compile_finish(stmt: ast.Finish, session: Session):
    serial_block = compile_block(stmt.serial, session)
    async_closures = [(compile_stmt(s, session), s.line) for s in stmt.async_stmts]
    line = stmt.line

    def run(frame):
        session = frame.session
        session.enter_finish(frame)
        try:
            def make_task(closure, task_line):
                def task():
                    scope = session.new_scope()
                    tframe = Frame(session, [scope] + frame.scopes, frame.object_name, frame.caller_scope)
                    try:
                        closure(tframe)
                    except _ReturnSignal:
                        raise NskRuntimeError(
                            "'return' cannot cross an async task boundary", task_line
                        ) from None
                return task

            tasks = [make_task(c, ln) for c, ln in async_closures]

            def serial():
                for st in serial_block:
                    st(frame)

            run_finish(serial, tasks)
        finally:
            session.exit_finish(frame)

    return run


# --- expressions -------------------------------------------------------------------

def compile_expr(expr: ast.Expr, session: Session):
    if isinstance(expr, ast.NumberLit):
        value = float(expr.value)
        return lambda frame: value
    if isinstance(expr, ast.StringLit):
        text = expr.value
        return lambda frame: text
    if isinstance(expr, ast.BoolLit):
        flag = bool(expr.value)
        return lambda frame: flag
    if isinstance(expr, ast.Var):
        return _compile_var(expr)
    if isinstance(expr, ast.SelfAccess):
        return _compile_self_access(expr)
    if isinstance(expr, ast.Binary):
        return _compile_binary(expr, session)
    if isinstance(expr, ast.Unary):
        return _compile_unary(expr, session)
    if isinstance(expr, ast.Call):
        return _compile_call(expr, session)
    if isinstance(expr, ast.MethodCall):
        return _compile_method_call(expr, session)
    raise NskRuntimeError(f"cannot compile expression {expr!r}", expr.line)  # pragma: no cover


def _compile_var(expr: ast.Var):
    name = expr.name
    line = expr.line

    def run(frame):
        for scope in frame.scopes:
            try:
                return scope.bindings[scope.key(name)]
            except KeyError:
                continue
        raise NskRuntimeError(f"read of unbound variable {name!r}", line)

    return run


def _compile_self_access(expr: ast.SelfAccess):
    name = expr.name
    line = expr.line

    def run(frame):
        if frame.object_name is None:
            raise NskRuntimeError(f"'self.{name}' outside of a method call", line)
        return frame.session.read_attr(f"{frame.object_name}.{name}", line)

    return run


def _compile_binary(expr: ast.Binary, session: Session):
    op = expr.op
    line = expr.line
    left = compile_expr(expr.left, session)
    right = compile_expr(expr.right, session)
    if op == "and":
        def run(frame):
            return _truthy(left(frame), line) and _truthy(right(frame), line)
        return run
    if op == "or":
        def run(frame):
            return _truthy(left(frame), line) or _truthy(right(frame), line)
        return run
    if op in ("==", "!=", "<", "<=", ">", ">="):
        def run(frame):
            return _compare(op, left(frame), right(frame), line)
        return run

    def run(frame):
        return _arith(op, left(frame), right(frame), frame.session, line)

    return run


def _compile_unary(expr: ast.Unary, session: Session):
    operand = compile_expr(expr.operand, session)
    line = expr.line
    if expr.op == "not":
        def run(frame):
            return not _truthy(operand(frame), line)
        return run

    def run(frame):
        v = operand(frame)
        if _is_number(v):
            return -float(v)
        if isinstance(v, Tensor):
            out = rec_elementwise("neg", v, None, frame.session.pool)
            return frame.session.note_tensor(out, v)
        raise NskTypeError(f"unary '-' not supported for {value_kind(v)}", line)

    return run


def _compare(op: str, l, r, line) -> bool:
    if _is_number(l) and _is_number(r):
        pass
    elif isinstance(l, str) and isinstance(r, str):
        pass
    elif isinstance(l, bool) and isinstance(r, bool):
        if op not in ("==", "!="):
            raise NskTypeError(f"{op!r} not supported for booleans", line)
    else:
        raise NskTypeError(
            f"cannot compare {value_kind(l)} with {value_kind(r)}", line
        )
    if op == "==":
        return l == r
    if op == "!=":
        return l != r
    if op == "<":
        return l < r
    if op == "<=":
        return l <= r
    if op == ">":
        return l > r
    return l >= r


def _arith(op: str, l, r, session: Session, line):
    pool = session.pool
    l_num, r_num = _is_number(l), _is_number(r)
    l_t, r_t = isinstance(l, Tensor), isinstance(r, Tensor)
    if op == "+":
        if l_num and r_num:
            return float(l) + float(r)
        if isinstance(l, str) and isinstance(r, str):
            return l + r
        if l_t and r_t:
            return session.note_tensor(rec_elementwise("add", l, r, pool), l, r)
        if l_t and r_num:
            return session.note_tensor(rec_elementwise("scalar-add", l, float(r), pool), l)
        if r_t and l_num:
            return session.note_tensor(rec_elementwise("scalar-add", r, float(l), pool), r)
    elif op == "-":
        if l_num and r_num:
            return float(l) - float(r)
        if l_t and r_t:
            return session.note_tensor(rec_elementwise("sub", l, r, pool), l, r)
        if l_t and r_num:
            return session.note_tensor(rec_elementwise("scalar-add", l, -float(r), pool), l)
        if r_t and l_num:
            neg = session.note_tensor(rec_elementwise("neg", r, None, pool), r)
            return session.note_tensor(rec_elementwise("scalar-add", neg, float(l), pool), neg)
    elif op == "*":
        if l_num and r_num:
            return float(l) * float(r)
        if l_t and r_t:
            return session.note_tensor(rec_elementwise("hadamard", l, r, pool), l, r)
        if l_t and r_num:
            return session.note_tensor(rec_elementwise("scalar-mul", l, float(r), pool), l)
        if r_t and l_num:
            return session.note_tensor(rec_elementwise("scalar-mul", r, float(l), pool), r)
    elif op == "/":
        if l_num and r_num:
            if float(r) == 0.0:
                raise NskRuntimeError("division by zero", line)
            return float(l) / float(r)
        if l_t and r_num:
            if float(r) == 0.0:
                raise NskRuntimeError("division by zero", line)
            return session.note_tensor(rec_elementwise("scalar-mul", l, 1.0 / float(r), pool), l)
    elif op == "@":
        if l_t and r_t:
            return session.note_tensor(rec_matmul_t(l, r, pool), l, r)
        raise NskTypeError(
            f"'@' needs two tensors, got {value_kind(l)} and {value_kind(r)}", line
        )
    raise NskTypeError(
        f"{op!r} not supported between {value_kind(l)} and {value_kind(r)}", line
    )


def _compile_call(expr: ast.Call, session: Session):
    name = expr.name
    line = expr.line
    arg_closures = [compile_expr(a, session) for a in expr.args]

    def run(frame):
        args = [a(frame) for a in arg_closures]
        return call_named(frame, name, args, line)

    return run


def _compile_method_call(expr: ast.MethodCall, session: Session):
    obj_closure = compile_expr(expr.obj, session) if expr.obj is not None else None
    name = expr.name
    line = expr.line
    arg_closures = [compile_expr(a, session) for a in expr.args]

    def run(frame):
        session = frame.session
        if obj_closure is None:
            object_name = frame.object_name
            if object_name is None:
                raise NskRuntimeError(f"'self.{name}()' outside of a method call", line)
            class_name = object_name.split("#", 1)[0]
        else:
            value = obj_closure(frame)
            if value is None:
                raise NskRuntimeError(f"method {name!r} called on a none value", line)
            if not isinstance(value, ObjectInstance):
                raise NskTypeError(
                    f"method {name!r} called on a {value_kind(value)}, not an object", line
                )
            object_name, class_name = value.object_name, value.class_name
        cls = session.classes[class_name]
        method = cls.methods.get(name)
        if method is None:
            raise NskRuntimeError(f"class {class_name} has no method {name!r}", line)
        args = [a(frame) for a in arg_closures]
        return call_function(session, method, object_name, args, frame.scopes[0], line)

    return run


# --- calls ------------------------------------------------------------------------

def call_named(frame: Frame, name: str, args: list, line: int | None):
    session = frame.session
    cls = session.classes.get(name)
    if cls is not None:
        return instantiate(session, cls, args, frame.scopes[0], line)
    fn = session.functions.get(name)
    if fn is not None:
        return call_function(session, fn, None, args, frame.scopes[0], line)
    from nsk.builtins import BUILTINS

    builtin = BUILTINS.get(name)
    if builtin is not None:
        return builtin(session, frame, args, line)
    raise NskRuntimeError(f"unknown function {name!r}", line)


def call_function(session: Session, fn: FunctionRecord, object_name: str | None,
                  args: list, caller_scope: Scope, line: int | None = None):
    """Invoke a user function with the three hidden arguments installed."""
    if len(args) != len(fn.params):
        raise NskRuntimeError(
            f"{fn.name}() takes {len(fn.params)} argument(s), got {len(args)}", line
        )
    depth = getattr(session._tls, "call_depth", 0) + 1
    if depth > MAX_CALL_DEPTH:
        raise NskRuntimeError(
            f"call depth exceeded ({MAX_CALL_DEPTH}) in {fn.name}()", line
        )
    session._tls.call_depth = depth
    compiled = fn.ensure_compiled(session)
    scope = session.new_scope()
    session.trace(fn.name, scope.scope_id)
    frame = Frame(session, [scope], object_name, caller_scope)
    for param, value in zip(fn.params, args):
        scope.bindings[scope.key(param)] = value
    ret_key = f"{caller_scope.scope_id}.%ret"
    try:
        for st in compiled:
            st(frame)
    except _ReturnSignal:
        return caller_scope.bindings.pop(ret_key, None)
    finally:
        session._tls.call_depth = depth - 1
    return None


def instantiate(session: Session, cls: ClassRecord, args: list,
                caller_scope: Scope, line: int | None = None) -> ObjectInstance:
    obj_name = cls.next_object_name()
    instance = ObjectInstance(obj_name, cls.name)
    for attr, thunk in cls.attr_defaults:
        dummy = Frame(session, [session.new_scope()], None, None)
        key = f"{obj_name}.{attr}"
        if session.strict and session.active_finishes > 0:
            locked_assign(session.locks, key,
                          lambda k=key, t=thunk, f=dummy: session.write_attr(k, t(f), locked=True))
        else:
            session.write_attr(key, thunk(dummy), locked=False)
    init = cls.methods.get("init")
    if init is not None:
        call_function(session, init, obj_name, args, caller_scope, line)
    elif args:
        raise NskRuntimeError(f"class {cls.name} has no init method but got arguments", line)
    return instance


# --- program execution ---------------------------------------------------------------

def register_program(program: ast.Program, session: Session) -> list[ast.Stmt]:
    """Install function/class records; return the remaining top-level statements."""
    top: list[ast.Stmt] = []
    for stmt in program.body:
        if isinstance(stmt, ast.FunctionDef):
            session.functions[stmt.name] = FunctionRecord(stmt)
        elif isinstance(stmt, ast.ClassDef):
            record = ClassRecord(stmt.name, stmt.line)
            for attr, default in stmt.attr_defaults:
                record.attr_defaults.append((attr, compile_expr(default, session)))
            for method in stmt.methods:
                record.methods[method.name] = FunctionRecord(method)
            session.classes[stmt.name] = record
        else:
            top.append(stmt)
    return top


def execute(program: ast.Program, session: Session, entry: str | None = None,
            source_name: str | None = None) -> int:
    """Run top-level statements, then the entry function; 0 on success.

    ``entry=None`` means: call main if it exists, otherwise accept a program
    of top-level statements only.
    """
    top = register_program(program, session)
    entry_name = entry if entry is not None else "main"
    import sys

    # leave headroom for the ~5 host frames each user call costs
    limit = sys.getrecursionlimit()
    if limit < 8 * MAX_CALL_DEPTH:
        sys.setrecursionlimit(8 * MAX_CALL_DEPTH)
    try:
        fn = session.functions.get(entry_name)
        if fn is None:
            if entry is not None:
                raise NskRuntimeError(f"entry function {entry_name!r} is not defined")
            if not top:
                raise NskRuntimeError("no entry point: no main() and no top-level statements")
        scope = session.new_scope()
        frame = Frame(session, [scope], None, None)
        for st in compile_block(top, session):
            st(frame)
        if fn is not None:
            if fn.params:
                raise NskRuntimeError(
                    f"entry function {entry_name!r} must take no arguments", fn.line
                )
            call_function(session, fn, None, [], scope)
        return 0
    except NskError as e:
        session.stderr.write(f"error: {e.render(source_name)}\n")
        return 1
    except RecursionError:
        session.stderr.write("error: recursion depth exceeded\n")
        return 1
    finally:
        sys.setrecursionlimit(limit)


def run_source(source: str, session: Session, entry: str | None = None) -> int:
    from nsk.parser import parse_source

    return execute(parse_source(source), session, entry)
