"""Runtime values, scope threading, and the compile-once session state.

Variables never live under bare names: a local is stored as
``<scope-id>.<name>`` in its invocation's scope, an object attribute as
``<object-name>.<attribute>`` in the process-wide attribute store. Method
calls thread three hidden arguments (object name, fresh scope, caller
scope); user code never sees them.

Each user function body is lowered to executable form exactly once per
process and the compiled form is shared across calls and threads; the
session counts lowering events so tests can assert the contract.
"""

from __future__ import annotations

import itertools
import sys
import threading

import numpy as np

from nsk import ast
from nsk.autodiff import Tape, push_assignment
from nsk.concurrency import LockRegistry
from nsk.errors import NskRuntimeError
from nsk.nn import ParamGroup
from nsk.tensor import GradCache, Pool, Tensor


class Scope:
    """One invocation's variable environment; keys are fully qualified."""

    __slots__ = ("scope_id", "bindings", "shared_depth")

    def __init__(self, scope_id: str):
        self.scope_id = scope_id
        self.bindings: dict[str, object] = {}
        self.shared_depth = 0  # >0 while a finish block exposes this scope to tasks

    def key(self, name: str) -> str:
        return f"{self.scope_id}.{name}"

    def has(self, name: str) -> bool:
        return f"{self.scope_id}.{name}" in self.bindings

    def write(self, key: str, value, *, locked: bool, strict: bool) -> None:
        if strict and self.shared_depth > 0 and not locked:
            raise NskRuntimeError(f"unsynchronized shared write to {key!r}")
        self.bindings[key] = value

    def __repr__(self):
        return f"Scope({self.scope_id}, {len(self.bindings)} bindings)"


class ObjectInstance:
    __slots__ = ("object_name", "class_name")

    def __init__(self, object_name: str, class_name: str):
        self.object_name = object_name
        self.class_name = class_name

    def __repr__(self):
        return f"<{self.object_name}>"


class FunctionRecord:
    """A user function: parsed body plus its compiled-once executable form."""

    def __init__(self, definition: ast.FunctionDef):
        self.name = definition.name
        self.params = definition.params
        self.body = definition.block
        self.is_method = definition.is_method
        self.line = definition.line
        self.compiled: list | None = None
        self.compile_count = 0
        self._lock = threading.Lock()

    def ensure_compiled(self, session: "Session") -> list:
        compiled = self.compiled
        if compiled is not None:
            return compiled
        with self._lock:
            if self.compiled is None:
                from nsk.interpreter import compile_block

                self.compiled = compile_block(self.body, session)
                self.compile_count += 1
                session.count_lowering()
            return self.compiled


class ClassRecord:
    def __init__(self, name: str, line: int):
        self.name = name
        self.line = line
        self.attr_defaults: list[tuple[str, object]] = []  # (name, compiled expr)
        self.methods: dict[str, FunctionRecord] = {}
        self._counter = itertools.count(1)

    def next_object_name(self) -> str:
        return f"{self.name}#{next(self._counter)}"


class Frame:
    """Execution context: scope chain plus the three hidden call arguments.

    ``scopes[0]`` is where new bindings land; outer entries exist only for
    finish/async tasks, which may read (and, under locks, write) the scopes
    visible where they were spawned.
    """

    __slots__ = ("session", "scopes", "object_name", "caller_scope")

    def __init__(self, session: "Session", scopes: list[Scope],
                 object_name: str | None, caller_scope: Scope | None):
        self.session = session
        self.scopes = scopes
        self.object_name = object_name
        self.caller_scope = caller_scope


class Batch:
    """A delivered (features, labels) pair, or the end-of-epoch marker."""

    __slots__ = ("features", "labels", "ended")

    def __init__(self, features: Tensor | None, labels: Tensor | None, ended: bool = False):
        self.features = features
        self.labels = labels
        self.ended = ended

    def __repr__(self):
        return "<batch end>" if self.ended else "<batch>"


class Session:
    """Process-wide interpreter state for one program run."""

    def __init__(self, seed: int = 0, workers: int = 3, strict_shared_writes: bool = True,
                 pool: Pool | None = None, trace_calls: bool = False,
                 stdout=None, stderr=None):
        self.pool = pool if pool is not None else Pool()
        self.grad_cache = GradCache()
        self.locks = LockRegistry()
        self.param_group = ParamGroup()
        self.functions: dict[str, FunctionRecord] = {}
        self.classes: dict[str, ClassRecord] = {}
        self.attributes: dict[str, object] = {}
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.workers = workers
        self.strict = strict_shared_writes
        self.trace_calls = trace_calls
        self.stdout = stdout if stdout is not None else sys.stdout
        self.stderr = stderr if stderr is not None else sys.stderr
        self.lowering_events = 0
        self.active_finishes = 0
        self.script_dir: str | None = None
        self._scope_ids = itertools.count(1)
        self._param_ids = itertools.count(0)
        self._state_lock = threading.Lock()
        self._tls = threading.local()

    # --- per-thread training state ---

    def tape(self) -> Tape:
        tape = getattr(self._tls, "tape", None)
        if tape is None:
            tape = Tape()
            self._tls.tape = tape
        return tape

    def open_roots(self) -> dict:
        # keyed by id, insertion-ordered: flush order must be deterministic
        roots = getattr(self._tls, "open_roots", None)
        if roots is None:
            roots = {}
            self._tls.open_roots = roots
        return roots

    def note_tensor(self, out: Tensor, *consumed) -> Tensor:
        """Track a freshly recorded tensor as an open backward-tree root."""
        roots = self.open_roots()
        for t in consumed:
            if isinstance(t, Tensor):
                roots.pop(id(t), None)
        if out.node is not None and not out.node.pushed and out.param_name is None:
            roots[id(out)] = out
        return out

    def push_named(self, key: str, value) -> None:
        """Record an assignment on the tape when its value is a fresh tree."""
        if (
            isinstance(value, Tensor)
            and value.param_name is None
            and value.node is not None
            and not value.node.pushed
        ):
            push_assignment(self.tape(), key, value)
        if isinstance(value, Tensor):
            self.open_roots().pop(id(value), None)

    def end_statement(self, frame: Frame, exempt=None) -> None:
        """Push any dangling recorded roots so backward can reclaim them."""
        roots = self.open_roots()
        if not roots:
            return
        keep = None
        for t in roots.values():
            if t is exempt:
                keep = t
                continue
            if t.node is not None and not t.node.pushed:
                push_assignment(self.tape(), f"{frame.scopes[0].scope_id}.%tmp", t)
        roots.clear()
        if keep is not None:
            roots[id(keep)] = keep

    # --- scopes, params, jit bookkeeping ---

    def new_scope(self) -> Scope:
        return Scope(f"s{next(self._scope_ids)}")

    def new_param_name(self) -> str:
        return f"p{next(self._param_ids)}"

    def count_lowering(self) -> None:
        with self._state_lock:
            self.lowering_events += 1

    def enter_finish(self, frame: Frame) -> None:
        with self._state_lock:
            self.active_finishes += 1
            for scope in frame.scopes:
                scope.shared_depth += 1

    def exit_finish(self, frame: Frame) -> None:
        with self._state_lock:
            self.active_finishes -= 1
            for scope in frame.scopes:
                scope.shared_depth -= 1

    def trace(self, fn_name: str, scope_id: str) -> None:
        if self.trace_calls:
            self.stderr.write(f"trace: call {fn_name} scope={scope_id}\n")

    # --- object attribute store (cross-task shared) ---

    def read_attr(self, key: str, line: int | None = None):
        try:
            return self.attributes[key]
        except KeyError:
            name = key.split(".", 1)[1] if "." in key else key
            raise NskRuntimeError(f"read of unset attribute 'self.{name}'", line) from None

    def write_attr(self, key: str, value, *, locked: bool) -> None:
        if self.strict and self.active_finishes > 0 and not locked:
            raise NskRuntimeError(f"unsynchronized shared write to {key!r}")
        self.attributes[key] = value


def resolve_variable(name: str, is_self: bool, scope: Scope | None,
                     object_name: str | None) -> str:
    """Storage key for a variable: object-qualified for self, else scope-qualified."""
    if is_self:
        if object_name is None:
            raise NskRuntimeError(f"'self.{name}' outside of a method call")
        return f"{object_name}.{name}"
    if scope is None:
        raise NskRuntimeError(f"no scope to resolve {name!r}")
    return scope.key(name)


def value_kind(value) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, Tensor):
        return "tensor"
    if isinstance(value, ObjectInstance):
        return "object"
    if isinstance(value, Batch):
        return "batch"
    if value is None:
        return "none"
    from nsk.dataset import DatasetHandle

    if isinstance(value, DatasetHandle):
        return "dataset"
    return type(value).__name__


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if value.is_integer() and abs(value) < 1e16:
            return str(int(value))
        return repr(value)
    if isinstance(value, str):
        return value
    if isinstance(value, Tensor):
        if value.numel == 1:
            return format_value(value.item())
        return np.array2string(value.data, precision=6, suppress_small=True)
    if value is None:
        return "none"
    if isinstance(value, ObjectInstance):
        return f"<{value.object_name}>"
    from nsk.dataset import DatasetHandle

    if isinstance(value, DatasetHandle):
        return f"<dataset {value.num_rows}x{value.num_features}>"
    return repr(value)
