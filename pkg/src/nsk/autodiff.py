"""Reverse-mode differentiation over per-assignment backward trees.

Every tensor op records a node holding its operation, operand links and the
saved tensors its gradient rule will read. Each assignment pushes its
expression's root node onto a stack, in execution order. Backpropagation
demands that the most recent entry be a loss node, seeds its gradient with
1.0, then pops entries in reverse: each pop loads the gradient accumulated
for the assigned tensor and walks that entry's tree top-down, applying the
per-op gradient rules, accumulating parameter gradients into the grad cache
and variable gradients into the referenced tensors' slots.

The same walk performs memory reclamation: nodes count their consumer links
at record time, fire once every consumer has delivered (a delivery may carry
no gradient, which is how no-grad data/onehot entries still get collected),
and release their output buffers back to the pool when no saved-operand or
tape hold remains. After backward the stack is empty and, for a fixed-shape
training step, every non-parameter buffer is back in the pool.
"""

from __future__ import annotations

import numpy as np

from nsk.errors import NskRuntimeError
from nsk.tensor import (
    GradCache,
    Pool,
    Tensor,
    bias_add,
    elementwise,
    empty_tensor,
    matmul_t,
    onehot,
    plain_matmul,
    release_tensor,
    tensor_from_array,
)

LOSS_OPS = frozenset({"cross-entropy-loss", "sum-loss"})
LEAF_OPS = frozenset({"param", "data", "constant", "var-ref"})


class BackwardNode:
    """One recorded forward operation, linked into a backward binary tree."""

    __slots__ = (
        "op", "left", "right", "tensor", "saved", "scalar",
        "param_name", "ref", "requires_grad", "pushed",
        "consumers", "seen", "grad_in", "closed",
    )

    def __init__(self, op, tensor, left=None, right=None, saved=(), scalar=None,
                 param_name=None, ref=None, requires_grad=False):
        self.op = op
        self.tensor = tensor
        self.left = left
        self.right = right
        self.saved = tuple(saved)
        self.scalar = scalar
        self.param_name = param_name
        self.ref = ref  # var-ref target tensor
        self.requires_grad = requires_grad
        self.pushed = False
        self.consumers = 0
        self.seen = 0
        self.grad_in: Tensor | None = None
        self.closed = False

    def __repr__(self):
        return f"BackwardNode({self.op}, consumers={self.consumers}, seen={self.seen})"


class Tape:
    """Stack of (assigned-variable key, backward tree root), one per assignment."""

    def __init__(self):
        self.entries: list[tuple[str, BackwardNode]] = []
        self.sealed = False

    def __len__(self):
        return len(self.entries)

    def clear(self, pool: Pool) -> None:
        """Drop all entries, releasing their buffers (for inference passes)."""
        self.sealed = True
        try:
            while self.entries:
                _key, node = self.entries.pop()
                slot = node.tensor.grad
                node.tensor.grad = None
                _release_grad(slot, pool)
                _deliver(node, None, None, pool)
                _decref(node.tensor, pool)
        finally:
            self.sealed = False


# --- recording ----------------------------------------------------------------

def operand_node(t: Tensor) -> BackwardNode:
    """The node a new recording links to for operand ``t``.

    Parameters always link through their persistent leaf. A tensor whose
    node was already pushed by an earlier assignment is referenced through a
    fresh var-ref leaf so its gradient accumulates in the tensor's own slot
    and is picked up when that earlier entry pops.
    """
    if t.param_name is not None:
        if t.node is None:
            t.node = BackwardNode("param", t, param_name=t.param_name, requires_grad=True)
        return t.node
    if t.node is None:
        t.node = BackwardNode("constant", t)
    if t.node.pushed:
        return BackwardNode("var-ref", t, ref=t, requires_grad=t.node.requires_grad)
    return t.node


def record(op: str, output: Tensor, left: Tensor | None = None, right: Tensor | None = None,
           saved: tuple[Tensor, ...] = (), scalar: float | None = None) -> BackwardNode:
    """Record a forward op, linking operand nodes and pinning saved tensors."""
    lnode = operand_node(left) if left is not None else None
    rnode = operand_node(right) if right is not None else None
    requires = any(n.requires_grad for n in (lnode, rnode) if n is not None)
    node = BackwardNode(op, output, left=lnode, right=rnode, saved=saved,
                        scalar=scalar, requires_grad=requires and op not in ("onehot",))
    for n in (lnode, rnode):
        if n is not None:
            n.consumers += 1
    for s in saved:
        s.refs += 1
    output.node = node
    return node


def push_assignment(tape: Tape, variable_key: str, tensor: Tensor) -> None:
    """Push an assignment's backward tree; the root gains a tape hold."""
    if tape.sealed:
        raise NskRuntimeError("tape is sealed: cannot record during backward")
    node = tensor.node
    if node is None:
        node = BackwardNode("constant", tensor)
        tensor.node = node
    node.pushed = True
    node.consumers += 1
    tensor.refs += 1
    tape.entries.append((variable_key, node))


# --- recorded forward ops -------------------------------------------------------

def make_param(pool: Pool, array, name: str) -> Tensor:
    t = tensor_from_array(pool, array, param_name=name)
    t.node = BackwardNode("param", t, param_name=name, requires_grad=True)
    return t


def make_data(pool: Pool, array) -> Tensor:
    """A no-gradient leaf (loaded data); enters the tape when assigned."""
    t = tensor_from_array(pool, array)
    t.node = BackwardNode("data", t)
    return t


def rec_matmul_t(x: Tensor, w: Tensor, pool: Pool) -> Tensor:
    out = matmul_t(x, w, pool)
    record("matmul_t", out, x, w, saved=(x, w))
    return out


def rec_elementwise(kind: str, a: Tensor, b, pool: Pool) -> Tensor:
    out = elementwise(kind, a, b, pool)
    if kind in ("add", "sub"):
        record(kind, out, a, b)
    elif kind == "hadamard":
        record(kind, out, a, b, saved=(a, b))
    elif kind == "scalar-add":
        record(kind, out, a, scalar=float(b))
    elif kind == "scalar-mul":
        record(kind, out, a, scalar=float(b))
    elif kind == "relu":
        record(kind, out, a, saved=(a,))
    elif kind == "sigmoid":
        record(kind, out, a, saved=(out,))
    elif kind == "tanh":
        record(kind, out, a, saved=(out,))
    elif kind == "neg":
        record(kind, out, a)
    return out


def rec_bias_add(x: Tensor, b: Tensor, pool: Pool) -> Tensor:
    out = bias_add(x, b, pool)
    record("bias-add", out, x, b)
    return out


def rec_onehot(indices: Tensor, classes: int, pool: Pool) -> Tensor:
    out = onehot(indices, classes, pool)
    record("onehot", out, indices)
    return out


def _internal_tensor(pool: Pool, array) -> Tensor:
    # A forward byproduct (e.g. saved softmax probs): held alive only by
    # saved-operand refs, releasable as soon as those drop.
    t = tensor_from_array(pool, array)
    t.node = BackwardNode("constant", t)
    t.node.closed = True
    return t


def rec_sum_loss(x: Tensor, pool: Pool) -> Tensor:
    total = float(x.data.astype(np.float64).sum())
    out = tensor_from_array(pool, [total])
    record("sum-loss", out, x)
    return out


def rec_cross_entropy(logits: Tensor, targets: Tensor, pool: Pool) -> Tensor:
    """Mean negative log-likelihood with max-subtraction stabilization.

    Recorded as a single loss node whose rule emits (softmax - onehot) / m.
    """
    from nsk.errors import NskTypeError

    if logits.rank != 2 or targets.rank != 1:
        raise NskTypeError(
            f"cross_entropy needs [m x c] logits and [m] targets, got "
            f"{list(logits.shape)} and {list(targets.shape)}"
        )
    m, c = logits.shape
    if targets.shape[0] != m:
        raise NskTypeError(f"cross_entropy row mismatch: {m} logits vs {targets.shape[0]} targets")
    tgt = targets.data
    for row in range(m):
        v = tgt[row]
        if v < 0 or v >= c or v != int(v):
            raise NskRuntimeError(f"target {float(v):g} out of range [0, {c}) at row {row}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    idx = tgt.astype(np.int64)
    loss = float(np.mean(logsumexp[:, 0] - z[np.arange(m), idx]))
    probs = _internal_tensor(pool, np.exp(z - logsumexp))
    out = tensor_from_array(pool, [loss])
    record("cross-entropy-loss", out, logits, targets, saved=(probs, targets))
    return out


# --- gradient rules -------------------------------------------------------------

def gradient_rule(op: str, g: np.ndarray, saved: dict) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Pure per-op gradient computation: incoming grad -> (left, right) grads.

    A returned array that *is* ``g`` means the gradient passes through
    unchanged (the caller may share the buffer instead of copying).
    """
    if op == "add":
        return g, g
    if op == "sub":
        return g, -g
    if op == "hadamard":
        return g * saved["b"], g * saved["a"]
    if op == "matmul_t":
        # y = x . w^T  =>  dx = g . w,  dw = g^T . x
        return plain_matmul(g, saved["w"]), plain_matmul(g.T, saved["x"])
    if op == "scalar-add":
        return g, None
    if op == "scalar-mul":
        return (g * np.float32(saved["c"])).astype(np.float32), None
    if op == "neg":
        return -g, None
    if op == "relu":
        return (g * (saved["a"] > 0)).astype(np.float32), None
    if op == "sigmoid":
        s = saved["s"]
        return (g * s * (1.0 - s)).astype(np.float32), None
    if op == "tanh":
        t = saved["t"]
        return (g * (1.0 - t * t)).astype(np.float32), None
    if op == "bias-add":
        return g, g.sum(axis=0)
    if op == "sum-loss":
        return np.full(saved["shape"], float(g.reshape(-1)[0]), dtype=np.float32), None
    if op == "cross-entropy-loss":
        probs, targets = saved["probs"], saved["targets"]
        m = probs.shape[0]
        d = probs.astype(np.float64).copy()
        d[np.arange(m), targets.astype(np.int64)] -= 1.0
        d *= float(g.reshape(-1)[0]) / m
        return d.astype(np.float32), None
    raise NskRuntimeError(f"no gradient rule for op {op!r}")


def _saved_dict(node: BackwardNode) -> dict:
    if node.op == "hadamard":
        return {"a": node.saved[0].data, "b": node.saved[1].data}
    if node.op == "matmul_t":
        return {"x": node.saved[0].data, "w": node.saved[1].data}
    if node.op == "relu":
        return {"a": node.saved[0].data}
    if node.op == "sigmoid":
        return {"s": node.saved[0].data}
    if node.op == "tanh":
        return {"t": node.saved[0].data}
    if node.op in ("scalar-mul", "scalar-add"):
        return {"c": node.scalar}
    if node.op == "sum-loss":
        return {"shape": node.left.tensor.shape}
    if node.op == "cross-entropy-loss":
        return {"probs": node.saved[0].data, "targets": node.saved[1].data}
    return {}


# --- backward traversal ----------------------------------------------------------

def _release_grad(g: Tensor | None, pool: Pool) -> None:
    if g is None:
        return
    g.refs -= 1
    if g.refs <= 0 and g.buffer is not None:
        release_tensor(pool, g)


def _decref(t: Tensor, pool: Pool) -> None:
    t.refs -= 1
    _maybe_release(t, pool)


def _maybe_release(t: Tensor, pool: Pool) -> None:
    if (
        t.refs <= 0
        and t.param_name is None
        and t.buffer is not None
        and t.node is not None
        and t.node.closed
    ):
        release_tensor(pool, t)


def reclaim(node: BackwardNode, pool: Pool) -> None:
    """Release the node's output (and grad slot) if nothing still reads it."""
    t = node.tensor
    if t.grad is not None and node.closed:
        slot = t.grad
        t.grad = None
        _release_grad(slot, pool)
    _maybe_release(t, pool)


def _accumulate_slot(target: Tensor, g: Tensor, pool: Pool) -> None:
    if target.grad is None:
        slot = empty_tensor(pool, g.shape)
        slot.data[:] = g.data
        slot.refs = 1
        target.grad = slot
    else:
        np.add(target.grad.data, g.data, out=target.grad.data)


def _deliver(node: BackwardNode, g: Tensor | None, cache: GradCache | None, pool: Pool) -> None:
    """Hand one consumer's gradient (or a no-grad visit) to a node.

    Ownership of one reference on ``g`` transfers to this call. The node
    fires once all recorded consumers have delivered. The accumulator must
    never alias a gradient other holders can still see, so a shared ``g``
    is copied rather than adopted.
    """
    node.seen += 1
    if g is not None:
        if not node.requires_grad:
            _release_grad(g, pool)
        elif node.grad_in is None:
            if g.refs == 1:
                node.grad_in = g
            else:
                acc = empty_tensor(pool, g.shape)
                acc.data[:] = g.data
                acc.refs = 1
                node.grad_in = acc
                _release_grad(g, pool)
        else:
            np.add(node.grad_in.data, g.data, out=node.grad_in.data)
            _release_grad(g, pool)
    if node.seen < node.consumers:
        return
    total = node.grad_in
    node.grad_in = None
    _fire(node, total, cache, pool)


def _fire(node: BackwardNode, g: Tensor | None, cache: GradCache | None, pool: Pool) -> None:
    if node.op == "param":
        if g is not None and cache is not None:
            cache.accumulate(node.param_name, g)
        _release_grad(g, pool)
        node.closed = True
        return  # parameters are never reclaimed
    if node.op == "var-ref":
        if g is not None:
            _accumulate_slot(node.ref, g, pool)
        _release_grad(g, pool)
        node.closed = True
        return  # the referenced tensor is reclaimed by its own entry
    if node.op in ("data", "constant"):
        _release_grad(g, pool)
        node.closed = True
        _maybe_release(node.tensor, pool)
        return

    # interior op (including losses and onehot)
    gl_t = gr_t = None
    if g is not None and node.requires_grad:
        garr = g.data
        gl, gr = gradient_rule(node.op, garr, _saved_dict(node))
        if node.left is not None and not node.left.requires_grad:
            gl = None
        if node.right is not None and not node.right.requires_grad:
            gr = None
        if gl is not None:
            if gl is garr:
                g.refs += 1
                gl_t = g
            else:
                gl_t = tensor_from_array(pool, gl)
                gl_t.refs = 1
        if gr is not None:
            if gr is garr:
                g.refs += 1
                gr_t = g
            else:
                gr_t = tensor_from_array(pool, gr)
                gr_t.refs = 1
    for s in node.saved:
        _decref(s, pool)
    node.closed = True
    if node.left is not None:
        _deliver(node.left, gl_t, cache, pool)
    if node.right is not None:
        _deliver(node.right, gr_t, cache, pool)
    _release_grad(g, pool)
    _maybe_release(node.tensor, pool)


def backward(tape: Tape, cache: GradCache, pool: Pool) -> None:
    """Pop the whole stack, propagating gradients and reclaiming buffers.

    The top entry must be a loss node; its gradient is seeded with 1.0 (any
    reduction factor lives inside the loss's own gradient rule).
    """
    if not tape.entries:
        raise NskRuntimeError("backward() on an empty tape")
    _key, top = tape.entries[-1]
    if top.op not in LOSS_OPS:
        raise NskRuntimeError("backward requires a loss as the final operation")
    tape.sealed = True
    try:
        first = True
        while tape.entries:
            _key, node = tape.entries.pop()
            if first:
                stale = node.tensor.grad
                node.tensor.grad = None
                _release_grad(stale, pool)
                g = tensor_from_array(pool, [1.0])
                g.refs = 1
                first = False
            else:
                g = node.tensor.grad
                node.tensor.grad = None
            _deliver(node, g, cache, pool)
            _decref(node.tensor, pool)  # drop the tape hold
    finally:
        tape.sealed = False
