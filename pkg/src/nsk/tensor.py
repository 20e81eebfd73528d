"""CPU tensor engine over pooled flat float32 buffers.

The pool is a dictionary from element count to a LIFO list of free buffers:
acquiring a size the pool has seen returns the most recently released buffer
instead of allocating, so a training loop with fixed shapes performs fresh
allocations only on its first iteration. Released buffers keep their stale
contents; correctness relies on every op fully overwriting its output
buffer before anything reads it (enforceable in tests by poisoning).

The gradient cache is the persistent side of memory management: one buffer
per trainable parameter, accumulated into during the backward pass and
overwritten with zeros after the optimizer step, never returned to the pool.
"""

from __future__ import annotations

import mmap
import threading

import numpy as np

from nsk.errors import NskRuntimeError, NskTypeError

ELEMENTWISE_KINDS = frozenset(
    {"add", "sub", "hadamard", "scalar-add", "scalar-mul", "relu", "sigmoid", "tanh", "neg"}
)


class Buffer:
    """A flat float32 array of fixed capacity.

    Storage is an anonymous OS mapping rather than a malloc'd block: a fresh
    allocation really does map (and fault in) pages, and dropping a buffer
    really returns them, so pooling measures the same allocation churn the
    engine is designed to avoid. Small buffers round up to one page.
    """

    __slots__ = ("capacity", "storage", "origin", "in_pool", "_map")

    def __init__(self, capacity: int):
        try:
            self._map = mmap.mmap(-1, max(capacity, 1) * 4)
        except (OSError, ValueError, OverflowError, MemoryError):
            raise NskRuntimeError(f"out of memory: requested {capacity} elements") from None
        self.storage = np.frombuffer(self._map, dtype=np.float32, count=capacity)
        self.capacity = capacity
        self.origin = "fresh"
        self.in_pool = False

    def __repr__(self):
        return f"Buffer(capacity={self.capacity}, origin={self.origin})"


class Pool:
    """Size-keyed free lists of reusable buffers.

    Exact-size keying, LIFO reuse, unbounded growth, no zeroing on release.
    With ``enabled=False`` every acquire allocates fresh and every release
    drops the buffer (the no-pooling baseline for benchmarks); with
    ``poison=True`` released buffers are filled with NaN so reads of
    uninitialized pooled memory become detectable.
    """

    def __init__(self, enabled: bool = True, poison: bool = False):
        self.enabled = enabled
        self.poison = poison
        self.free_lists: dict[int, list[Buffer]] = {}
        self.fresh_allocations = 0
        self.pool_hits = 0
        self.releases = 0
        self._lock = threading.Lock()

    def acquire(self, numel: int) -> Buffer:
        if numel < 1:
            raise NskRuntimeError(f"cannot allocate a buffer of {numel} elements")
        if self.enabled:
            with self._lock:
                free = self.free_lists.get(numel)
                if free:
                    buf = free.pop()
                    buf.in_pool = False
                    buf.origin = "pooled"
                    self.pool_hits += 1
                    return buf
                self.fresh_allocations += 1
        else:
            with self._lock:
                self.fresh_allocations += 1
        return Buffer(numel)

    def release(self, buffer: Buffer) -> None:
        with self._lock:
            if buffer.in_pool:
                raise NskRuntimeError("double release of a pooled buffer")
            self.releases += 1
            if not self.enabled:
                return
            if self.poison:
                buffer.storage.fill(np.nan)
            buffer.in_pool = True
            self.free_lists.setdefault(buffer.capacity, []).append(buffer)

    def free_total(self) -> int:
        with self._lock:
            return sum(len(v) for v in self.free_lists.values())

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {
                "fresh": self.fresh_allocations,
                "hits": self.pool_hits,
                "released": self.releases,
            }


class Tensor:
    """A shape-tagged view over a pooled buffer.

    ``param_name`` is set only for trainable parameters; those are never
    reclaimed. ``node``/``grad``/``refs`` belong to the autodiff layer:
    ``refs`` counts pending readers of the buffer (saved operands, tape
    holds) so the backward pass knows when the buffer can go back to the
    pool.
    """

    __slots__ = ("shape", "buffer", "param_name", "node", "grad", "refs", "_scalar")

    def __init__(self, shape: tuple[int, ...], buffer: Buffer, param_name: str | None = None):
        numel = 1
        for d in shape:
            if d < 1:
                raise NskRuntimeError(f"invalid tensor dimension {d}")
            numel *= d
        if numel != buffer.capacity:
            raise NskRuntimeError(
                f"shape {shape} needs {numel} elements, buffer holds {buffer.capacity}"
            )
        self.shape = shape
        self.buffer: Buffer | None = buffer
        self.param_name = param_name
        self.node = None
        self.grad: Tensor | None = None
        self.refs = 0
        self._scalar: float | None = None

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def data(self) -> np.ndarray:
        if self.buffer is None:
            raise NskRuntimeError("tensor buffer was reclaimed by backward()")
        return self.buffer.storage.reshape(self.shape)

    def item(self) -> float:
        if self.buffer is None:
            if self._scalar is not None:
                return self._scalar
            raise NskRuntimeError("tensor buffer was reclaimed by backward()")
        if self.numel != 1:
            raise NskRuntimeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.buffer.storage[0])

    def __repr__(self):
        if self.buffer is None:
            body = f"<reclaimed{'' if self._scalar is None else f' value={self._scalar:g}'}>"
        else:
            body = np.array2string(self.data, precision=4, suppress_small=True)
        name = f", param={self.param_name}" if self.param_name else ""
        return f"Tensor(shape={list(self.shape)}{name}) {body}"


def tensor_from_array(pool: Pool, array, param_name: str | None = None) -> Tensor:
    """Copy array data into a pool-acquired buffer."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 2:
        raise NskRuntimeError(f"rank {arr.ndim} tensors are not supported")
    buf = pool.acquire(arr.size)
    buf.storage[:] = arr.reshape(-1)
    return Tensor(tuple(arr.shape), buf, param_name=param_name)


def empty_tensor(pool: Pool, shape: tuple[int, ...]) -> Tensor:
    numel = 1
    for d in shape:
        numel *= d
    return Tensor(shape, pool.acquire(numel))


def release_tensor(pool: Pool, t: Tensor) -> None:
    """Return a tensor's buffer to the pool (snapshotting 1-element values)."""
    if t.buffer is None:
        return
    if t.numel == 1:
        t._scalar = float(t.buffer.storage[0])
    buf = t.buffer
    t.buffer = None
    pool.release(buf)


# --- kernels -----------------------------------------------------------------

def matmul_t(x: Tensor, w: Tensor, pool: Pool) -> Tensor:
    """Transposing matrix multiply: y[i, j] = sum_c x[i, c] * w[j, c].

    Partial sums run in float64 and are cast to float32 on store.
    """
    if x.rank != 2 or w.rank != 2:
        raise NskTypeError(f"@ needs two matrices, got shapes {list(x.shape)} and {list(w.shape)}")
    m, k = x.shape
    n, k2 = w.shape
    if k != k2:
        raise NskTypeError(
            f"@ shape mismatch: {m}x{k} @ {n}x{k2} (columns must agree; the right operand is transposed)"
        )
    out = empty_tensor(pool, (m, n))
    acc = x.data.astype(np.float64) @ w.data.astype(np.float64).T
    out.data[:] = acc
    return out


def plain_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Gradient rules need the untransposed product; float64 accumulate as above.
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def elementwise(kind: str, a: Tensor, b, pool: Pool) -> Tensor:
    """Elementwise op into a pooled output buffer.

    Binary kinds need identical shapes; `scalar-*` kinds take a float for
    ``b``; unary kinds ignore ``b``.
    """
    if kind not in ELEMENTWISE_KINDS:
        raise NskRuntimeError(f"unknown elementwise op {kind!r}")
    out = empty_tensor(pool, a.shape)
    ad = a.data
    if kind in ("add", "sub", "hadamard"):
        if not isinstance(b, Tensor):
            raise NskTypeError(f"{kind} needs two tensors")
        if a.shape != b.shape:
            raise NskTypeError(
                f"{kind} shape mismatch: {list(a.shape)} vs {list(b.shape)}"
            )
        bd = b.data
        if kind == "add":
            np.add(ad, bd, out=out.data)
        elif kind == "sub":
            np.subtract(ad, bd, out=out.data)
        else:
            np.multiply(ad, bd, out=out.data)
    elif kind == "scalar-add":
        np.add(ad, np.float32(b), out=out.data)
    elif kind == "scalar-mul":
        np.multiply(ad, np.float32(b), out=out.data)
    elif kind == "relu":
        np.maximum(ad, np.float32(0.0), out=out.data)
    elif kind == "sigmoid":
        out.data[:] = _stable_sigmoid(ad)
    elif kind == "tanh":
        np.tanh(ad, out=out.data)
    elif kind == "neg":
        np.negative(ad, out=out.data)
    return out


def bias_add(x: Tensor, b: Tensor, pool: Pool) -> Tensor:
    """Add a rank-1 bias across every row of a matrix."""
    if x.rank != 2 or b.rank != 1:
        raise NskTypeError(
            f"bias add needs a matrix and a vector, got shapes {list(x.shape)} and {list(b.shape)}"
        )
    if x.shape[1] != b.shape[0]:
        raise NskTypeError(f"bias length {b.shape[0]} does not match {x.shape[1]} columns")
    out = empty_tensor(pool, x.shape)
    np.add(x.data, b.data[None, :], out=out.data)
    return out


def onehot(indices: Tensor, classes: int, pool: Pool) -> Tensor:
    """Encode integer-valued entries of a rank-1 tensor as one-hot rows."""
    if indices.rank != 1:
        raise NskTypeError(f"onehot needs a rank-1 tensor, got shape {list(indices.shape)}")
    classes = int(classes)
    if classes < 1:
        raise NskRuntimeError(f"onehot needs at least 1 class, got {classes}")
    m = indices.shape[0]
    idx = indices.data
    for row in range(m):
        v = idx[row]
        if v < 0 or v >= classes or v != int(v):
            raise NskRuntimeError(
                f"onehot index {float(v):g} out of range [0, {classes}) at row {row}"
            )
    out = empty_tensor(pool, (m, classes))
    out.data[:] = 0.0
    out.data[np.arange(m), idx.astype(np.int64)] = 1.0
    return out


# --- gradient cache -----------------------------------------------------------

class GradCache:
    """Persistent per-parameter gradient buffers.

    Accumulated every time a parameter is seen during the backward pass and
    overwritten with zeros after the optimizer finishes its step. Cached
    buffers live for the life of the cache and are allocated directly: they
    belong to the caching mechanism, never to the pool's free lists.
    """

    def __init__(self):
        self.grads: dict[str, Buffer] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.dirty: set[str] = set()
        self._lock = threading.Lock()

    def accumulate(self, param_name: str, grad: Tensor) -> None:
        with self._lock:
            buf = self.grads.get(param_name)
            if buf is None:
                buf = Buffer(grad.numel)
                buf.storage[:] = 0.0
                self.grads[param_name] = buf
                self.shapes[param_name] = grad.shape
            elif self.shapes[param_name] != grad.shape:
                raise NskRuntimeError(
                    f"gradient shape {list(grad.shape)} does not match cached "
                    f"{list(self.shapes[param_name])} for parameter {param_name!r}"
                )
            buf.storage += grad.data.reshape(-1)
            self.dirty.add(param_name)

    def get(self, param_name: str) -> np.ndarray | None:
        with self._lock:
            buf = self.grads.get(param_name)
            if buf is None:
                return None
            return buf.storage.reshape(self.shapes[param_name])

    def zero_after_step(self) -> None:
        with self._lock:
            for buf in self.grads.values():
                buf.storage.fill(0.0)
            self.dirty.clear()

    def __len__(self):
        return len(self.grads)
