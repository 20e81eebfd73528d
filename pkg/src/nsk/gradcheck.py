"""Finite-difference verification of the engine's gradients.

The oracle side is an independent float64 numpy forward for each op (it
never touches the tape); central differences with eps 1e-3 are computed in
64-bit and compared against the engine's analytic gradients at 1e-2
relative / 1e-4 absolute tolerance.
"""

from __future__ import annotations

import numpy as np

from nsk import autodiff
from nsk.autodiff import Tape, backward, push_assignment
from nsk.tensor import GradCache, Pool

EPS = 1e-3
REL_TOL = 1e-2
ABS_TOL = 1e-4


def _sigmoid64(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class _Step:
    """One composition step: engine apply + independent float64 apply."""

    def __init__(self, kind: str, param: np.ndarray | None = None, scalar: float | None = None):
        self.kind = kind
        self.param = param
        self.scalar = scalar

    def engine(self, t, p, pool):
        k = self.kind
        if k in ("relu", "sigmoid", "tanh", "neg"):
            return autodiff.rec_elementwise(k, t, None, pool)
        if k in ("scalar-mul", "scalar-add"):
            return autodiff.rec_elementwise(k, t, self.scalar, pool)
        if k == "matmul":
            return autodiff.rec_matmul_t(t, p, pool)
        if k == "add-param":
            return autodiff.rec_elementwise("add", t, p, pool)
        if k == "sub-param":
            return autodiff.rec_elementwise("sub", t, p, pool)
        if k == "hadamard-param":
            return autodiff.rec_elementwise("hadamard", t, p, pool)
        if k == "bias-add":
            return autodiff.rec_bias_add(t, p, pool)
        raise ValueError(k)

    def oracle(self, a, p):
        k = self.kind
        if k == "relu":
            return np.maximum(a, 0.0)
        if k == "sigmoid":
            return _sigmoid64(a)
        if k == "tanh":
            return np.tanh(a)
        if k == "neg":
            return -a
        if k == "scalar-mul":
            return a * self.scalar
        if k == "scalar-add":
            return a + self.scalar
        if k == "matmul":
            return a @ p.T
        if k == "add-param":
            return a + p
        if k == "sub-param":
            return a - p
        if k == "hadamard-param":
            return a * p
        if k == "bias-add":
            return a + p[None, :]
        raise ValueError(k)

    def out_shape(self, shape):
        if self.kind == "matmul":
            return (shape[0], self.param.shape[0])
        return shape


def _check_chain(x0: np.ndarray, steps: list[_Step]) -> tuple[bool, float]:
    """Run x through the steps, sum-reduce, compare engine grads against FD."""
    pool = Pool()
    cache = GradCache()
    tape = Tape()

    inputs = {"x": x0.astype(np.float64)}
    params = []
    for i, step in enumerate(steps):
        if step.param is not None:
            inputs[f"p{i}"] = step.param.astype(np.float64)
            params.append((i, f"p{i}"))

    t = autodiff.make_param(pool, x0, "x")
    param_tensors = {
        name: autodiff.make_param(pool, steps[i].param, name) for i, name in params
    }
    for i, step in enumerate(steps):
        t = step.engine(t, param_tensors.get(f"p{i}"), pool)
    loss = autodiff.rec_sum_loss(t, pool)
    push_assignment(tape, "check.y", t)
    push_assignment(tape, "check.loss", loss)
    backward(tape, cache, pool)

    def oracle_loss(vals: dict) -> float:
        a = vals["x"]
        for i, step in enumerate(steps):
            a = step.oracle(a, vals.get(f"p{i}"))
        return float(a.sum())

    ok = True
    max_err = 0.0
    for name, base in inputs.items():
        analytic = cache.get(name)
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + EPS
            hi = oracle_loss(inputs)
            flat[j] = orig - EPS
            lo = oracle_loss(inputs)
            flat[j] = orig
            fd_flat[j] = (hi - lo) / (2 * EPS)
        err = np.abs(analytic.astype(np.float64) - fd)
        bound = ABS_TOL + REL_TOL * np.abs(fd)
        max_err = max(max_err, float((err - bound).max()))
        ok = ok and bool((err <= bound).all())
    return ok, max_err


def _check_cross_entropy(rng: np.random.Generator) -> tuple[bool, float]:
    pool = Pool()
    cache = GradCache()
    tape = Tape()
    m, c = 4, 5
    logits0 = rng.uniform(-2, 2, size=(m, c)).astype(np.float32)
    targets0 = rng.integers(0, c, size=m).astype(np.float32)

    logits = autodiff.make_param(pool, logits0, "logits")
    targets = autodiff.make_data(pool, targets0)
    push_assignment(tape, "check.t", targets)
    loss = autodiff.rec_cross_entropy(logits, targets, pool)
    push_assignment(tape, "check.loss", loss)
    backward(tape, cache, pool)
    analytic = cache.get("logits").astype(np.float64)

    base = logits0.astype(np.float64)
    idx = targets0.astype(np.int64)

    def oracle_loss(z):
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(np.mean(lse[:, 0] - z[np.arange(m), idx]))

    fd = np.zeros_like(base)
    flat, fd_flat = base.reshape(-1), fd.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + EPS
        hi = oracle_loss(base)
        flat[j] = orig - EPS
        lo = oracle_loss(base)
        flat[j] = orig
        fd_flat[j] = (hi - lo) / (2 * EPS)
    err = np.abs(analytic - fd)
    bound = ABS_TOL + REL_TOL * np.abs(fd)
    return bool((err <= bound).all()), float((err - bound).max())


def check_builtin_ops(seed: int = 0) -> list[tuple[str, bool, float]]:
    """One FD check per differentiable builtin op."""
    rng = np.random.default_rng(seed)
    results = []
    single = {
        "relu": _Step("relu"),
        "sigmoid": _Step("sigmoid"),
        "tanh": _Step("tanh"),
        "neg": _Step("neg"),
        "scalar-mul": _Step("scalar-mul", scalar=float(rng.uniform(0.5, 2.0))),
        "scalar-add": _Step("scalar-add", scalar=float(rng.uniform(-1.0, 1.0))),
        "add": _Step("add-param", param=rng.uniform(-1, 1, size=(3, 4)).astype(np.float32)),
        "sub": _Step("sub-param", param=rng.uniform(-1, 1, size=(3, 4)).astype(np.float32)),
        "hadamard": _Step("hadamard-param", param=rng.uniform(-1, 1, size=(3, 4)).astype(np.float32)),
        "matmul_t": _Step("matmul", param=rng.uniform(-1, 1, size=(5, 4)).astype(np.float32)),
        "bias-add": _Step("bias-add", param=rng.uniform(-1, 1, size=4).astype(np.float32)),
    }
    for name, step in single.items():
        x0 = rng.uniform(-1, 1, size=(3, 4)).astype(np.float32)
        if name == "relu":
            # keep entries away from the kink where FD is ill-defined
            x0[np.abs(x0) < 0.05] = 0.5
        ok, err = _check_chain(x0, [step])
        results.append((name, ok, err))
    ok, err = _check_cross_entropy(rng)
    results.append(("cross-entropy", ok, err))
    x0 = rng.uniform(-1, 1, size=(3, 4)).astype(np.float32)
    ok, err = _check_chain(x0, [])
    results.append(("sum-loss", ok, err))
    return results


def random_composition(rng: np.random.Generator, length: int = 3) -> tuple[np.ndarray, list[_Step]]:
    """A random chain of differentiable ops with compatible shapes."""
    m = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    x0 = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
    x0[np.abs(x0) < 0.05] = 0.5
    steps: list[_Step] = []
    shape = (m, k)
    kinds = ["sigmoid", "tanh", "scalar-mul", "scalar-add", "matmul",
             "add-param", "sub-param", "hadamard-param", "bias-add"]
    for _ in range(length):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if kind == "matmul":
            n = int(rng.integers(2, 5))
            step = _Step(kind, param=rng.uniform(-1, 1, size=(n, shape[1])).astype(np.float32))
        elif kind in ("add-param", "sub-param", "hadamard-param"):
            step = _Step(kind, param=rng.uniform(-1, 1, size=shape).astype(np.float32))
        elif kind == "bias-add":
            step = _Step(kind, param=rng.uniform(-1, 1, size=shape[1]).astype(np.float32))
        elif kind == "scalar-mul":
            step = _Step(kind, scalar=float(rng.uniform(0.5, 2.0)))
        else:
            step = _Step(kind, scalar=float(rng.uniform(-1.0, 1.0)))
        steps.append(step)
        shape = step.out_shape(shape)
    return x0, steps


def check_compositions(count: int = 50, seed: int = 0) -> list[tuple[str, bool, float]]:
    rng = np.random.default_rng(seed)
    results = []
    for i in range(count):
        x0, steps = random_composition(rng)
        ok, err = _check_chain(x0, steps)
        label = "->".join(s.kind for s in steps)
        results.append((f"composition {i}: {label}", ok, err))
    return results


def run_check_grads(stream, seed: int = 0) -> bool:
    """Print one PASS/FAIL line per stdlib op; True if everything passed."""
    all_ok = True
    for name, ok, _err in check_builtin_ops(seed):
        stream.write(f"gradcheck {name}: {'PASS' if ok else 'FAIL'}\n")
        all_ok = all_ok and ok
    return all_ok
