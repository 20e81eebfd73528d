"""Training stdlib: init, linear layer, losses, optimizers, gradient clipping.

Optimizers read accumulated gradients from the GradCache and update
parameter tensors in place; the caller zeroes the cache after the step.
Optimizer state lives in plain float32 arrays owned by the ParamGroup (it
persists across iterations, so it never touches the pool).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from nsk.autodiff import rec_bias_add, rec_cross_entropy, rec_matmul_t, rec_sum_loss
from nsk.errors import NskRuntimeError
from nsk.tensor import GradCache, Pool, Tensor
from nsk import autodiff


@dataclass
class Hyperparams:
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise NskRuntimeError(f"learning rate must be positive, got {self.learning_rate}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise NskRuntimeError(f"clip norm must be positive, got {self.clip_norm}")


class ParamGroup:
    """Named trainable tensors plus their per-parameter optimizer state."""

    def __init__(self):
        self.params: list[tuple[str, Tensor]] = []
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor) -> None:
        self.params.append((name, tensor))

    def __len__(self):
        return len(self.params)

    def _state_for(self, name: str, tensor: Tensor, keys: tuple[str, ...]) -> dict[str, np.ndarray]:
        st = self.state.get(name)
        if st is None:
            st = {k: np.zeros(tensor.numel, dtype=np.float32) for k in keys}
            self.state[name] = st
        return st


def xavier_uniform_init(rows: int, cols: int, seed: int, pool: Pool, name: str | None = None) -> Tensor:
    """Uniform(-a, a) with a = sqrt(6 / (rows + cols)); fixed seed, fixed tensor."""
    if rows < 1 or cols < 1:
        raise NskRuntimeError(f"invalid weight shape {rows}x{cols}")
    a = math.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    values = rng.uniform(-a, a, size=(rows, cols)).astype(np.float32)
    if name is not None:
        return autodiff.make_param(pool, values, name)
    from nsk.tensor import tensor_from_array

    return tensor_from_array(pool, values)


def linear(x: Tensor, w: Tensor, b: Tensor, pool: Pool) -> Tensor:
    """y = x @ w + b broadcast over rows, fully tape-recorded."""
    return rec_bias_add(rec_matmul_t(x, w, pool), b, pool)


# Loss ops live with the tape recording; re-exported as the nn surface.
cross_entropy = rec_cross_entropy
sum_loss = rec_sum_loss


def _grad_for(cache: GradCache, name: str) -> np.ndarray:
    g = cache.get(name)
    if g is None:
        raise NskRuntimeError(f"missing gradient for parameter {name!r}")
    return g


def sgd_step(group: ParamGroup, cache: GradCache, lr: float, momentum: float = 0.0) -> None:
    """v <- momentum*v + g; w <- w - lr*v. Caller zeroes the cache afterwards."""
    group.step_count += 1
    for name, tensor in group.params:
        g = _grad_for(cache, name).reshape(-1).astype(np.float64)
        st = group._state_for(name, tensor, ("velocity",))
        v = momentum * st["velocity"].astype(np.float64) + g
        st["velocity"][:] = v
        tensor.buffer.storage[:] = tensor.buffer.storage.astype(np.float64) - lr * v


def adamw_step(group: ParamGroup, cache: GradCache, hp: Hyperparams) -> None:
    """Decoupled weight decay, then the bias-corrected Adam update."""
    group.step_count += 1
    t = group.step_count
    lr, wd = hp.learning_rate, hp.weight_decay
    b1, b2, eps = hp.beta1, hp.beta2, hp.epsilon
    for name, tensor in group.params:
        g = _grad_for(cache, name).reshape(-1).astype(np.float64)
        st = group._state_for(name, tensor, ("m", "v"))
        w = tensor.buffer.storage.astype(np.float64)
        w *= 1.0 - lr * wd
        m = b1 * st["m"].astype(np.float64) + (1.0 - b1) * g
        v = b2 * st["v"].astype(np.float64) + (1.0 - b2) * g * g
        st["m"][:] = m
        st["v"][:] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        tensor.buffer.storage[:] = w - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(cache: GradCache, max_norm: float) -> float:
    """Scale all cached gradients so their global L2 norm is at most max_norm.

    Returns the applied scale factor (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise NskRuntimeError(f"clip norm must be positive, got {max_norm}")
    total = 0.0
    with cache._lock:
        for buf in cache.grads.values():
            total += float(np.sum(buf.storage.astype(np.float64) ** 2))
        norm = math.sqrt(total)
        if norm <= max_norm:
            return 1.0
        scale = max_norm / norm
        for buf in cache.grads.values():
            buf.storage *= np.float32(scale)
    return scale
