import math

import numpy as np
import pytest

from nsk import autodiff as ad
from nsk import nn
from nsk.errors import NskRuntimeError
from nsk.tensor import GradCache, Pool, tensor_from_array


def fresh():
    pool = Pool()
    return pool, GradCache(), ad.Tape()


# --- independent float64 oracles ---------------------------------------------------

def oracle_cross_entropy(logits, targets):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    m = z.shape[0]
    idx = targets.astype(np.int64)
    loss = float(np.mean(lse[:, 0] - z[np.arange(m), idx]))
    probs = np.exp(z - lse)
    grad = probs.copy()
    grad[np.arange(m), idx] -= 1.0
    return loss, grad / m


class OracleAdamW:
    """Reference decoupled-weight-decay Adam, all in float64."""

    def __init__(self, w, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
        self.w = w.astype(np.float64).copy()
        self.m = np.zeros_like(self.w)
        self.v = np.zeros_like(self.w)
        self.t = 0
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, wd, b1, b2, eps

    def step(self, g):
        g = g.astype(np.float64)
        self.t += 1
        self.w *= 1.0 - self.lr * self.wd
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        self.w -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.w


# --- xavier init --------------------------------------------------------------------

def test_xavier_bound_is_one_for_3x3():
    pool = Pool()
    t = nn.xavier_uniform_init(3, 3, seed=1, pool=pool)
    assert (np.abs(t.data) <= 1.0).all()  # a = sqrt(6/6) = 1 exactly


def test_xavier_deterministic_under_seed():
    pool = Pool()
    a = nn.xavier_uniform_init(4, 5, seed=7, pool=pool)
    b = nn.xavier_uniform_init(4, 5, seed=7, pool=pool)
    np.testing.assert_array_equal(a.data, b.data)


def test_xavier_statistics():
    pool = Pool()
    t = nn.xavier_uniform_init(100, 100, seed=3, pool=pool)
    a = math.sqrt(6.0 / 200)
    values = t.data.reshape(-1)
    assert abs(values.mean()) < 0.02
    assert np.abs(values).max() <= a


def test_xavier_named_registers_parameter_leaf():
    pool = Pool()
    t = nn.xavier_uniform_init(2, 2, seed=0, pool=pool, name="w")
    assert t.param_name == "w" and t.node.op == "param"


# --- linear ------------------------------------------------------------------------

def test_linear_small_case():
    pool, _, _ = fresh()
    x = tensor_from_array(pool, [[1.0, 2.0]])
    w = tensor_from_array(pool, [[3.0, 4.0]])
    b = tensor_from_array(pool, [1.0])
    y = nn.linear(x, w, b, pool)
    assert y.data[0, 0] == pytest.approx(12.0)


def test_linear_zero_bias_equals_matmul():
    pool, _, _ = fresh()
    rng = np.random.default_rng(2)
    x = tensor_from_array(pool, rng.uniform(-1, 1, (4, 3)))
    w = tensor_from_array(pool, rng.uniform(-1, 1, (5, 3)))
    b = tensor_from_array(pool, np.zeros(5))
    from nsk.tensor import matmul_t

    np.testing.assert_allclose(nn.linear(x, w, b, pool).data, matmul_t(x, w, pool).data)


def test_linear_bias_gradient_is_column_sum():
    # under a sum loss every bias component's gradient equals the row count
    pool, cache, tape = fresh()
    rng = np.random.default_rng(4)
    x = ad.make_data(pool, rng.uniform(-1, 1, (4, 3)).astype(np.float32))
    ad.push_assignment(tape, "s.x", x)
    w = ad.make_param(pool, rng.uniform(-1, 1, (5, 3)).astype(np.float32), "w")
    b = ad.make_param(pool, rng.uniform(-1, 1, 5).astype(np.float32), "b")
    y = nn.linear(x, w, b, pool)
    ad.push_assignment(tape, "s.y", y)
    loss = nn.sum_loss(y, pool)
    ad.push_assignment(tape, "s.l", loss)
    ad.backward(tape, cache, pool)
    np.testing.assert_allclose(cache.get("b"), np.full(5, 4.0), rtol=1e-6)


def test_linear_bias_gradient_matches_fd():
    from nsk import gradcheck

    rng = np.random.default_rng(8)
    x0 = rng.uniform(-1, 1, (4, 3)).astype(np.float32)
    steps = [
        gradcheck._Step("matmul", param=rng.uniform(-1, 1, (5, 3)).astype(np.float32)),
        gradcheck._Step("bias-add", param=rng.uniform(-1, 1, 5).astype(np.float32)),
    ]
    ok, err = gradcheck._check_chain(x0, steps)
    assert ok, f"worst excess {err:.2e}"


# --- cross entropy -------------------------------------------------------------------

def test_cross_entropy_uniform_two_class():
    pool, _, _ = fresh()
    logits = tensor_from_array(pool, [[0.0, 0.0]])
    targets = tensor_from_array(pool, [0.0])
    loss = nn.cross_entropy(logits, targets, pool)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_is_stable_at_extremes():
    pool, _, _ = fresh()
    logits = tensor_from_array(pool, [[1000.0, -1000.0]])
    targets = tensor_from_array(pool, [0.0])
    loss = nn.cross_entropy(logits, targets, pool)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)
    assert math.isfinite(loss.item())


def test_cross_entropy_matches_float64_oracle():
    rng = np.random.default_rng(21)
    logits0 = rng.uniform(-3, 3, (8, 5)).astype(np.float32)
    targets0 = rng.integers(0, 5, 8).astype(np.float32)
    expected_loss, expected_grad = oracle_cross_entropy(logits0, targets0)

    pool, cache, tape = fresh()
    logits = ad.make_param(pool, logits0, "logits")
    targets = ad.make_data(pool, targets0)
    ad.push_assignment(tape, "s.t", targets)
    loss = nn.cross_entropy(logits, targets, pool)
    ad.push_assignment(tape, "s.l", loss)
    got_loss = loss.item()
    ad.backward(tape, cache, pool)
    assert got_loss == pytest.approx(expected_loss, rel=1e-4)
    np.testing.assert_allclose(cache.get("logits"), expected_grad, rtol=1e-4, atol=1e-7)


def test_cross_entropy_gradient_rows_sum_to_zero():
    rng = np.random.default_rng(22)
    pool, cache, tape = fresh()
    logits = ad.make_param(pool, rng.uniform(-2, 2, (6, 4)).astype(np.float32), "logits")
    targets = ad.make_data(pool, rng.integers(0, 4, 6).astype(np.float32))
    ad.push_assignment(tape, "s.t", targets)
    loss = nn.cross_entropy(logits, targets, pool)
    ad.push_assignment(tape, "s.l", loss)
    ad.backward(tape, cache, pool)
    rows = cache.get("logits").sum(axis=1)
    np.testing.assert_allclose(rows, np.zeros(6), atol=1e-6)


def test_cross_entropy_target_out_of_range():
    pool, _, _ = fresh()
    logits = tensor_from_array(pool, [[0.0, 0.0]])
    targets = tensor_from_array(pool, [2.0])
    with pytest.raises(NskRuntimeError):
        nn.cross_entropy(logits, targets, pool)


# --- optimizers ----------------------------------------------------------------------

def group_with(pool, cache, value, grad):
    group = nn.ParamGroup()
    w = ad.make_param(pool, value, "w")
    group.add("w", w)
    cache.accumulate("w", tensor_from_array(pool, grad))
    return group, w


def test_sgd_single_step():
    pool, cache, _ = fresh()
    group, w = group_with(pool, cache, [1.0], [1.0])
    nn.sgd_step(group, cache, lr=0.1, momentum=0.0)
    assert w.data[0] == pytest.approx(0.9)


def test_sgd_momentum_recursion():
    pool, cache, _ = fresh()
    group, w = group_with(pool, cache, [1.0], [1.0])
    nn.sgd_step(group, cache, lr=0.1, momentum=0.9)
    assert w.data[0] == pytest.approx(0.9)  # v1 = 1
    cache.zero_after_step()
    cache.accumulate("w", tensor_from_array(pool, [1.0]))
    nn.sgd_step(group, cache, lr=0.1, momentum=0.9)
    assert w.data[0] == pytest.approx(0.71)  # v2 = 1.9


def test_sgd_zero_lr_keeps_weights():
    pool, cache, _ = fresh()
    group, w = group_with(pool, cache, [1.0, 2.0], [5.0, -5.0])
    nn.sgd_step(group, cache, lr=0.0, momentum=0.5)
    np.testing.assert_allclose(w.data, [1.0, 2.0])


def test_sgd_missing_gradient_names_parameter():
    pool, cache, _ = fresh()
    group = nn.ParamGroup()
    group.add("lonely", ad.make_param(pool, [1.0], "lonely"))
    with pytest.raises(NskRuntimeError) as err:
        nn.sgd_step(group, cache, lr=0.1)
    assert "lonely" in str(err.value)


def test_adamw_first_step_closed_form():
    pool, cache, _ = fresh()
    group, w = group_with(pool, cache, [1.0], [1.0])
    nn.adamw_step(group, cache, nn.Hyperparams(learning_rate=0.001, weight_decay=0.0))
    assert w.data[0] == pytest.approx(1.0 - 0.001, rel=1e-5)


def test_adamw_decay_only_path():
    pool, cache, _ = fresh()
    group, w = group_with(pool, cache, [2.0], [0.0])
    hp = nn.Hyperparams(learning_rate=0.001, weight_decay=0.0001)
    nn.adamw_step(group, cache, hp)
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.001 * 0.0001), rel=1e-7)


def test_adamw_matches_float64_reference_over_10_steps():
    # quadratic bowl f(w) = ||w - target||^2, gradient 2(w - target)
    rng = np.random.default_rng(33)
    w0 = rng.uniform(-1, 1, 6).astype(np.float32)
    target = rng.uniform(-1, 1, 6).astype(np.float32)
    hp = nn.Hyperparams(learning_rate=0.05, weight_decay=0.0)

    pool, cache, _ = fresh()
    group = nn.ParamGroup()
    w = ad.make_param(pool, w0, "w")
    group.add("w", w)
    oracle = OracleAdamW(w0, lr=0.05, wd=0.0)

    losses = []
    for _ in range(10):
        g = 2.0 * (w.data - target)
        cache.zero_after_step()
        cache.accumulate("w", tensor_from_array(pool, g))
        nn.adamw_step(group, cache, hp)
        expected = oracle.step(2.0 * (oracle.w - target.astype(np.float64)))
        np.testing.assert_allclose(w.data, expected, rtol=1e-5)
        losses.append(float(((w.data - target) ** 2).sum()))
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("optimizer", ["sgd", "adamw"])
def test_optimizer_decreases_convex_quadratic(optimizer):
    rng = np.random.default_rng(44)
    w0 = rng.uniform(-1, 1, 8).astype(np.float32)
    target = rng.uniform(-1, 1, 8).astype(np.float32)
    pool, cache, _ = fresh()
    group = nn.ParamGroup()
    w = ad.make_param(pool, w0, "w")
    group.add("w", w)
    hp = nn.Hyperparams(learning_rate=0.01, weight_decay=0.0)

    def loss():
        return float(((w.data - target) ** 2).sum())

    decreases = 0
    prev = loss()
    for _ in range(100):
        cache.zero_after_step()
        cache.accumulate("w", tensor_from_array(pool, 2.0 * (w.data - target)))
        if optimizer == "sgd":
            nn.sgd_step(group, cache, lr=0.01, momentum=0.0)
        else:
            nn.adamw_step(group, cache, hp)
        cur = loss()
        decreases += cur < prev
        prev = cur
    assert decreases >= 95


# --- clipping ------------------------------------------------------------------------

def clip_setup(grads):
    pool, cache, _ = fresh()
    for i, g in enumerate(grads):
        cache.accumulate(f"p{i}", tensor_from_array(pool, g))
    return cache


def test_clip_at_boundary_is_identity():
    cache = clip_setup([[3.0, 4.0]])
    assert nn.clip_grad_norm(cache, 5.0) == 1.0
    np.testing.assert_allclose(cache.get("p0"), [3.0, 4.0])


def test_clip_scales_down():
    cache = clip_setup([[6.0, 8.0]])
    scale = nn.clip_grad_norm(cache, 5.0)
    assert scale == pytest.approx(0.5)
    np.testing.assert_allclose(cache.get("p0"), [3.0, 4.0], rtol=1e-6)


def test_clip_uses_global_norm():
    cache = clip_setup([[3.0, 0.0], [0.0, 4.0]])
    nn.clip_grad_norm(cache, 2.5)
    np.testing.assert_allclose(cache.get("p0"), [1.5, 0.0], rtol=1e-6)
    np.testing.assert_allclose(cache.get("p1"), [0.0, 2.0], rtol=1e-6)


def test_clip_is_idempotent():
    cache = clip_setup([[6.0, 8.0]])
    nn.clip_grad_norm(cache, 5.0)
    once = cache.get("p0").copy()
    nn.clip_grad_norm(cache, 5.0)
    np.testing.assert_allclose(cache.get("p0"), once, rtol=1e-6)


def test_hyperparams_validation():
    with pytest.raises(NskRuntimeError):
        nn.Hyperparams(learning_rate=0.0)
    with pytest.raises(NskRuntimeError):
        nn.Hyperparams(clip_norm=-1.0)
