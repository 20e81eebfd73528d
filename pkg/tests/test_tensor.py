import numpy as np
import pytest

from nsk.errors import NskRuntimeError, NskTypeError
from nsk.tensor import (
    Buffer,
    GradCache,
    Pool,
    Tensor,
    bias_add,
    elementwise,
    matmul_t,
    onehot,
    release_tensor,
    tensor_from_array,
)


def naive_matmul_t(x_rows, w_rows):
    """Independent oracle: y[i][j] = sum_c x[i][c] * w[j][c], plain loops."""
    m, k = len(x_rows), len(x_rows[0])
    n = len(w_rows)
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for c in range(k):
                acc += x_rows[i][c] * w_rows[j][c]
            out[i][j] = acc
    return out


# --- pool -----------------------------------------------------------------------

def test_first_acquire_is_fresh():
    pool = Pool()
    buf = pool.acquire(512)
    assert buf.origin == "fresh"
    assert pool.stats() == {"fresh": 1, "hits": 0, "released": 0}


def test_release_then_acquire_returns_same_buffer():
    pool = Pool()
    buf = pool.acquire(512)
    pool.release(buf)
    again = pool.acquire(512)
    assert again is buf
    assert again.origin == "pooled"
    assert pool.stats()["hits"] == 1


def test_exact_size_keying():
    pool = Pool()
    buf = pool.acquire(512)
    pool.release(buf)
    other = pool.acquire(256)
    assert other is not buf
    assert pool.stats()["fresh"] == 2


def test_lifo_reuse_order():
    pool = Pool()
    a, b = pool.acquire(64), pool.acquire(64)
    pool.release(a)
    pool.release(b)
    assert len(pool.free_lists[64]) == 2
    assert pool.acquire(64) is b
    assert pool.acquire(64) is a


def test_double_release_rejected():
    pool = Pool()
    buf = pool.acquire(8)
    pool.release(buf)
    with pytest.raises(NskRuntimeError):
        pool.release(buf)


def test_released_contents_not_zeroed():
    pool = Pool()
    buf = pool.acquire(4)
    buf.storage[:] = 7.0
    pool.release(buf)
    again = pool.acquire(4)
    assert again is buf
    assert (again.storage == 7.0).all()


def test_disabled_pool_always_fresh():
    pool = Pool(enabled=False)
    a = pool.acquire(32)
    pool.release(a)
    b = pool.acquire(32)
    assert b is not a
    assert pool.stats()["fresh"] == 2


def test_out_of_memory_is_catchable():
    with pytest.raises(NskRuntimeError) as err:
        Pool().acquire(10**15)
    assert "out of memory" in str(err.value)
    assert "1000000000000000" in str(err.value)


def test_pool_conservation_random_sequence():
    # fresh + reuses == releases + live at every quiescent point
    import random

    rng = random.Random(7)
    pool = Pool()
    live = []
    for _ in range(500):
        if live and rng.random() < 0.5:
            pool.release(live.pop(rng.randrange(len(live))))
        else:
            live.append(pool.acquire(rng.choice([16, 32, 64])))
        s = pool.stats()
        assert s["fresh"] + s["hits"] == s["released"] + len(live)
        assert pool.free_total() == s["released"] - s["hits"]


# --- kernels --------------------------------------------------------------------

def test_matmul_t_single_element():
    pool = Pool()
    x = tensor_from_array(pool, [[1.0, 2.0]])
    w = tensor_from_array(pool, [[3.0, 4.0]])
    y = matmul_t(x, w, pool)
    assert y.shape == (1, 1)
    assert y.data[0, 0] == pytest.approx(11.0)


def test_matmul_t_identity():
    pool = Pool()
    rng = np.random.default_rng(0)
    x = tensor_from_array(pool, rng.uniform(-1, 1, (3, 3)))
    eye = tensor_from_array(pool, np.eye(3))
    y = matmul_t(x, eye, pool)
    np.testing.assert_allclose(y.data, x.data, atol=1e-6)


def test_matmul_t_against_naive_oracle():
    rng = np.random.default_rng(42)
    pool = Pool()
    for _ in range(100):
        m, k, n = rng.integers(1, 8, size=3)
        xv = rng.uniform(-1, 1, (m, k)).astype(np.float32)
        wv = rng.uniform(-1, 1, (n, k)).astype(np.float32)
        y = matmul_t(tensor_from_array(pool, xv), tensor_from_array(pool, wv), pool)
        expected = naive_matmul_t(xv.tolist(), wv.tolist())
        np.testing.assert_allclose(y.data, expected, atol=1e-5)


def test_matmul_t_shape_mismatch():
    pool = Pool()
    x = tensor_from_array(pool, np.zeros((2, 3)))
    w = tensor_from_array(pool, np.zeros((4, 5)))
    with pytest.raises(NskTypeError) as err:
        matmul_t(x, w, pool)
    assert "2x3" in str(err.value) and "4x5" in str(err.value)


def test_elementwise_add():
    pool = Pool()
    a = tensor_from_array(pool, [1.0, 2.0])
    b = tensor_from_array(pool, [3.0, 4.0])
    np.testing.assert_allclose(elementwise("add", a, b, pool).data, [4.0, 6.0])


def test_elementwise_relu():
    pool = Pool()
    a = tensor_from_array(pool, [-1.0, 0.0, 2.0])
    np.testing.assert_allclose(elementwise("relu", a, None, pool).data, [0.0, 0.0, 2.0])


def test_elementwise_sigmoid_at_zero():
    pool = Pool()
    a = tensor_from_array(pool, [0.0])
    np.testing.assert_allclose(elementwise("sigmoid", a, None, pool).data, [0.5])


def test_elementwise_sigmoid_extremes_are_finite():
    pool = Pool()
    a = tensor_from_array(pool, [-1000.0, 1000.0])
    out = elementwise("sigmoid", a, None, pool).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-6)


def test_elementwise_shape_mismatch():
    pool = Pool()
    a = tensor_from_array(pool, [1.0, 2.0])
    b = tensor_from_array(pool, [1.0, 2.0, 3.0])
    with pytest.raises(NskTypeError):
        elementwise("add", a, b, pool)


def test_scalar_ops():
    pool = Pool()
    a = tensor_from_array(pool, [1.0, 2.0])
    np.testing.assert_allclose(elementwise("scalar-add", a, 1.5, pool).data, [2.5, 3.5])
    np.testing.assert_allclose(elementwise("scalar-mul", a, -2.0, pool).data, [-2.0, -4.0])


def test_bias_add_broadcasts_rows():
    pool = Pool()
    x = tensor_from_array(pool, [[1.0, 2.0], [3.0, 4.0]])
    b = tensor_from_array(pool, [10.0, 20.0])
    np.testing.assert_allclose(bias_add(x, b, pool).data, [[11.0, 22.0], [13.0, 24.0]])


def test_onehot_single():
    pool = Pool()
    idx = tensor_from_array(pool, [1.0])
    np.testing.assert_allclose(onehot(idx, 3, pool).data, [[0, 1, 0]])


def test_onehot_rows():
    pool = Pool()
    idx = tensor_from_array(pool, [0.0, 2.0])
    np.testing.assert_allclose(onehot(idx, 3, pool).data, [[1, 0, 0], [0, 0, 1]])


def test_onehot_out_of_range():
    pool = Pool()
    idx = tensor_from_array(pool, [3.0])
    with pytest.raises(NskRuntimeError) as err:
        onehot(idx, 3, pool)
    assert "row 0" in str(err.value)


def test_no_op_reads_uninitialized_pooled_memory():
    # poisoned released buffers must never leak through any op's output
    pool = Pool(poison=True)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = tensor_from_array(pool, rng.uniform(-1, 1, (4, 3)))
        w = tensor_from_array(pool, rng.uniform(-1, 1, (5, 3)))
        y = matmul_t(x, w, pool)
        z = elementwise("sigmoid", y, None, pool)
        for t in (x, w, y, z):
            assert np.isfinite(t.data).all()
        for t in (z, y, w, x):
            release_tensor(pool, t)


# --- tensors and the grad cache ----------------------------------------------------

def test_tensor_shape_capacity_invariant():
    with pytest.raises(NskRuntimeError):
        Tensor((2, 3), Buffer(5))


def test_release_tensor_snapshots_scalars():
    pool = Pool()
    t = tensor_from_array(pool, [4.5])
    release_tensor(pool, t)
    assert t.buffer is None
    assert t.item() == 4.5


def test_reclaimed_tensor_read_raises():
    pool = Pool()
    t = tensor_from_array(pool, [[1.0, 2.0]])
    release_tensor(pool, t)
    with pytest.raises(NskRuntimeError):
        _ = t.data


def test_grad_cache_accumulates():
    pool = Pool()
    cache = GradCache()
    g = tensor_from_array(pool, [1.0, 2.0])
    cache.accumulate("w", g)
    cache.accumulate("w", g)
    np.testing.assert_allclose(cache.get("w"), [2.0, 4.0])
    assert "w" in cache.dirty


def test_grad_cache_zero_after_step():
    pool = Pool()
    cache = GradCache()
    for name in ("a", "b", "c"):
        cache.accumulate(name, tensor_from_array(pool, [1.0, 1.0]))
    cache.zero_after_step()
    for name in ("a", "b", "c"):
        assert (cache.get(name) == 0.0).all()
    assert not cache.dirty


def test_grad_cache_zero_is_idempotent():
    pool = Pool()
    cache = GradCache()
    cache.accumulate("a", tensor_from_array(pool, [3.0]))
    cache.zero_after_step()
    cache.zero_after_step()
    assert (cache.get("a") == 0.0).all()


def test_grad_cache_empty_zero_is_noop():
    GradCache().zero_after_step()


def test_grad_cache_shape_mismatch():
    pool = Pool()
    cache = GradCache()
    cache.accumulate("w", tensor_from_array(pool, [1.0, 2.0]))
    with pytest.raises(NskRuntimeError):
        cache.accumulate("w", tensor_from_array(pool, [[1.0, 2.0]]))


def test_grad_cache_buffers_persist_across_zero():
    pool = Pool()
    cache = GradCache()
    cache.accumulate("w", tensor_from_array(pool, [1.0]))
    buf = cache.grads["w"]
    cache.zero_after_step()
    assert cache.grads["w"] is buf
