import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msranet import tensor as T
from msranet.errors import ContractError, DataError, ShapeError, StateError
from msranet.tensor import GradTape, Tensor, backward, new_tensor, precision


def test_new_tensor_row_major_addressing():
    h, w, c = 3, 4, 5
    vals = np.arange(h * w * c, dtype=np.float64)
    t = new_tensor([h, w, c], vals, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for k in range(c):
                assert t.data[i, j, k] == vals[(i * w + j) * c + k]
    assert np.array_equal(t.values, vals)


def test_new_tensor_errors():
    with pytest.raises(ShapeError):
        new_tensor([2, 3], [1.0] * 5)
    with pytest.raises(ShapeError):
        new_tensor([0, 3], [])
    with pytest.raises(DataError):
        new_tensor([2], [1.0, np.nan])


def test_tensors_are_immutable():
    t = new_tensor([2], [1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5


def test_precision_context():
    assert T.zeros([2]).dtype == np.float32
    with precision("float64"):
        assert T.zeros([2]).dtype == np.float64
    assert T.zeros([2]).dtype == np.float32
    with pytest.raises(ContractError):
        with precision("float16"):
            pass


def test_precision_is_thread_local():
    seen = []
    with precision("float64"):
        th = threading.Thread(target=lambda: seen.append(T.zeros([1]).dtype))
        th.start()
        th.join()
    assert seen == [np.float32]


finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@given(st.lists(finite, min_size=6, max_size=6), st.lists(finite, min_size=6, max_size=6))
def test_add_mul_commutative_and_identities(xs, ys):
    with precision("float64"):
        a = new_tensor([2, 3], xs)
        b = new_tensor([2, 3], ys)
        assert np.array_equal(T.add(a, b).data, T.add(b, a).data)
        assert np.array_equal(T.mul(a, b).data, T.mul(b, a).data)
        assert np.array_equal(T.add(a, T.zeros([2, 3])).data, a.data)
        assert np.array_equal(T.mul(a, T.ones([2, 3])).data, a.data)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_matmul_matches_triple_loop(m, k, n, seed):
    r = np.random.default_rng(seed)
    a = r.uniform(-1, 1, (m, k))
    b = r.uniform(-1, 1, (k, n))
    out = T.matmul(Tensor(a), Tensor(b)).data
    ref = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for q in range(k):
                acc += a[i, q] * b[q, j]
            ref[i, j] = acc
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-13)


def test_channel_broadcast_only():
    x = T.ones([2, 3, 4])
    T.add(x, T.ones([4]))
    T.mul(x, T.ones([1, 1, 4]))
    with pytest.raises(ShapeError):
        T.add(x, T.ones([3]))
    with pytest.raises(ShapeError):
        T.add(x, T.ones([3, 1]))
    with pytest.raises(ShapeError):
        T.matmul(T.ones([2, 3]), T.ones([2, 3]))


def test_gradient_of_linear_sum():
    p = Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 3, 4)), requires_grad=True)
    with GradTape() as tape:
        loss = T.reduce_sum(T.scale(p, 2.0))
    g = backward(loss, tape)[p]
    assert np.array_equal(g.data, np.full(p.shape, 2.0))


def test_power_rule():
    with precision("float64"):
        p = new_tensor([1], [3.0], requires_grad=True)
        with GradTape() as tape:
            loss = T.mul(p, p)
        assert backward(loss, tape)[p].item() == 6.0


def test_gradient_accumulates_over_reuse():
    with precision("float64"):
        x = new_tensor([3], [1.0, 2.0, 3.0], requires_grad=True)
        with GradTape() as tape:
            y = T.add(T.mul(x, x), x)  # d/dx = 2x + 1
            loss = T.reduce_sum(y)
        np.testing.assert_array_equal(backward(loss, tape)[x].data, [3.0, 5.0, 7.0])


def test_unused_leaf_gets_zero_gradient():
    a = T.ones([2, 2], requires_grad=True)
    b = T.ones([3], requires_grad=True)
    with GradTape() as tape:
        tape.watch(b)
        loss = T.reduce_sum(a)
    grads = backward(loss, tape)
    assert np.array_equal(grads[b].data, np.zeros(3))
    assert grads[a].shape == (2, 2)


def test_backward_contracts():
    a = T.ones([2], requires_grad=True)
    with GradTape() as tape:
        vec = T.scale(a, 2.0)
    with pytest.raises(ContractError):
        backward(vec, tape)
    with GradTape() as t1:
        loss1 = T.reduce_sum(a)
    with GradTape() as t2:
        T.reduce_sum(a)
    with pytest.raises(ContractError):
        backward(loss1, t2)
    backward(loss1, t1)
    with pytest.raises(StateError):
        backward(loss1, t1)


def test_gradients_for_intermediates():
    x = T.ones([2, 2], requires_grad=True)
    with GradTape() as tape:
        h = T.scale(x, 3.0)
        loss = T.reduce_mean(T.mul(h, h))
    g = backward(loss, tape, wrt=[h])[h]
    np.testing.assert_allclose(g.data, 2 * 3.0 / 4)


def test_nonfinite_results_raise():
    big = Tensor(np.array([1e30], np.float32))
    with pytest.raises(DataError), np.errstate(over="ignore"):
        T.mul(big, big)


def test_no_tape_no_history():
    a = T.ones([2], requires_grad=True)
    out = T.add(a, a)
    assert not out.requires_grad


def test_reduce_mean_and_sum_axes():
    x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    assert np.array_equal(T.reduce_mean(x, (0, 1)).data, x.data.mean(axis=(0, 1)))
    assert T.reduce_sum(x, (1,), keepdims=True).shape == (2, 1, 4)
    with pytest.raises(ShapeError):
        T.reduce_sum(x, (3,))
    with pytest.raises(ShapeError):
        T.reshape(x, (5, 5))


def test_select_gradient():
    x = T.ones([2, 3], requires_grad=True)
    with GradTape() as tape:
        y = T.select(x, (1, 2))
    g = backward(y, tape)[x].data
    assert g[1, 2] == 1 and g.sum() == 1
    with pytest.raises(ShapeError):
        T.select(x, (2, 0))
