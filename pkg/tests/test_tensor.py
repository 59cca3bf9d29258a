import numpy as np
import pytest

from grle import tensor as T
from grle.tensor import Tensor, Tape, backward, use_tape


def t64(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def test_tensor_storage_is_flat_row_major():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert x.data.flags["C_CONTIGUOUS"]
    assert x.shape == (2, 2)
    assert x.size == 4
    assert x.dtype == np.float32


def test_default_dtype_and_override():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor([1, 2], dtype=np.float64).dtype == np.float64


def test_mixed_dtypes_raise():
    a = Tensor([1.0], dtype=np.float32)
    b = Tensor([1.0], dtype=np.float64)
    with pytest.raises(TypeError):
        T.add(a, b)


def test_matmul_identity():
    eye = t64(np.eye(2))
    x = t64([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(eye, x).data, x.data)


def test_matmul_zero_annihilates():
    z = t64(np.zeros((2, 2)))
    x = t64([[5.0, -1.0], [2.0, 7.0]])
    np.testing.assert_array_equal(T.matmul(z, x).data, np.zeros((2, 2)))


def test_matmul_against_triple_loop_oracle():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[5.0, 6.0], [7.0, 8.0]])
    m, k, n = 2, 2, 2
    expect = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                expect[i, j] += a.data[i, p] * b.data[p, j]
    np.testing.assert_allclose(T.matmul(a, b).data, expect, rtol=0, atol=0)
    np.testing.assert_array_equal(expect, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    a = t64(np.ones((2, 3)))
    b = t64(np.ones((4, 2)))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(a, b)


def test_matmul_backward_rules():
    with use_tape(Tape()):
        a = t64(np.arange(6.0).reshape(2, 3), rg=True)
        b = t64(np.arange(12.0).reshape(3, 4), rg=True)
        c = T.matmul(a, b)
        backward(T.tsum(c))
    g = np.ones((2, 4))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_log_softmax_uniform_input():
    x = t64([0.0, 0.0]).data.reshape(1, 2)
    y = T.log_softmax(Tensor(x, dtype=np.float64), axis=1)
    np.testing.assert_allclose(y.data, [[-np.log(2), -np.log(2)]], atol=1e-12)


def test_log_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    a = T.log_softmax(t64(x), axis=1).data
    b = T.log_softmax(t64(x + 17.3), axis=1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_log_softmax_direct_value():
    y = T.log_softmax(t64([[1.0, 2.0, 3.0]]), axis=1).data[0]
    expect = np.array([1.0, 2.0, 3.0]) - (3.0 + np.log(1.0 + np.exp(-1.0) + np.exp(-2.0)))
    np.testing.assert_allclose(y, expect, atol=1e-12)
    np.testing.assert_allclose(y, [-2.4076, -1.4076, -0.4076], atol=5e-5)


def test_log_softmax_axis_out_of_range():
    with pytest.raises(ValueError, match="axis"):
        T.log_softmax(t64([[1.0, 2.0]]), axis=2)


def test_softmax_rows_sum_to_one_and_nonnegative():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=10.0, size=(16, 7)).astype(np.float32)
    y = T.softmax(Tensor(x), axis=1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), np.ones(16), atol=1e-6)


def test_masked_fill_neg_inf_gives_exact_zero_probability():
    x = t64([[1.0, 2.0, 3.0, 4.0]])
    mask = np.array([[False, True, False, True]])
    y = T.softmax(T.masked_fill(x, mask, -np.inf), axis=1).data
    assert y[0, 1] == 0.0
    assert y[0, 3] == 0.0
    np.testing.assert_allclose(y.sum(), 1.0, atol=1e-12)


def test_backward_quadratic():
    with use_tape(Tape()):
        x = t64(3.0, rg=True)
        backward(T.mul(x, x))
    np.testing.assert_allclose(x.grad, 6.0)


def test_backward_constant_leaves_grad_empty():
    with use_tape(Tape()):
        x = t64(3.0, rg=True)
        y = t64(2.0, rg=True)
        backward(T.mul(y, y))
    assert x.grad is None
    np.testing.assert_allclose(y.grad, 4.0)


def test_backward_non_scalar_rejected():
    with use_tape(Tape()):
        x = t64([1.0, 2.0], rg=True)
        y = T.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y)


def test_backward_detached_loss_rejected():
    with pytest.raises(ValueError, match="tape"):
        backward(t64(1.0, rg=True))


def test_backward_accumulates_on_repeat():
    with use_tape(Tape()):
        x = t64(3.0, rg=True)
        y = T.mul(x, x)
        backward(y)
        backward(y)
    np.testing.assert_allclose(x.grad, 12.0)


def test_gradient_of_sum_is_sum_of_gradients():
    rng = np.random.default_rng(2)
    xv = rng.normal(size=4)
    with use_tape(Tape()):
        x = t64(xv, rg=True)
        backward(T.tsum(T.mul(x, x)))
        g_joint = x.grad.copy()
    with use_tape(Tape()):
        x1 = t64(xv, rg=True)
        backward(T.tsum(T.mul(x1, T.Tensor(np.ones(4), dtype=np.float64) * x1)))
    np.testing.assert_allclose(g_joint, 2 * xv, atol=1e-12)
    np.testing.assert_allclose(x1.grad, g_joint, atol=1e-12)


def test_requires_grad_false_never_accumulates():
    with use_tape(Tape()):
        x = t64(3.0, rg=False)
        y = t64(2.0, rg=True)
        backward(T.mul(x, y))
    assert x.grad is None
    np.testing.assert_allclose(y.grad, 3.0)


def test_suffix_broadcast_allowed_and_reduced():
    with use_tape(Tape()):
        x = t64(np.ones((2, 3, 4)), rg=True)
        b = t64(np.arange(4.0), rg=True)
        backward(T.tsum(T.add(x, b)))
    np.testing.assert_allclose(x.grad, np.ones((2, 3, 4)))
    np.testing.assert_allclose(b.grad, np.full(4, 6.0))


def test_internal_broadcast_rejected():
    a = t64(np.ones((2, 3)))
    b = t64(np.ones((2, 1)))
    with pytest.raises(ValueError, match="leading batch dimensions"):
        T.add(a, b)


def test_no_grad_records_nothing():
    tape = Tape()
    with use_tape(tape):
        x = t64(1.0, rg=True)
        with T.no_grad():
            y = T.mul(x, x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_embedding_out_of_range_id():
    table = t64(np.zeros((4, 2)))
    with pytest.raises(IndexError, match="out of range"):
        T.embedding(table, np.array([[0, 4]]))


def test_embedding_backward_accumulates_repeats():
    with use_tape(Tape()):
        table = t64(np.ones((3, 2)), rg=True)
        y = T.embedding(table, np.array([0, 2, 0]))
        backward(T.tsum(y))
    np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_l2_normalize_zero_vector_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        T.l2_normalize(t64([[0.0, 0.0]]))


def test_detach_disconnects():
    with use_tape(Tape()):
        x = t64(2.0, rg=True)
        y = T.mul(x, x).detach()
        assert not y.requires_grad
        assert y.tape_node is None
