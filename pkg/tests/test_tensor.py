"""Reverse-mode core: every primitive against central finite differences."""

import numpy as np
import pytest

from dqmq import tensor as T
from dqmq.errors import ContractError, DimensionError, NumericError
from dqmq.tensor import Tensor

from conftest import assert_grads_close, numeric_grad

rng = np.random.default_rng(0)


def check(fn, *shapes, positive=False, **kw):
    """Compare autodiff and central differences of ``sum(fn(*xs) * w)``."""
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = fn(*[Tensor(x, dtype=np.float64) for x in xs]).shape
    w = rng.normal(size=out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a, dtype=np.float64) for a in arrs]).data * w))

    leaves = [Tensor(x, requires_grad=True, dtype=np.float64) for x in xs]
    out = fn(*leaves)
    T.backward(T.sum(T.mul(out, Tensor(w, dtype=np.float64))))
    assert_grads_close([l.grad for l in leaves], numeric_grad(scalar, xs), **kw)


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_binary_same_shape(op):
    check(op, (3, 4), (3, 4))


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_binary_scalar_broadcast(op):
    check(op, (3, 4), (1,))
    check(op, (1,), (2, 5))


def test_unary_ops():
    check(T.relu, (4, 5))
    check(T.exp, (4, 5))
    check(T.log, (4, 5), positive=True)
    check(T.neg, (3,))
    check(lambda a: T.div_scalar(a, 3.0), (3, 2))


def test_reductions():
    check(lambda a: T.sum(a), (3, 4))
    check(lambda a: T.sum(a, axis=1), (3, 4))
    check(lambda a: T.mean(a, axis=(0, 2)), (2, 3, 4))


def test_softmax_family():
    check(T.softmax, (3, 5))
    check(T.log_softmax, (3, 5))
    labels = np.array([0, 4, 2])
    check(lambda a: T.cross_entropy(a, labels), (3, 5))


def test_shape_ops():
    check(lambda a: T.reshape(a, (6, 2)), (3, 4))
    check(lambda a: T.take(a, np.array([0, 2, 2])), (4,))
    check(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))


def test_linear_algebra():
    check(T.matmul, (3, 4), (4, 2))
    check(T.linear, (5, 4), (3, 4), (3,))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv2d(stride, pad):
    check(lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad), (2, 3, 6, 6), (4, 3, 3, 3), (4,))


def test_conv2d_matches_direct_sum():
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for f in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, f, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f])
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_reused_operand_accumulates():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_accumulates_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(x))
    T.backward(T.sum(T.mul(x, 2.0)))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_replay_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(ContractError):
        T.backward(loss)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_only_scalar_broadcasting():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_dtype_rules():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64
    a = Tensor(np.ones(2), requires_grad=True)
    assert T.mul(a, 2.0).dtype == np.float64


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert y.is_leaf and not y.requires_grad


def test_non_finite_raises():
    with pytest.raises(NumericError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericError):
        T.exp(Tensor([1000.0]))


def test_grad_at_leaves_inputs_untouched():
    v = np.array([1.0, -2.0])
    loss, (g,) = T.grad_at(lambda ls: T.sum(T.mul(ls[0], ls[0])), [v])
    assert loss == 5.0
    np.testing.assert_array_equal(g, 2 * v)


def test_frozen_relu_replays_recorded_pattern():
    masks = []
    with T.frozen_relu(masks, record=True):
        T.relu(Tensor([1.0, -1.0]))
    with T.frozen_relu(masks):
        out = T.relu(Tensor([-2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [-2.0, 0.0])
    with pytest.raises(ContractError), T.frozen_relu(masks):
        T.relu(Tensor([1.0, 2.0]))
        T.relu(Tensor([1.0, 2.0]))
