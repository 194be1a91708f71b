import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hiergate import tensor as T
from hiergate.tensor import GraphError, ShapeError, Tensor

from conftest import N_INSTANCES, check_gradients


def away_from_kink(a, margin=1e-2):
    # keep |x| > margin so finite differences never straddle a kink
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin, a)


def positive(a):
    return np.abs(a) + 0.1


# op name -> (builder, input generator)
UNARY_CASES = {
    "neg": (lambda x: T.sum_(T.mul(T.neg(x), x)), lambda r: [r.normal(size=(3, 4))]),
    "relu": (lambda x: T.sum_(T.square(T.relu(x))), lambda r: [away_from_kink(r.normal(size=(3, 4)))]),
    "sigmoid": (lambda x: T.sum_(T.square(T.sigmoid(x))), lambda r: [3 * r.normal(size=(3, 4))]),
    "softplus": (lambda x: T.sum_(T.square(T.softplus(x))), lambda r: [3 * r.normal(size=(3, 4))]),
    "exp": (lambda x: T.sum_(T.exp(x)), lambda r: [r.normal(size=(3, 4))]),
    "log": (lambda x: T.sum_(T.square(T.log(x))), lambda r: [positive(r.normal(size=(3, 4)))]),
    "abs": (lambda x: T.sum_(T.square(T.abs_(x))), lambda r: [away_from_kink(r.normal(size=(3, 4)))]),
    "square": (lambda x: T.sum_(T.square(x)), lambda r: [r.normal(size=(5,))]),
    "softmax": (lambda x: T.sum_(T.square(T.softmax(x, axis=-1))), lambda r: [r.normal(size=(3, 4))]),
    "softmax_axis0": (lambda x: T.sum_(T.square(T.softmax(x, axis=0))), lambda r: [r.normal(size=(3, 4))]),
    "log_softmax": (lambda x: T.sum_(T.square(T.log_softmax(x, axis=-1))), lambda r: [r.normal(size=(3, 4))]),
    "sum_axis": (lambda x: T.sum_(T.square(T.sum_(x, axis=1))), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda x: T.sum_(T.square(T.mean(x, axis=0))), lambda r: [r.normal(size=(3, 4))]),
    "mean_all": (lambda x: T.square(T.mean(x)), lambda r: [r.normal(size=(3, 4))]),
    "getitem": (lambda x: T.sum_(T.square(x[:, 1])), lambda r: [r.normal(size=(3, 4))]),
    "getitem_fancy": (lambda x: T.sum_(T.square(x[np.array([0, 0, 2]), np.array([1, 1, 3])])),
                      lambda r: [r.normal(size=(3, 4))]),
    "reshape": (lambda x: T.sum_(T.mul(T.reshape(x, (4, 3)), Tensor(np.arange(12.0).reshape(4, 3)))),
                lambda r: [r.normal(size=(3, 4))]),
    "where": (lambda x: T.sum_(T.square(T.where(np.eye(3, dtype=bool), x, T.exp(x)))),
              lambda r: [r.normal(size=(3, 3))]),
}

BINARY_CASES = {
    "add": (lambda a, b: T.sum_(T.square(T.add(a, b))), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "add_scalar": (lambda a, b: T.sum_(T.square(T.add(a, b))), lambda r: [r.normal(size=(2, 3)), r.normal(size=())]),
    "sub": (lambda a, b: T.sum_(T.square(T.sub(a, b))), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "mul": (lambda a, b: T.sum_(T.square(T.mul(a, b))), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "mul_scalar": (lambda a, b: T.sum_(T.mul(a, b)), lambda r: [r.normal(size=()), r.normal(size=(4,))]),
    "matmul": (lambda a, b: T.sum_(T.square(T.matmul(a, b))), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "stack": (lambda a, b: T.sum_(T.square(T.stack([a, T.exp(b)], axis=1))),
              lambda r: [r.normal(size=(3,)), r.normal(size=(3,))]),
}

TERNARY_CASES = {
    "linear": (lambda x, W, b: T.sum_(T.square(T.linear(x, W, b))),
               lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 2)), r.normal(size=(2,))]),
    "gate_select": (lambda w, on, off: T.sum_(T.square(T.gate_select(w, on, off))),
                    lambda r: [r.uniform(size=(4,)), r.normal(size=(4, 3)), r.normal(size=(4, 3))]),
    "conv1d": (lambda x, W, b: T.sum_(T.square(T.conv1d(x, W, b))),
               lambda r: [r.normal(size=(2, 3, 6)), r.normal(size=(2, 3, 3)), r.normal(size=(2,))]),
}

ALL_CASES = {**UNARY_CASES, **BINARY_CASES, **TERNARY_CASES}


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_primitive_gradients_match_finite_differences(name):
    build, make = ALL_CASES[name]
    r = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check_gradients(build, make(r)) for _ in range(N_INSTANCES))
    assert worst < 1e-3


def test_forward_values():
    x = Tensor([[1.0, -2.0], [3.0, 0.5]])
    np.testing.assert_allclose(T.relu(x).data, [[1, 0], [3, 0.5]])
    np.testing.assert_allclose(T.softmax(x).data.sum(axis=1), [1, 1])
    np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data))
    np.testing.assert_allclose(T.sigmoid(Tensor([0.0, 800.0, -800.0])).data, [0.5, 1.0, 0.0])
    np.testing.assert_allclose(T.softplus(Tensor([0.0, 800.0])).data, [np.log(2), 800.0])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    T.sum_(T.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


@pytest.mark.parametrize(("a", "b"), [((2, 3), (3, 2)), ((2, 3), (3,)), ((1, 3), (2, 3))])
def test_mismatched_shapes_raise(a, b):
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(a)), Tensor(np.zeros(b)))


def test_scalar_broadcast_allowed():
    out = T.add(Tensor(np.ones((2, 2))), Tensor(1.0))
    assert out.shape == (2, 2)


def test_matmul_requires_2d():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        T.mul(x, x).backward()


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.sum_(T.square(x))
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_reusing_consumed_graph_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    h = T.exp(x)
    T.sum_(h).backward()
    with pytest.raises(GraphError):
        T.sum_(h)


def test_gradients_accumulate_over_reused_nodes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    h = T.mul(x, x)
    T.sum_(T.add(h, h)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum_(x).backward()
    T.sum_(x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.add(T.sum_(T.stop_gradient(T.square(x))), T.sum_(x))
    y.backward()
    np.testing.assert_allclose(x.grad, [1.0, 1.0])


def test_gate_select_forward_is_exact_row_choice():
    on = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    off = Tensor(np.array([[np.nan, 0.0], [5.0, 6.0]]))
    # w=1 rows must not touch `off`, even if it holds NaN
    out = T.gate_select(Tensor([1.0, 0.0]), on, off)
    assert out.data.tolist() == [[1.0, 2.0], [5.0, 6.0]]


def test_conv1d_matches_direct_sum():
    r = np.random.default_rng(0)
    x, W, b = r.normal(size=(2, 3, 7)), r.normal(size=(4, 3, 3)), r.normal(size=4)
    out = T.conv1d(x, W, b).data
    direct = np.zeros((2, 4, 5))
    for n in range(2):
        for o in range(4):
            for t in range(5):
                direct[n, o, t] = np.sum(x[n, :, t:t + 3] * W[o]) + b[o]
    np.testing.assert_allclose(out, direct, atol=1e-12)


def test_truediv_only_by_scalars():
    x = Tensor(np.ones(2))
    assert (x / 2).data.tolist() == [0.5, 0.5]
    with pytest.raises(TypeError):
        x / Tensor(np.ones(2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(a):
    p = T.softmax(Tensor(a), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-20, 20, allow_nan=False)))
def test_sum_gradient_is_ones(a):
    x = Tensor(a, requires_grad=True)
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones_like(a))
