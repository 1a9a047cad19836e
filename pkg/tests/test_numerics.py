import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mse2e import numerics as nx
from mse2e.numerics import ContractError, DimensionError, Tensor


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check(loss_fn, named, tol=1e-6):
    errs = nx.gradient_check(loss_fn, named)
    assert max(errs.values()) < tol, errs


UNARY = {
    "tanh": nx.tanh,
    "sigmoid": nx.sigmoid,
    "exp": nx.exp,
    "softmax": nx.softmax,
    "log_softmax": nx.log_softmax,
    "logsumexp": lambda x: nx.logsumexp(x),
    "sum_axis0": lambda x: nx.sum_(x, axis=0),
    "mean": nx.mean,
    "transpose": lambda x: nx.transpose(x),
    "reshape": lambda x: nx.reshape(x, (-1,)),
    "slice": lambda x: x[1:, :2],
    "fancy": lambda x: x[np.array([0, 2, 2]), np.array([1, 0, 1])],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = _param(rng, 3, 4)
    w = Tensor(rng.normal(size=UNARY[name](Tensor(x.data)).shape))
    _check(lambda: nx.sum_(UNARY[name](x) * w), [("x", x)])


def test_relu_gradient_away_from_kink(rng):
    x = Tensor(rng.uniform(0.1, 1.0, size=(3, 3)) * rng.choice([-1, 1], size=(3, 3)), requires_grad=True)
    _check(lambda: nx.sum_(nx.relu(x) * 1.7), [("x", x)])


def test_log_gradient(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
    _check(lambda: nx.sum_(nx.log(x)), [("x", x)])


@pytest.mark.parametrize("op", [nx.add, nx.sub, nx.mul])
def test_broadcasting_binary_gradients(op, rng):
    a, b = _param(rng, 3, 4), _param(rng, 4)
    _check(lambda: nx.sum_(nx.tanh(op(a, b))), [("a", a), ("b", b)])


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((4,), (4,))])
def test_matmul_gradients(sa, sb, rng):
    a, b = _param(rng, *sa), _param(rng, *sb)
    _check(lambda: nx.sum_(nx.tanh(nx.matmul(a, b))), [("a", a), ("b", b)])


@pytest.mark.parametrize("xshape", [(5,), (3, 5)])
def test_linear_gradients(xshape, rng):
    x, w, b = _param(rng, *xshape), _param(rng, 4, 5), _param(rng, 4)
    _check(lambda: nx.sum_(nx.tanh(nx.linear(x, w, b))), [("x", x), ("w", w), ("b", b)])
    _check(lambda: nx.sum_(nx.tanh(nx.linear(x, w))), [("x", x), ("w", w)])


def test_concat_and_stack_gradients(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    _check(lambda: nx.sum_(nx.tanh(nx.concat([a, b], axis=1)) * 0.3), [("a", a), ("b", b)])
    _check(lambda: nx.sum_(nx.softmax(nx.stack([a, b], axis=0), axis=0)[0] * 2.0), [("a", a), ("b", b)])


def test_random_two_layer_composite_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(6, 5)))
    w1, b1 = _param(rng, 8, 5), _param(rng, 8)
    w2, b2 = _param(rng, 3, 8), _param(rng, 3)
    tgt = np.array([0, 2, 1, 1, 0, 2])

    def loss():
        h = nx.tanh(nx.linear(x, w1, b1))
        lp = nx.log_softmax(nx.linear(h, w2, b2))
        return -nx.mean(lp[np.arange(6), tgt])

    _check(loss, [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_log_sum_exp_examples():
    assert nx.log_sum_exp([math.log(1), math.log(1)]) == pytest.approx(math.log(2), abs=1e-15)
    assert nx.log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2))
    assert nx.log_sum_exp([-math.inf, -math.inf]) == -math.inf
    assert nx.log_sum_exp([-math.inf, 0.0]) == 0.0
    with pytest.raises(ContractError):
        nx.log_sum_exp([])


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700)))
def test_log_sum_exp_bounds(v):
    out = nx.log_sum_exp(v)
    assert v.max() - 1e-9 <= out <= v.max() + math.log(v.size) + 1e-9


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_log_sum_exp_shift_equivariance(v, c):
    assert nx.log_sum_exp(v + c) == pytest.approx(nx.log_sum_exp(v) + c, abs=1e-9)


@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_normalised(x):
    y = nx.softmax(Tensor(x)).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.allclose(np.exp(nx.log_softmax(Tensor(x)).data).sum(-1), 1.0, atol=1e-12)


def test_no_recording_without_tape_or_grad(rng):
    x = _param(rng, 3)
    with nx.Tape() as tape:
        nx.tanh(Tensor(np.ones(3)))
        assert len(tape) == 0
        nx.tanh(x)
        assert len(tape) == 1
    y = nx.tanh(x)  # outside a tape: nothing recorded anywhere
    assert isinstance(y, Tensor)


def test_backward_requires_scalar_and_tape(rng):
    x = _param(rng, 3)
    with nx.Tape():
        y = nx.tanh(x)
        with pytest.raises(ContractError):
            nx.backward(y)
    with pytest.raises(ContractError):
        nx.backward(nx.sum_(x))


def test_leaf_grads_accumulate_until_zeroed(rng):
    x = _param(rng, 4)
    for _ in range(2):
        with nx.Tape() as tape:
            nx.backward(nx.sum_(x * 3.0), tape)
    assert np.allclose(x.grad, 6.0)
    nx.zero_grad([x])
    assert x.grad is None or np.all(x.grad == 0)


def test_shared_subexpression_gradient(rng):
    x = _param(rng, 3)
    _check(lambda: nx.sum_(nx.tanh(x) * nx.tanh(x) + nx.tanh(x)), [("x", x)])


def test_norm_relative_error_is_scale_free():
    a = np.array([1.0, 2.0, 0.0])
    assert nx.norm_relative_error(a, a) == 0.0
    assert nx.norm_relative_error(1e6 * a, 1e6 * (a + [0, 0, 1e-6])) == pytest.approx(
        nx.norm_relative_error(a, a + [0, 0, 1e-6]))
