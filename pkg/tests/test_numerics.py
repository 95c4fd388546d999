import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scenessl import numerics as nx
from scenessl.errors import ContractError, DimensionError
from scenessl.numerics import Rng, Tensor
from scenessl.numerics.gradcheck import check_gradients, numerical_gradient, relative_error


def _param(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- values -------------------------------------------------------------

def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(nx.matmul(eye, eye).data, np.eye(2))


def test_matmul_small_product():
    out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_values():
    np.testing.assert_array_equal(nx.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_log_derivative_at_two(f64):
    x = _param(2.0)
    nx.backward(nx.log(x))
    assert x.grad == pytest.approx(0.5)


def test_mean_of_ones_and_gradient():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    y = nx.mean(x)
    assert y.item() == 1.0
    nx.backward(y)
    np.testing.assert_allclose(x.grad, np.full((4, 4), 1 / 16))


def test_l2_normalize_values():
    np.testing.assert_allclose(nx.l2_normalize(Tensor([[3.0, 4.0]]), 1).data, [[0.6, 0.8]], rtol=1e-6)
    unit = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_allclose(nx.l2_normalize(Tensor(unit), 1).data, unit)


def test_l2_normalize_zero_row_passes_through():
    out = nx.l2_normalize(Tensor(np.zeros((2, 3))), 1)
    np.testing.assert_array_equal(out.data, 0.0)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.backward(nx.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    nx.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_accumulates_until_zeroed():
    x = Tensor(np.ones(3), requires_grad=True)
    nx.backward(nx.sum(x))
    nx.backward(nx.sum(x))
    np.testing.assert_array_equal(x.grad, 2.0)
    nx.zero_grad([x])
    assert x.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        nx.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_log_clamps_and_counts():
    before = nx.clamp_counts["log"]
    out = nx.log(Tensor([0.0, 1.0]))
    assert np.isfinite(out.data).all()
    assert nx.clamp_counts["log"] == before + 1


def test_default_dtype_is_float32():
    assert Tensor([1.0]).dtype == np.float32
    with nx.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert nx.default_dtype() == np.float32


# -- gradients against central differences ------------------------------

def test_matmul_gradient_matches_oracle(f64):
    rng = Rng(3)
    a, b = _param(rng.uniform(-2, 2, (5, 7))), _param(rng.uniform(-2, 2, (7, 3)))
    nx.backward(nx.sum(nx.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, rtol=1e-12)
    numeric = numerical_gradient(lambda: nx.sum(nx.matmul(a, b)), a, step=1e-3)
    assert relative_error(a.grad, numeric) < 1e-4


UNARY = {
    "exp": nx.exp,
    "log": lambda x: nx.log(x * x + 0.5),
    "sqrt": lambda x: nx.sqrt(x * x + 0.5),
    "pow": lambda x: nx.pow(x * x + 0.5, 1.5),
    "relu": nx.relu,
    "neg": nx.neg,
    "l2_normalize": lambda x: nx.l2_normalize(x, 1),
    "softmax": lambda x: nx.softmax(x, 1),
    "log_softmax": lambda x: nx.log_softmax(x, 1),
    "logsumexp": lambda x: nx.logsumexp(x, 1),
    "standardize": lambda x: nx.standardize(x, axes=0),
    "transpose": lambda x: nx.transpose(x),
    "reshape": lambda x: nx.reshape(x, (-1,)),
    "slice": lambda x: nx.slice_(x, (slice(1, 3), slice(None))),
    "mean0": lambda x: nx.mean(x, axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2**32))
def test_unary_gradients_match_finite_differences(name, seed):
    # continuous draws avoid the measure-zero kinks (relu at 0, zero-norm rows)
    x = Rng(seed).uniform(-2, 2, (4, 3))
    with nx.precision(np.float64):
        t = _param(x)
        w = Tensor(np.linspace(-1, 1, UNARY[name](Tensor(x)).data.size).reshape(UNARY[name](Tensor(x)).shape))
        f = lambda: nx.sum(UNARY[name](t) * w)  # noqa: E731
        assert check_gradients(f, [t]) < 1e-4


BINARY = {
    "add": nx.add,
    "sub": nx.sub,
    "mul": nx.mul,
    "div": lambda a, b: nx.div(a, b * b + 0.5),
    "concat": lambda a, b: nx.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 2**32))
def test_binary_gradients_match_finite_differences(name, seed):
    a, b = Rng(seed).uniform(-2, 2, (2, 3, 4))
    with nx.precision(np.float64):
        ta, tb = _param(a), _param(b)
        f = lambda: nx.sum(nx.exp(BINARY[name](ta, tb) * 0.3))  # noqa: E731
        assert check_gradients(f, [ta, tb]) < 1e-4


@given(a=arrays(np.float64, (3, 4), elements=st.floats(-2, 2)),
       b=arrays(np.float64, (4,), elements=st.floats(-2, 2)))
def test_trailing_broadcast_gradient_sums_back(a, b):
    with nx.precision(np.float64):
        ta, tb = _param(a), _param(b)
        nx.backward(nx.sum(ta * tb))
        np.testing.assert_allclose(tb.grad, a.sum(axis=0), atol=1e-12)


def test_conv2d_gradient(f64):
    rng = Rng(5)
    x = _param(rng.uniform(-2, 2, (2, 3, 6, 6)))
    w = _param(rng.uniform(-1, 1, (4, 3, 3, 3)))
    probe = Tensor(rng.uniform(-1, 1, (2, 4, 3, 3)))
    f = lambda: nx.sum(nx.conv2d(x, w, stride=2, padding=1) * probe)  # noqa: E731
    assert check_gradients(f, [x, w]) < 1e-4


def test_max_pool_gradient_away_from_ties(f64):
    # a permutation of distinct values: no two window entries within 2·step
    vals = Rng(9).permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1
    x = _param(vals)
    f = lambda: nx.sum(nx.max_pool2d(x, 2) * nx.max_pool2d(x, 2))  # noqa: E731
    assert check_gradients(f, [x]) < 1e-4


@given(seed=st.integers(0, 2**32))
def test_random_composite_graph(seed):
    rng = Rng(seed)
    with nx.precision(np.float64):
        a, b = _param(rng.uniform(-2, 2, (3, 4))), _param(rng.uniform(-2, 2, (4, 2)))
        f = lambda: nx.mean(nx.log_softmax(nx.matmul(nx.exp(a * 0.5), b), 1) * nx.sqrt(b * b + 1.0)[:1])  # noqa: E731
        assert check_gradients(f, [a, b]) < 1e-4


# -- determinism ----------------------------------------------------------

def test_rng_identical_streams():
    assert np.array_equal(Rng(42).normal(size=10), Rng(42).normal(size=10))
    assert np.array_equal(Rng(42).child("a", 3).uniform(size=5), Rng(42).child("a", 3).uniform(size=5))


def test_rng_children_independent_of_parent_draws():
    r = Rng(1)
    first = r.child("x").random(4)
    r.random(100)
    np.testing.assert_array_equal(first, r.child("x").random(4))


def test_rng_state_round_trip():
    r = Rng(7)
    r.random(3)
    clone = Rng.from_state(r.state())
    np.testing.assert_array_equal(r.random(5), clone.random(5))


@given(x=arrays(np.float64, (3, 5), elements=st.floats(-2, 2)))
def test_operations_are_deterministic(x):
    t = Tensor(x)
    one = nx.log_softmax(nx.matmul(t, nx.transpose(t)), 1).data
    two = nx.log_softmax(nx.matmul(t, nx.transpose(t)), 1).data
    assert np.array_equal(one, two)
