import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualstudent import ndgrad as nd
from dualstudent.nets import forward, init_mlp
from dualstudent import losses


def fd_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


finite = st.floats(-2.0, 2.0, allow_nan=False)


# tensor construction

def test_tensor_shape_and_finiteness():
    assert nd.tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)
    with pytest.raises(nd.DimensionError):
        nd.tensor([1, 2, 3], (2, 2))
    with pytest.raises(nd.DimensionError):
        nd.tensor([], (0, 2))
    with pytest.raises(nd.DomainError):
        nd.tensor([1.0, np.nan])
    with pytest.raises(nd.DomainError):
        nd.tensor([np.inf])


def test_grad_is_materialized_with_value_shape():
    x = nd.param(np.ones((3, 2)))
    assert not x.has_grad
    assert x.grad.shape == (3, 2)


# matmul

def test_matmul_identity_and_hand_case():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nd.matmul(np.eye(2), m).value, m)
    out = nd.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).value
    assert np.array_equal(out, [[3.0], [7.0]])


def test_matmul_rejects_bad_shapes():
    with pytest.raises(nd.DimensionError):
        nd.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    an = nd.param(a)
    nd.backward(nd.sum_(nd.matmul(an, b)))
    num = fd_grad(lambda v: float(np.sum(v @ b)), a.copy())
    assert rel(an.grad, num) < 1e-6


# elementwise

def test_relu_and_abs_examples():
    assert nd.relu([-3.0]).value[0] == 0.0
    x = nd.param(np.array([2.0, -2.0]))
    nd.backward(nd.sum_(nd.abs_(x)))
    assert np.array_equal(x.grad, [1.0, -1.0])


def test_subgradient_zero_at_kinks():
    x = nd.param(np.array([0.0, 0.0]))
    nd.backward(nd.add(nd.sum_(nd.relu(x)), nd.sum_(nd.abs_(x))))
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_tanh_grad_matches_fd():
    x = np.linspace(-2, 2, 7).reshape(1, 7)
    xn = nd.param(x)
    nd.backward(nd.sum_(nd.tanh(xn)))
    assert rel(xn.grad, fd_grad(lambda v: float(np.tanh(v).sum()), x.copy())) < 1e-6


def test_log_rejects_non_positive():
    with pytest.raises(nd.DomainError):
        nd.log([1.0, 0.0])


def test_elementwise_dispatch():
    assert nd.elementwise("max0", [-1.0, 2.0]).value.tolist() == [0.0, 2.0]
    assert nd.elementwise("mul", [2.0], [3.0]).value.tolist() == [6.0]
    with pytest.raises(ValueError):
        nd.elementwise("sqrt", [1.0])


def test_elementwise_shape_mismatch():
    with pytest.raises(nd.DimensionError):
        nd.add(np.ones((2, 2)), np.ones((2, 3)))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       st.sampled_from(["add", "sub", "mul"]))
def test_binary_ops_match_fd(a, b, op):
    fn = getattr(nd, op)
    w = np.arange(12.0).reshape(3, 4) / 7 - 0.8
    an = nd.param(a)
    nd.backward(nd.sum_(nd.mul(fn(an, b), w)))
    num = fd_grad(lambda v: float(np.sum(fn(v, b).value * w)), a.copy())
    assert np.allclose(an.grad, num, rtol=1e-4, atol=1e-6)


@given(arrays(np.float64, (2, 5), elements=finite), st.sampled_from(["tanh", "exp", "relu", "abs_"]))
def test_unary_ops_match_fd(x, op):
    # keep clear of the kinks, where the subgradient convention and FD disagree
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    fn = getattr(nd, op)
    xn = nd.param(x)
    nd.backward(nd.sum_(fn(xn)))
    num = fd_grad(lambda v: float(fn(v).value.sum()), x.copy())
    assert np.allclose(xn.grad, num, rtol=1e-4, atol=1e-6)


def test_clip_passes_gradient_only_inside():
    x = nd.param(np.array([[-2.0, 0.5, 3.0]]))
    nd.backward(nd.sum_(nd.clip(x, -1.0, 1.0)))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_batch_standardize_stats_and_grad():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(8, 3))
    y = nd.batch_standardize(x).value
    assert np.allclose(y.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(y.std(axis=0), 1, atol=1e-5)
    w = rng.normal(size=(8, 3))
    xn = nd.param(x)
    nd.backward(nd.sum_(nd.mul(nd.batch_standardize(xn), w)))
    num = fd_grad(lambda v: float(np.sum(nd.batch_standardize(v).value * w)), x.copy())
    assert rel(xn.grad, num) < 1e-6


# softmax

def test_softmax_examples():
    assert np.allclose(nd.softmax([[0.0, 0.0]]).value, [[0.5, 0.5]])
    big = nd.softmax([[1000.0, 0.0]]).value
    assert np.all(np.isfinite(big))
    assert big[0, 0] == 1.0 and big[0, 1] < 1e-300 + 1e-400


def test_softmax_vjp_matches_fd():
    rng = np.random.default_rng(1)
    z, w = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    zn = nd.param(z)
    nd.backward(nd.sum_(nd.mul(nd.softmax(zn), w)))
    num = fd_grad(lambda v: float(np.sum(nd.softmax_array(v) * w)), z.copy())
    assert rel(zn.grad, num) < 1e-5


@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(z):
    p = nd.softmax(z).value
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    # strictly positive unless a logit gap makes exp underflow entirely
    assert np.all((p > 0) | (z.max(axis=1, keepdims=True) - z > 700))


def test_softmax_needs_two_classes():
    with pytest.raises(nd.DimensionError):
        nd.softmax([[1.0]])


def test_log_softmax_matches_log_of_softmax():
    z = np.array([[1.0, 2.0, -3.0]])
    assert np.allclose(nd.log_softmax(z).value, np.log(nd.softmax_array(z)))


# backward

@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_backward_of_sum_is_ones(p):
    pn = nd.param(p)
    nd.backward(nd.sum_(pn))
    assert np.array_equal(pn.grad, np.ones_like(p))


@given(arrays(np.float64, (3, 3), elements=finite))
def test_backward_of_half_square_norm_is_identity(p):
    pn = nd.param(p)
    nd.backward(nd.mul(nd.sum_(nd.mul(pn, pn)), 0.5))
    assert np.allclose(pn.grad, p, rtol=0, atol=1e-15)


def test_backward_needs_scalar():
    with pytest.raises(nd.ContractError):
        nd.backward(nd.param(np.ones(3)))


def test_leaf_gradients_accumulate_across_calls():
    x = nd.param(np.array([1.0, 2.0]))
    nd.backward(nd.sum_(x))
    nd.backward(nd.sum_(x))
    assert np.array_equal(x.grad, [2.0, 2.0])
    nd.zero_grads([x])
    assert not x.has_grad


def test_shared_subexpression_counts_both_paths():
    x = nd.param(np.array([3.0]))
    y = nd.mul(x, x)
    nd.backward(nd.sum_(nd.add(y, y)))
    assert np.allclose(x.grad, [12.0])


def test_full_mlp_gradient_matches_fd_on_every_parameter():
    rng = np.random.default_rng(5)
    net = init_mlp([3, 5, 4], seed=11)
    x = rng.uniform(0, 1, size=(6, 3))
    y = np.eye(4)[rng.integers(0, 4, size=6)]
    nd.backward(losses.ce_loss(forward(net, x), y))
    for p in net.parameters():
        analytic = p.grad.copy()

        def f(v, p=p):
            old = p.value
            p.value = v
            out = float(losses.ce_loss(forward(net, x), y).value)
            p.value = old
            return out

        assert rel(analytic, fd_grad(f, p.value.copy())) < 1e-4


def test_evaluation_is_deterministic():
    net = init_mlp([4, 8, 3], seed=2)
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.array_equal(net.predict(x), net.predict(x.copy()))


def test_grad_wrt_returns_value_and_gradient():
    val, g = nd.grad_wrt(lambda v: nd.sum_(nd.mul(v, v)), np.array([1.0, -2.0]))
    assert val == 5.0 and np.array_equal(g, [2.0, -4.0])


def test_graph_is_acyclic():
    x = nd.param(np.ones((2, 2)))
    out = nd.sum_(nd.relu(nd.matmul(x, x)))
    order = nd._topo(out)
    position = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent, _ in node.parents:
            assert position[id(parent)] < position[id(node)]
