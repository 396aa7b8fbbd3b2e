import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stemfold import tensor as T
from stemfold.errors import NumericalOverflow
from stemfold.gradcheck import check_gradient
from stemfold.ode import rk4_integrate


def test_zero_dynamics_is_constant():
    z0 = T.Tensor([1.0, 2.0])
    grid = np.linspace(0.0, 1.0, 11)
    states = rk4_integrate(lambda z: z * 0.0, z0, grid)
    assert len(states) == 11
    for s in states:
        np.testing.assert_array_equal(s.data, [1.0, 2.0])


def test_exponential_decay_hits_analytic_value():
    grid = np.linspace(0.0, 1.0, 101)
    states = rk4_integrate(lambda z: -z, T.Tensor([1.0]), grid)
    assert abs(states[-1].data[0] - math.exp(-1.0)) < 1e-9


def test_rk4_empirical_order_four():
    errs = []
    hs = []
    for n in (10, 20, 40, 80):
        grid = np.linspace(0.0, 1.0, n + 1)
        states = rk4_integrate(lambda z: -z, T.Tensor([1.0]), grid)
        errs.append(abs(states[-1].data[0] - math.exp(-1.0)))
        hs.append(1.0 / n)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 4.0) < 0.3


def test_rk4_rejects_bad_grids():
    with pytest.raises(ValueError):
        rk4_integrate(lambda z: -z, T.Tensor([1.0]), [0.0, 1.0, 0.5])
    with pytest.raises(ValueError):
        rk4_integrate(lambda z: -z, T.Tensor([1.0]), [])


def test_rk4_reports_overflow_with_step_index():
    # dz/dt = z^3 from z0=3 blows up quickly
    with pytest.raises(NumericalOverflow, match=r"step \d+"):
        rk4_integrate(lambda z: z * z * z, T.Tensor([3.0]), np.linspace(0, 10, 21))


def test_gradcheck_quadratic():
    p = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)

    def loss():
        return (p * p).sum()

    err = check_gradient(loss, [p])
    assert err < 1e-9
    np.testing.assert_allclose(p.grad, [2.0, 4.0, 6.0], rtol=1e-12)


def test_gradcheck_rejects_nonscalar():
    p = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        check_gradient(lambda: p * p, [p])


def test_gradcheck_through_rk4_step():
    rng = np.random.default_rng(0)
    w = T.Tensor(rng.normal(size=(3, 3)) * 0.4, requires_grad=True)
    z0 = T.Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    readout = T.Tensor(rng.normal(size=(3, 1)))

    def loss():
        states = rk4_integrate(lambda z: z @ w, z0, [0.0, 0.5])
        return (states[-1] @ readout).sum()

    assert check_gradient(loss, [w, z0]) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5],
                               atol=1e-15)
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, math.log(3.0)])).data,
                               [0.25, 0.75], atol=1e-12)
    for c in (-7.3, 0.0, 123.4):
        np.testing.assert_allclose(T.softmax(T.Tensor([c] * 4)).data, [0.25] * 4,
                                   atol=1e-15)


def test_softmax_empty_axis_rejected():
    with pytest.raises(ValueError):
        T.softmax(T.Tensor(np.zeros((3, 0))), axis=-1)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
       st.floats(-100, 100))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_normalized_and_shift_invariant(logits, shift):
    x = T.Tensor(logits)
    y = T.softmax(x).data
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.all((y > 0) & (y < 1 + 1e-15))
    y2 = T.softmax(x + shift).data
    np.testing.assert_allclose(y, y2, atol=1e-12)


def test_masked_softmax_zero_rows_and_exact_zeros():
    scores = T.Tensor(np.arange(6.0).reshape(2, 3))
    mask = np.array([[True, False, True], [False, False, False]])
    y = T.masked_softmax(scores, mask).data
    assert y[0, 1] == 0.0
    assert abs(y[0].sum() - 1.0) < 1e-12
    np.testing.assert_array_equal(y[1], 0.0)


def _scalar_readout(t, seed=0):
    rng = np.random.default_rng(seed)
    r = T.Tensor(rng.normal(size=t.shape))
    return (t * r).sum()


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.transpose(),
    "relu": lambda a, b: T.relu(a - b * 0.3),
    "exp": lambda a, b: T.exp(a * 0.3),
    "log": lambda a, b: T.log(a * a + 1.5),
    "sqrt": lambda a, b: T.sqrt(a * a + 0.7),
    "tanh": lambda a, b: T.tanh(a + b),
    "sigmoid": lambda a, b: T.sigmoid(a - b),
    "softplus": lambda a, b: T.softplus(a * 2.0 - b),
    "sum": lambda a, b: (a + b).sum(axis=1),
    "mean": lambda a, b: (a * b).mean(axis=0),
    "square": lambda a, b: T.square(a + 0.5 * b),
    "pow": lambda a, b: (a * a + 1.0) ** 1.5,
    "softmax": lambda a, b: T.softmax(a, axis=1),
    "concat": lambda a, b: T.concat([a, b], axis=1),
    "stack": lambda a, b: T.stack([a, b], axis=0),
    "reshape": lambda a, b: (a + b).reshape(-1),
    "transpose": lambda a, b: (a * 2.0).transpose(),
    "getitem": lambda a, b: (a + b)[1:, :2],
    "affine": lambda a, b: T.affine(a, b.transpose(), None, relu_out=True),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    op = OPS[name]

    def loss():
        return _scalar_readout(op(a, b), seed=1)

    assert check_gradient(loss, [a, b]) < 1e-6


def test_broadcast_gradients():
    a = T.Tensor(np.random.default_rng(3).normal(size=(4, 5)), requires_grad=True)
    bias = T.Tensor(np.random.default_rng(4).normal(size=(5,)), requires_grad=True)

    def loss():
        return _scalar_readout(a * bias + bias, seed=2)

    assert check_gradient(loss, [a, bias]) < 1e-6


def test_pairwise_relu_sum_matches_composition():
    rng = np.random.default_rng(7)
    b, n, h = 2, 3, 5
    zi = T.Tensor(rng.normal(size=(b, n, h)), requires_grad=True)
    zj = T.Tensor(rng.normal(size=(b, n, h)), requires_grad=True)
    bias = T.Tensor(rng.normal(size=(h,)), requires_grad=True)
    w = rng.random(size=(b, n, n)) * (rng.random(size=(b, n, n)) > 0.4)

    out = T.pairwise_relu_sum(zi, zj, bias, w)
    ref = np.zeros((b, n, h))
    for bb in range(b):
        for i in range(n):
            for j in range(n):
                ref[bb, i] += w[bb, i, j] * np.maximum(
                    zi.data[bb, i] + zj.data[bb, j] + bias.data, 0.0)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def loss():
        return _scalar_readout(T.pairwise_relu_sum(zi, zj, bias, w), seed=5)

    assert check_gradient(loss, [zi, zj, bias]) < 1e-6


def test_ops_deterministic():
    rng = np.random.default_rng(11)
    a = T.Tensor(rng.normal(size=(6, 6)))
    b = T.Tensor(rng.normal(size=(6, 6)))
    r1 = (T.softmax(a @ b) * T.tanh(a)).sum().item()
    r2 = (T.softmax(a @ b) * T.tanh(a)).sum().item()
    assert r1 == r2


def test_no_grad_blocks_tape():
    a = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = (a * a).sum()
    assert not out.requires_grad
    assert out._vjp is None


def test_shared_subexpression_accumulates():
    # y = x*x + x used twice; d/dx = 2x + 1
    x = T.Tensor([3.0], requires_grad=True)
    y = x * x + x
    y.backward()
    np.testing.assert_allclose(x.grad, [7.0])
