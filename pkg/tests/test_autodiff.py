import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pbkl import autodiff as ad
from pbkl.autodiff import Tensor, finite_difference_check
from pbkl.errors import NumericError, ShapeError

rng = np.random.default_rng(1234)


def param(*shape, scale=1.0, positive=False, r=None):
    r = rng if r is None else r
    x = r.normal(size=shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def fd_ok(f, params, tol=1e-4):
    rep = finite_difference_check(f, params)
    assert rep.passed(tol), rep.errors
    return rep


# ---------------------------------------------------------------- forward values


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)


def test_matmul_hand_values():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    assert np.allclose(ad.softmax(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
    assert np.allclose(ad.softmax_rows(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1000, 1000)))
def test_softmax_rows_stochastic(x):
    p = ad.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)


def test_elementwise_examples():
    x = Tensor([1.0, -2.0, 3.0])
    assert np.array_equal(ad.scale(x, 1).data, x.data)
    assert np.allclose(ad.log(ad.softmax(Tensor([[0.0, 0.0]]))).data, np.log(0.5))
    assert ad.mean(Tensor([1.0, 2.0, 3.0])).data == 2.0
    assert float(ad.sum_(x).data) == 2.0


def test_log_floor_and_domain():
    assert np.isclose(ad.log(Tensor([0.0])).data[0], np.log(ad.LOG_EPS))
    with pytest.raises(NumericError):
        ad.log(Tensor([-1.0]))


def test_nonfinite_rejected():
    with pytest.raises(NumericError):
        Tensor([np.nan])
    with pytest.raises(NumericError):
        Tensor([np.inf, 1.0])


def test_suffix_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert ad.add(a, Tensor(np.ones(3))).shape == (2, 3)
    with pytest.raises(ShapeError):
        ad.add(a, Tensor(np.ones((2, 1))))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = param(2, 2)
    ad.backward(ad.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_backward_constant_root():
    c = Tensor(3.0)
    ad.backward(ad.scale(c, 2.0))
    assert c.grad is None


def test_backward_non_scalar_root():
    x = param(2, 2)
    with pytest.raises(ValueError):
        ad.backward(ad.scale(x, 2.0))


def test_backward_twice_rejected():
    x = param(3)
    y = ad.sum_(x * x)
    ad.backward(y)
    with pytest.raises(RuntimeError):
        ad.backward(y)


def test_shared_subexpression_accumulates():
    x = param(4)
    s = ad.exp(x)
    ad.backward(ad.sum_(s * s + s))
    xd = Tensor(x.data.copy(), requires_grad=True)
    a, b = ad.exp(xd), ad.exp(xd)
    c = ad.exp(xd)
    ad.backward(ad.sum_(a * b + c))
    assert np.allclose(x.grad, xd.grad, rtol=1e-12)
    assert np.allclose(x.grad, 2 * np.exp(2 * x.data) + np.exp(x.data))


def test_every_leaf_gets_grad():
    w, b = param(3, 2), param(2)
    ad.backward(ad.sum_(ad.linear(Tensor(rng.normal(size=(4, 3))), w, b)))
    assert w.grad.shape == w.shape and b.grad.shape == b.shape


def test_no_grad_records_nothing():
    x = param(3)
    with ad.no_grad():
        y = ad.sum_(x * x)
    assert not y.requires_grad


# ---------------------------------------------------------------- finite differences


def test_fd_quadratic():
    x = Tensor([3.0], requires_grad=True)
    f = lambda: ad.sum_(x * x)
    ad.backward(f())
    assert np.isclose(x.grad[0], 6.0)
    assert fd_ok(f, [x]).max_rel_error < 1e-8


def test_fd_softmax_cross_entropy():
    logits = param(4, 5)
    onehot = np.eye(5)[rng.integers(5, size=4)]
    f = lambda: ad.neg(ad.mean(ad.sum_(Tensor(onehot) * ad.log(ad.softmax(logits)), axis=-1)))
    fd_ok(f, [logits])


def test_fd_flags_corrupted_rule():
    x = param(5)

    def bad_square(t):
        return Tensor.from_op(t.data ** 2, (t,), lambda g: (g * 3.0 * t.data,), "bad")

    rep = finite_difference_check(lambda: ad.sum_(bad_square(x)), [x])
    assert rep.max_rel_error > 1e-2


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_check(lambda: Tensor(0.0), [], h=0)


def _op_cases(r):
    """One scalar-loss builder per registered op, on a fresh random instance."""
    a, b = param(3, 4, r=r), param(4, 2, r=r)
    x, y = param(2, 3, r=r), param(3, r=r)
    pos = param(2, 3, positive=True, r=r)
    ba, bb = param(2, 3, 4, r=r), param(2, 4, 5, r=r)
    w, bias = param(3, 4, r=r), param(4, r=r)
    table = param(5, 2, 3, r=r)
    idx = [4, 1, 1]
    gamma, beta, xn = param(6, r=r), param(6, r=r), param(4, 6, r=r)
    q, k, v = param(2, 3, 8, r=r), param(2, 5, 8, r=r), param(2, 5, 8, r=r)
    wts = ad.softmax(param(2, 2, 3, 5, r=r))
    z = Tensor(r.normal(size=(2, 3)))
    m22 = Tensor(r.normal(size=(2, 2)))
    cw = Tensor(r.normal(size=(2, 2, 3, 5)))
    return {
        "matmul": (lambda: ad.sum_(ad.matmul(a, b) * ad.matmul(a, b)), [a, b]),
        "batched_matmul": (lambda: ad.sum_(ad.exp(ad.scale(ba @ bb, 0.1))), [ba, bb]),
        "add": (lambda: ad.sum_((x + y) * z), [x, y]),
        "sub": (lambda: ad.sum_((x - y) * z), [x, y]),
        "mul": (lambda: ad.sum_(x * y * z), [x, y]),
        "neg": (lambda: ad.sum_(ad.neg(x) * z), [x]),
        "scale": (lambda: ad.sum_(ad.scale(x, -2.5) * z), [x]),
        "log": (lambda: ad.sum_(ad.log(pos) * z), [pos]),
        "exp": (lambda: ad.sum_(ad.exp(x) * z), [x]),
        "abs": (lambda: ad.sum_(ad.abs_(x) * z), [x]),
        "relu": (lambda: ad.sum_(ad.relu(x) * z), [x]),
        "gelu": (lambda: ad.sum_(ad.gelu(x) * z), [x]),
        "sum_axis": (lambda: ad.sum_(ad.sum_(x, axis=0) * ad.sum_(x, axis=0)), [x]),
        "mean_axis": (lambda: ad.sum_(ad.mean(x, axis=-1) * ad.mean(x, axis=-1)), [x]),
        "reshape": (lambda: ad.sum_(ad.reshape(x, (3, 2)) @ m22), [x]),
        "transpose": (lambda: ad.sum_(ad.transpose(x, (1, 0)) @ m22), [x]),
        "gather_rows": (lambda: ad.sum_(ad.gather_rows(table, idx) * ad.gather_rows(table, idx)), [table]),
        "softmax": (lambda: ad.sum_(ad.softmax(x) * z), [x]),
        "linear": (lambda: ad.sum_(ad.gelu(ad.linear(x, w, bias))), [x, w, bias]),
        "layer_norm": (lambda: ad.sum_(ad.layer_norm(xn, gamma, beta) * Tensor(np.arange(24.0).reshape(4, 6))),
                       [xn, gamma, beta]),
        "attention_weights": (lambda: ad.sum_(ad.attention_weights(q, k, 2) * cw),
                              [q, k]),
        "attend": (lambda: ad.sum_(ad.attend(wts, v) * ad.attend(wts, v)), [v]),
    }


OPS = sorted(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OPS)
def test_op_gradients_match_finite_differences(name):
    for seed in range(10):
        f, params = _op_cases(np.random.default_rng(seed))[name]
        fd_ok(f, params)


def test_attend_gradient_into_weights():
    r = np.random.default_rng(3)
    logits, v = param(1, 2, 3, 4, r=r), param(1, 4, 6, r=r)
    c = Tensor(r.normal(size=(1, 3, 6)))
    fd_ok(lambda: ad.sum_(ad.attend(ad.softmax(logits), v) * c), [logits, v])
