import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nam import core_math as cm

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_linear_forward_examples():
    assert np.array_equal(cm.linear_forward(np.eye(2), np.zeros(2), np.array([3.0, 4.0])), [3, 4])
    assert np.array_equal(cm.linear_forward(np.zeros((2, 3)), np.array([1.0, 2.0]),
                                            np.ones(3)), [1, 2])
    out = cm.linear_forward(np.array([[1.0, 2], [3, 4]]), np.ones(2), np.ones(2))
    assert np.array_equal(out, [4, 8])


def test_linear_shape_errors():
    with pytest.raises(cm.ShapeError):
        cm.linear_forward(np.eye(2), np.zeros(2), np.ones(3))
    with pytest.raises(cm.ShapeError):
        cm.linear_forward(np.eye(2), np.zeros(3), np.ones(2))


def test_linear_backward_identity_and_zero(rng):
    W, b, x = np.eye(3), np.zeros(3), rng.standard_normal(3)
    g = rng.standard_normal(3)
    dW, db, dx = cm.linear_backward(W, b, x, g)
    assert np.array_equal(dx, g)
    assert np.array_equal(db, g)
    assert np.allclose(dW, np.outer(g, x))
    for t in cm.linear_backward(W, b, x, np.zeros(3)):
        assert not t.any()


def test_linear_backward_finite_differences(rng):
    m, n = 3, 4
    W, b, x = rng.standard_normal((m, n)), rng.standard_normal(m), rng.standard_normal(n)
    up = rng.standard_normal(m)
    z0 = np.concatenate([W.ravel(), b, x])

    def f(z):
        return float(up @ cm.linear_forward(z[:12].reshape(m, n), z[12:15], z[15:]))

    def g(z):
        return np.concatenate([t.ravel() for t in cm.linear_backward(
            z[:12].reshape(m, n), z[12:15], z[15:], up)])

    assert cm.grad_check(f, g, z0, tol=1e-6).max_rel_error <= 1e-6


def test_relu():
    assert np.array_equal(cm.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = -np.abs(np.arange(1.0, 5.0))
    assert not cm.relu_forward(x).any()
    assert not cm.relu_backward(x, np.ones(4)).any()
    # subgradient at exactly zero is 0
    assert cm.relu_backward(np.array([0.0]), np.array([5.0]))[0] == 0.0


def test_relu_finite_differences(rng):
    x = rng.standard_normal(7)
    x[np.abs(x) < 1e-3] = 0.5
    up = rng.standard_normal(7)
    rep = cm.grad_check(lambda z: float(up @ cm.relu_forward(z)),
                        lambda z: cm.relu_backward(z, up), x)
    assert rep.ok


def test_cosine_examples():
    assert cm.cosine_forward(np.array([1.0, 0]), np.array([0, 1.0])) == 0.0
    x = np.array([0.3, -2.0, 5.0])
    assert cm.cosine_forward(x, x) == pytest.approx(1.0, abs=1e-15)
    assert cm.cosine_forward(np.array([1.0, 1]), np.array([1.0, 0])) == \
        pytest.approx(1 / np.sqrt(2), abs=1e-15)
    with pytest.raises(cm.ShapeError):
        cm.cosine_forward(np.ones(2), np.ones(3))


def test_cosine_zero_vector_is_guarded():
    assert cm.cosine_forward(np.zeros(3), np.ones(3)) == 0.0
    du, dv = cm.cosine_backward(np.zeros(3), np.ones(3), 1.0)
    assert np.all(np.isfinite(du)) and np.all(np.isfinite(dv))


def test_cosine_backward(rng):
    u = rng.standard_normal(5)
    du, dv = cm.cosine_backward(u, u.copy(), 1.0)
    assert np.allclose(du, 0, atol=1e-15) and np.allclose(dv, 0, atol=1e-15)
    du, dv = cm.cosine_backward(u, rng.standard_normal(5), 0.0)
    assert not du.any() and not dv.any()
    v = rng.standard_normal(5)
    rep = cm.grad_check(lambda z: float(cm.cosine_forward(z[:5], z[5:])),
                        lambda z: np.concatenate(cm.cosine_backward(z[:5], z[5:], 1.0)),
                        np.concatenate([u, v]), tol=1e-6)
    assert rep.max_rel_error <= 1e-6


def _mp_softmax(xs):
    e = [mpmath.e ** mpmath.mpf(x) for x in xs]
    s = sum(e)
    return [float(v / s) for v in e]


def test_masked_softmax_examples():
    assert np.allclose(cm.masked_softmax(np.full(3, 0.7), np.ones(3, bool)), 1 / 3, atol=1e-16)
    out = cm.masked_softmax(np.array([5.0, -2.0, 3.0]), np.array([False, True, False]))
    assert np.array_equal(out, [0.0, 1.0, 0.0])
    big = cm.masked_softmax(np.array([1000.0, 1001.0]), np.ones(2, bool))
    assert np.allclose(big, _mp_softmax([1000, 1001]), rtol=0, atol=1e-15)
    assert np.allclose(big, [0.2689, 0.7311], atol=1e-4)


def test_masked_softmax_all_masked():
    with pytest.raises(cm.NoActiveViewError):
        cm.masked_softmax(np.zeros(3), np.zeros(3, bool))


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(bool, 6))
def test_masked_softmax_simplex(logits, mask):
    mask[0] = True
    p = cm.masked_softmax(logits, mask)
    assert np.all(p >= 0)
    assert np.all(p[~mask] == 0.0)
    assert abs(p[mask].sum() - 1.0) <= 1e-12


def test_logsumexp_examples():
    assert cm.logsumexp(np.array([0.0])) == 0.0
    assert cm.logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000 + np.log(2), abs=1e-12)
    oracle = float(mpmath.log(mpmath.e + mpmath.e ** 2 + mpmath.e ** 3))
    assert cm.logsumexp(np.array([1.0, 2.0, 3.0])) == pytest.approx(oracle, abs=1e-14)
    assert oracle == pytest.approx(3.4076, abs=1e-4)
    with pytest.raises(ValueError):
        cm.logsumexp(np.array([]))


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_logsumexp_bounds(v):
    lse = cm.logsumexp(v)
    assert lse >= v.max() - 1e-12
    assert lse <= v.max() + np.log(v.size) + 1e-12


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_cosine_range(u, v):
    c = cm.cosine_forward(u, v)
    assert -1 - 1e-12 <= c <= 1 + 1e-12


def test_adam_zero_grad_is_noop():
    p = cm.Param(np.array([1.0, -2.0]))
    st_ = cm.AdamState.like(p)
    for _ in range(5):
        cm.adam_step(p, st_)
    assert np.array_equal(p.value, [1.0, -2.0])
    assert st_.step_count == 5


def test_adam_first_step_moves_by_lr():
    # at t=1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = cm.Param(np.zeros(3))
    p.grad[...] = [0.5, -3.0, 1e-2]
    st_ = cm.AdamState.like(p, lr=1e-3)
    cm.adam_step(p, st_)
    g = np.array([0.5, -3.0, 1e-2])
    assert np.allclose(p.value, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.array_equal(p.grad, g)   # caller zeroes


def test_adam_constant_grad_monotone():
    p = cm.Param(np.zeros(1))
    st_ = cm.AdamState.like(p, lr=0.01)
    trace = []
    for _ in range(100):
        p.grad[...] = 2.0
        cm.adam_step(p, st_)
        trace.append(p.value[0])
    assert np.all(np.diff(trace) < 0)


def test_adam_deterministic(rng):
    g = rng.standard_normal(4)
    outs = []
    for _ in range(2):
        p = cm.Param(np.ones(4))
        s = cm.AdamState.like(p)
        for _ in range(3):
            p.grad[...] = g
            cm.adam_step(p, s)
        outs.append(p.value.tobytes())
    assert outs[0] == outs[1]


def test_grad_check_square_norm(rng):
    x = rng.standard_normal(6)
    rep = cm.grad_check(lambda z: float(z @ z), lambda z: 2 * z, x)
    assert rep.max_rel_error < 1e-8 and rep.ok and not rep.flagged.any()


def test_grad_check_flags_wrong_gradient(rng):
    x = rng.standard_normal(4)
    rep = cm.grad_check(lambda z: float(z @ z), lambda z: 2 * z + 0.1, x)
    assert not rep.ok


def test_grad_check_cosine_of_linear(rng):
    W = rng.standard_normal((3, 4))
    b, v = rng.standard_normal(3), rng.standard_normal(3)

    def f(x):
        return float(cm.cosine_forward(cm.linear_forward(W, b, x), v))

    def g(x):
        y = cm.linear_forward(W, b, x)
        du, _ = cm.cosine_backward(y, v, 1.0)
        return cm.linear_backward(W, b, x, du)[2]

    assert cm.grad_check(f, g, rng.standard_normal(4)).ok


def test_masked_softmax_backward_matches_fd(rng):
    mask = np.array([True, False, True, True])
    up = rng.standard_normal(4)
    rep = cm.grad_check(lambda z: float(up @ cm.masked_softmax(z, mask)),
                        lambda z: cm.masked_softmax_backward(cm.masked_softmax(z, mask), up),
                        rng.standard_normal(4))
    assert rep.ok
