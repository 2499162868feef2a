"""Dense numeric kernel: the handful of differentiable ops the model needs.

Every forward op works on the last axis and broadcasts over leading axes, so
the same functions serve single vectors and whole minibatches. Backward ops
return gradients with respect to their inputs; nothing here keeps a tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

COSINE_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NoActiveViewError(ValueError):
    """Raised when a softmax or pair score has no unmasked entry."""


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


# -- linear ------------------------------------------------------------------

def linear_forward(W, b, x):
    W, b, x = _as_f64(W), _as_f64(b), _as_f64(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"linear: W{W.shape}, b{b.shape}, x{x.shape} are not compatible")
    return x @ W.T + b


def linear_backward(W, b, x, upstream):
    """Gradients of ``W x + b``; leading axes of ``x``/``upstream`` are summed."""
    W, x, upstream = _as_f64(W), _as_f64(x), _as_f64(upstream)
    if x.shape[-1] != W.shape[1] or upstream.shape[-1] != W.shape[0] \
            or x.shape[:-1] != upstream.shape[:-1]:
        raise ShapeError(
            f"linear backward: W{W.shape}, x{x.shape}, upstream{upstream.shape}")
    up2 = upstream.reshape(-1, W.shape[0])
    x2 = x.reshape(-1, W.shape[1])
    dW = up2.T @ x2
    db = up2.sum(axis=0)
    dx = upstream @ W
    return dW, db, dx


# -- relu --------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x, upstream):
    # subgradient at exactly 0 is 0
    return np.where(_as_f64(x) > 0.0, _as_f64(upstream), 0.0)


# -- cosine ------------------------------------------------------------------

def cosine_forward(u, v):
    u, v = _as_f64(u), _as_f64(v)
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError(f"cosine: lengths {u.shape[-1]} and {v.shape[-1]} differ")
    nu = np.maximum(np.linalg.norm(u, axis=-1), COSINE_EPS)
    nv = np.maximum(np.linalg.norm(v, axis=-1), COSINE_EPS)
    return np.sum(u * v, axis=-1) / (nu * nv)


def cosine_backward(u, v, upstream):
    u, v, upstream = _as_f64(u), _as_f64(v), _as_f64(upstream)
    u, v = np.broadcast_arrays(u, v)
    raw_u = np.linalg.norm(u, axis=-1, keepdims=True)
    raw_v = np.linalg.norm(v, axis=-1, keepdims=True)
    nu = np.maximum(raw_u, COSINE_EPS)
    nv = np.maximum(raw_v, COSINE_EPS)
    c = (np.sum(u * v, axis=-1, keepdims=True) / (nu * nv))
    up = upstream[..., None]
    # where the eps guard is active the norm is a constant
    du = up * (v / (nu * nv) - np.where(raw_u > COSINE_EPS, c * u / nu**2, 0.0))
    dv = up * (u / (nu * nv) - np.where(raw_v > COSINE_EPS, c * v / nv**2, 0.0))
    return du, dv


# -- softmax family ----------------------------------------------------------

def masked_softmax(logits, mask, axis=-1):
    """Softmax over the entries where ``mask`` is true; masked entries are 0.

    Raises NoActiveViewError if any slice along ``axis`` is fully masked.
    """
    logits = _as_f64(logits)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ShapeError(f"masked_softmax: logits{logits.shape} vs mask{mask.shape}")
    if not np.all(np.any(mask, axis=axis)):
        raise NoActiveViewError("masked_softmax: every entry is masked")
    shifted = np.where(mask, logits, -np.inf)
    m = np.max(shifted, axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, logits - m, 0.0)), 0.0)
    return e / np.sum(e, axis=axis, keepdims=True)


def masked_softmax_backward(probs, upstream, axis=-1):
    """Vector-Jacobian product of masked_softmax given its output."""
    probs, upstream = _as_f64(probs), _as_f64(upstream)
    inner = np.sum(probs * upstream, axis=axis, keepdims=True)
    return probs * (upstream - inner)


def logsumexp(values, axis=-1, mask=None):
    values = _as_f64(values)
    if values.size == 0 or values.shape[axis] == 0:
        raise ValueError("logsumexp of an empty vector")
    if mask is None:
        m = np.max(values, axis=axis, keepdims=True)
        out = m + np.log(np.sum(np.exp(values - m), axis=axis, keepdims=True))
        return np.squeeze(out, axis=axis)[()]
    mask = np.asarray(mask, dtype=bool)
    m = np.max(np.where(mask, values, -np.inf), axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.where(mask, np.exp(np.where(mask, values - m_safe, 0.0)), 0.0),
               axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(s)
    return np.squeeze(out, axis=axis)[()]


# -- parameters and Adam -----------------------------------------------------

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param: Param, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **hyper)


def adam_step(param: Param, state: AdamState) -> None:
    """One bias-corrected Adam update, in place. The gradient is left as is."""
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    param.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


class Adam:
    """Adam over a name -> Param mapping; state is created lazily."""

    def __init__(self, params: dict[str, Param], lr=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = params
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.states: dict[str, AdamState] = {}

    def step(self, names=None):
        for name in (self.params if names is None else names):
            p = self.params[name]
            if name not in self.states:
                self.states[name] = AdamState.like(p, **self.hyper)
            adam_step(p, self.states[name])

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.flatnonzero(self.rel_error > self.tol)

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0

    @property
    def ok(self) -> bool:
        return self.flagged.size == 0


def relative_error(a, b, floor=1e-6):
    a, b = _as_f64(a), _as_f64(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
               point, h=1e-5, tol=1e-4, floor=1e-6, f_batch=None, chunk=1024) -> GradCheckReport:
    """Compare ``grad(point)`` with central differences of ``f``.

    ``f`` maps a flat float64 vector to a scalar. Relative errors use
    ``max(|analytic|, |numeric|, floor)`` as the denominator so that
    coordinates with vanishing gradient are judged on absolute error.
    ``f_batch``, if given, maps a (P, n) stack of points to P values and is
    used instead of ``f`` to evaluate all perturbed points at once.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = _as_f64(point).ravel().copy()
    analytic = _as_f64(grad(x.copy())).ravel()
    if f_batch is not None:
        n = x.size
        plus = np.tile(x, (n, 1))
        plus[np.arange(n), np.arange(n)] += h
        minus = np.tile(x, (n, 1))
        minus[np.arange(n), np.arange(n)] -= h
        pts = np.concatenate([plus, minus])
        vals = np.concatenate([_as_f64(f_batch(pts[k:k + chunk]))
                               for k in range(0, pts.shape[0], chunk)])
        numeric = (vals[:n] - vals[n:]) / (2.0 * h)
        return GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol)
    numeric = np.empty_like(x)
    for k in range(x.size):
        old = x[k]
        x[k] = old + h
        fp = f(x.copy())
        x[k] = old - h
        fm = f(x.copy())
        x[k] = old
        numeric[k] = (fp - fm) / (2.0 * h)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))
