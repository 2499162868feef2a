"""The attentive multiview network: towers, pair scores, losses and gradients.

Per view h the model holds a context net f, a target net g (both into z_t),
an attention net alpha (into z_a) and a scalar affine pair (w, b). For a pair
(i, j) it computes

    s_h   = cos(f_h(x_i), g_h(x_j))
    gamma = cos(alpha_h(x_i), alpha_h(x_j))
    a     = softmax of gamma over views available for both items
    mu_h  = w_h * s_h + b_h
    psi   = sum_h a_h * mu_h

Training code works on minibatches: a context item against a row of M
candidates (the positive target first, then N negatives).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_math import (
    NoActiveViewError, Param, ShapeError, cosine_backward, cosine_forward,
    linear_backward, linear_forward, logsumexp, masked_softmax, relu_backward,
    relu_forward, xavier_uniform,
)
from .views import ViewId, ViewRegistry


class Net:
    """Either a single linear layer or linear -> ReLU -> linear."""

    def __init__(self, params: dict, prefix: str, arch: str, in_dim: int, out_dim: int):
        if arch not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture {arch!r}")
        self.params = params
        self.prefix = prefix
        self.arch = arch
        self.in_dim = in_dim
        self.out_dim = out_dim

    @property
    def layers(self):
        n = 1 if self.arch == "linear" else 2
        return [(f"{self.prefix}.W{k}", f"{self.prefix}.b{k}") for k in range(1, n + 1)]

    @property
    def param_names(self):
        return [name for pair in self.layers for name in pair]

    def init(self, rng):
        dims = [self.in_dim] + [self.out_dim] * len(self.layers)
        for (wn, bn), fan_in, fan_out in zip(self.layers, dims[:-1], dims[1:]):
            self.params[wn] = Param(xavier_uniform(rng, fan_out, fan_in))
            self.params[bn] = Param(np.zeros(fan_out))

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.prefix}: input length {x.shape[-1]}, expected {self.in_dim}")
        cache = []
        h = x
        for k, (wn, bn) in enumerate(self.layers):
            W, b = self.params[wn].value, self.params[bn].value
            z = linear_forward(W, b, h)
            cache.append((h, z))
            h = relu_forward(z) if k < len(self.layers) - 1 else z
        return h, cache

    def backward(self, cache, upstream):
        g = upstream
        for k in range(len(self.layers) - 1, -1, -1):
            wn, bn = self.layers[k]
            h, z = cache[k]
            if k < len(self.layers) - 1:
                g = relu_backward(z, g)
            dW, db, g = linear_backward(self.params[wn].value, self.params[bn].value, h, g)
            self.params[wn].grad += dW
            self.params[bn].grad += db


class ViewTower:
    def __init__(self, params, view: ViewId, z_h: int, z_t: int, z_a: int,
                 score_temperature=False):
        self.view = view
        self.z_h = z_h
        arch = "linear" if view.kind == "cf" else "mlp"
        self.arch = arch
        name = view.name
        self.f = Net(params, f"{name}.f", arch, z_h, z_t)
        self.g = Net(params, f"{name}.g", arch, z_h, z_t)
        self.alpha = Net(params, f"{name}.alpha", "linear", z_h, z_a)
        self.w, self.b = f"{name}.w", f"{name}.b"
        self.log_temp = f"{name}.log_temp" if score_temperature else None
        self.params = params

    @property
    def embedding_params(self):
        names = self.f.param_names + self.g.param_names
        return names + ([self.log_temp] if self.log_temp else [])

    @property
    def attention_params(self):
        return self.alpha.param_names + [self.w, self.b]

    @property
    def param_names(self):
        return self.embedding_params + self.attention_params

    def init(self, rng):
        self.f.init(rng)
        self.g.init(rng)
        self.alpha.init(rng)
        self.params[self.w] = Param(np.array(1.0))
        self.params[self.b] = Param(np.array(0.0))
        if self.log_temp:
            self.params[self.log_temp] = Param(np.array(0.0))

    def score_scale(self):
        return float(np.exp(self.params[self.log_temp].value)) if self.log_temp else 1.0


class NamModel:
    def __init__(self, views: Sequence[ViewId], dims: dict, z_t=100, z_a=None,
                 score_temperature=False, attention_scale=1.0):
        if z_t <= 0 or (z_a is not None and z_a <= 0):
            raise ValueError("z_t and z_a must be positive")
        self.view_order = list(views)
        self.dims = dict(dims)
        self.z_t = z_t
        self.z_a = z_t if z_a is None else z_a
        self.score_temperature = score_temperature
        # fixed multiplier on the cosine attention logits; 1.0 is the plain cosine
        self.attention_scale = float(attention_scale)
        self.params: dict[str, Param] = {}
        self.towers = {v.name: ViewTower(self.params, v, self.dims[v.name], self.z_t,
                                         self.z_a, score_temperature)
                       for v in self.view_order}

    @classmethod
    def for_registry(cls, registry: ViewRegistry, z_t=100, z_a=None, seed=0,
                     score_temperature=False, attention_scale=1.0) -> "NamModel":
        model = cls([v.view for v in registry.views], {v.name: v.dim for v in registry.views},
                    z_t, z_a, score_temperature, attention_scale)
        model.init(seed)
        return model

    def init(self, seed=0):
        rng = np.random.default_rng(seed)
        for name in self.view_names:
            self.towers[name].init(rng)
        return self

    @property
    def view_names(self):
        return [v.name for v in self.view_order]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def param_names(self, views=None, group="all"):
        out = []
        for name in (self.view_names if views is None else views):
            t = self.towers[name]
            out += {"all": t.param_names, "embedding": t.embedding_params,
                    "attention": t.attention_params}[group]
        return out

    def copy(self) -> "NamModel":
        return copy.deepcopy(self)

    def without_view(self, name) -> "NamModel":
        keep = [v for v in self.view_order if v.name != name]
        if len(keep) == len(self.view_order):
            raise KeyError(f"view {name!r} not in model")
        other = NamModel(keep, {v.name: self.dims[v.name] for v in keep}, self.z_t,
                         self.z_a, self.score_temperature, self.attention_scale)
        for pname in other.param_names():
            other.params[pname] = copy.deepcopy(self.params[pname])
        other.towers = {v.name: ViewTower(other.params, v, other.dims[v.name], other.z_t,
                                          other.z_a, other.score_temperature) for v in keep}
        return other

    def check_registry(self, registry: ViewRegistry):
        got = [(v.view.name, v.view.kind, v.dim) for v in registry.views]
        want = [(v.name, v.kind, self.dims[v.name]) for v in self.view_order]
        if got != want:
            raise ShapeError(f"model views {want} do not match registry views {got}")

    # -- single-vector embeddings -------------------------------------------

    def embed_context(self, view, direct_vector):
        return self.towers[view].f.forward(np.asarray(direct_vector, dtype=np.float64))[0]

    def embed_target(self, view, direct_vector):
        return self.towers[view].g.forward(np.asarray(direct_vector, dtype=np.float64))[0]

    def embed_attention(self, view, direct_vector):
        return self.towers[view].alpha.forward(np.asarray(direct_vector, dtype=np.float64))[0]


def view_score(f_i, g_j):
    return float(cosine_forward(f_i, g_j))


def attention_logit(alpha_i, alpha_j):
    return float(cosine_forward(alpha_i, alpha_j))


# -- single pair --------------------------------------------------------------

@dataclass
class PairScoreBreakdown:
    views: list
    s: np.ndarray
    gamma: np.ndarray
    a: np.ndarray
    mu: np.ndarray
    psi: float
    mask: np.ndarray

    def as_dict(self):
        return {v: dict(s=self.s[k], gamma=self.gamma[k], a=self.a[k], mu=self.mu[k],
                        available=bool(self.mask[k])) for k, v in enumerate(self.views)}


def pair_forward(model: NamModel, item_i, item_j, registry: ViewRegistry,
                 disabled=()) -> PairScoreBreakdown:
    """Score one pair view by view. Views missing for either item are masked."""
    H = len(model.view_names)
    s, gamma, mu = np.zeros(H), np.zeros(H), np.zeros(H)
    mask = np.zeros(H, dtype=bool)
    for k, name in enumerate(model.view_names):
        table = registry[name]
        xi, xj = table.get(item_i), table.get(item_j)
        if xi is None or xj is None or name in disabled:
            continue
        mask[k] = True
        tower = model.towers[name]
        s[k] = view_score(model.embed_context(name, xi), model.embed_target(name, xj))
        gamma[k] = model.attention_scale * attention_logit(
            model.embed_attention(name, xi), model.embed_attention(name, xj))
        mu[k] = model.params[tower.w].value * s[k] + model.params[tower.b].value
    if not mask.any():
        raise NoActiveViewError(f"items {item_i!r} and {item_j!r} share no view")
    a = masked_softmax(gamma, mask)
    psi = float(np.sum(a[mask] * mu[mask]))
    return PairScoreBreakdown(model.view_names, s, gamma, a, mu, psi, mask)


# -- losses ---------------------------------------------------------------------

def sns_loss_view(s_pos, s_negs, include_positive=False) -> float:
    """-s_pos + log sum_k exp(s_neg_k); the positive is outside the partition
    unless ``include_positive`` is set."""
    s_negs = np.atleast_1d(np.asarray(s_negs, dtype=np.float64))
    if s_negs.size == 0:
        raise ValueError("SNS loss needs at least one negative")
    part = np.concatenate([[s_pos], s_negs]) if include_positive else s_negs
    return float(-s_pos + logsumexp(part))


sns_loss_nam = sns_loss_view


def _sns_rows(x, pos_ok, neg_ok, include_positive):
    """Row-wise SNS loss on x[:, 0] (positive) vs x[:, 1:] (negatives).

    Returns (loss, dloss/dx, row_valid); invalid rows carry zero loss and grad.
    """
    part = neg_ok.copy()
    if include_positive:
        part = np.concatenate([pos_ok[:, None], part], axis=1)
        cols = x
    else:
        cols = x[:, 1:]
    valid = pos_ok & neg_ok.any(axis=1)
    part &= valid[:, None]
    lse = np.where(valid, logsumexp(cols, axis=1, mask=part | ~valid[:, None]), 0.0)
    loss = np.where(valid, -x[:, 0] + lse, 0.0)
    p = np.where(part, np.exp(np.where(part, cols - lse[:, None], 0.0)), 0.0)
    grad = np.zeros_like(x)
    if include_positive:
        grad += p
    else:
        grad[:, 1:] += p
    grad[:, 0] -= valid
    return loss, grad, valid


@dataclass
class LossOptions:
    stop_gradient_psi: bool = True
    include_positive_in_partition: bool = False


@dataclass
class BatchResult:
    loss: float
    n_valid: int
    n_skipped: int
    per_example: np.ndarray
    valid: np.ndarray
    attention: Optional[np.ndarray] = None   # B x M x H
    psi: Optional[np.ndarray] = None         # B x M
    view_losses: dict = field(default_factory=dict)


def batch_loss(model: NamModel, registry: ViewRegistry, ctx, cand, phase: int,
               lam=0.1, options: LossOptions = None, backward=True, disabled=(),
               views=None) -> BatchResult:
    """Mean pair loss over a minibatch, optionally accumulating gradients.

    ``ctx`` holds B catalog indices, ``cand`` is B x M with the positive
    target in column 0. Phase 1 is the per-pair average over available views
    of the per-view SNS losses; phase 2 adds the SNS loss on psi and weights
    the phase-1 term by ``lam``. Examples without any usable view are skipped.
    ``views`` restricts which towers receive gradient.
    """
    options = options or LossOptions()
    ctx = np.asarray(ctx)
    cand = np.asarray(cand)
    B, M = cand.shape
    names = model.view_names
    H = len(names)
    grad_views = set(names if views is None else views)

    per_view = []
    ok = np.zeros((B, H), dtype=bool)
    losses = np.zeros((B, H))
    for h, name in enumerate(names):
        X, P = registry.dense(name)
        tower = model.towers[name]
        xc, xt = X[ctx], X[cand]
        mask = P[ctx][:, None] & P[cand]
        if name in disabled:
            mask[:] = False
        F, cf = tower.f.forward(xc)
        G, cg = tower.g.forward(xt)
        s = cosine_forward(F[:, None, :], G)
        scale = tower.score_scale()
        l_h, dl_h, ok[:, h] = _sns_rows(scale * s, mask[:, 0], mask[:, 1:],
                                        options.include_positive_in_partition)
        losses[:, h] = l_h
        per_view.append(dict(xc=xc, xt=xt, mask=mask, F=F, G=G, cf=cf, cg=cg, s=s,
                             scale=scale, dl=dl_h))

    cnt = ok.sum(axis=1)
    L1 = np.where(cnt > 0, np.sum(np.where(ok, losses, 0.0), axis=1) / np.maximum(cnt, 1), 0.0)
    result_attention = result_psi = None

    if phase == 1:
        valid = cnt > 0
        per_example = L1
    else:
        mask_all = np.stack([pv["mask"] for pv in per_view], axis=2)   # B x M x H
        gamma = np.zeros((B, M, H))
        mu = np.zeros((B, M, H))
        att_cache = []
        for h, name in enumerate(names):
            tower = model.towers[name]
            pv = per_view[h]
            Ac, cac = tower.alpha.forward(pv["xc"])
            At, cat = tower.alpha.forward(pv["xt"])
            gamma[:, :, h] = model.attention_scale * cosine_forward(Ac[:, None, :], At)
            w = model.params[tower.w].value
            mu[:, :, h] = w * pv["s"] + model.params[tower.b].value
            att_cache.append((Ac, At, cac, cat))
        any_view = mask_all.any(axis=2)
        safe = np.where(any_view[:, :, None], mask_all, True)
        a = np.where(any_view[:, :, None], masked_softmax(gamma, safe), 0.0)
        psi = np.sum(a * mu, axis=2)
        l_nam, dpsi_row, valid = _sns_rows(psi, any_view[:, 0], any_view[:, 1:],
                                           options.include_positive_in_partition)
        per_example = l_nam + lam * L1
        result_attention, result_psi = a, psi

    n_valid = int(valid.sum())
    loss = float(per_example[valid].sum() / n_valid) if n_valid else 0.0
    result = BatchResult(loss, n_valid, B - n_valid, per_example, valid,
                         result_attention, result_psi,
                         {n: losses[:, h] for h, n in enumerate(names)})
    if not backward or n_valid == 0:
        return result

    scale_ex = np.where(valid, 1.0 / n_valid, 0.0)
    w1 = scale_ex * (1.0 if phase == 1 else lam)
    for h, name in enumerate(names):
        if name not in grad_views:
            continue
        tower = model.towers[name]
        pv = per_view[h]
        # phase-1 term
        coef = np.where(ok[:, h], w1 / np.maximum(cnt, 1), 0.0)
        dx = coef[:, None] * pv["dl"]                   # d/d(scale*s)
        ds = pv["scale"] * dx
        if tower.log_temp:
            model.params[tower.log_temp].grad += np.sum(dx * pv["scale"] * pv["s"])
        if phase == 2:
            dpsi = scale_ex[:, None] * dpsi_row         # B x M
            a_h = result_attention[:, :, h]
            dmu = a_h * dpsi
            model.params[tower.w].grad += np.sum(dmu * pv["s"])
            model.params[tower.b].grad += np.sum(dmu)
            if not options.stop_gradient_psi:
                ds = ds + model.params[tower.w].value * dmu
            dgamma = a_h * (mu[:, :, h] - result_psi) * dpsi
            Ac, At, cac, cat = att_cache[h]
            dAc, dAt = cosine_backward(Ac[:, None, :], At, model.attention_scale * dgamma)
            tower.alpha.backward(cac, dAc.sum(axis=1))
            tower.alpha.backward(cat, dAt)
        dF, dG = cosine_backward(pv["F"][:, None, :], pv["G"], ds)
        tower.f.backward(pv["cf"], dF.sum(axis=1))
        tower.g.backward(pv["cg"], dG)
    return result


# -- single-example wrappers ----------------------------------------------------

def _example_indices(registry, example):
    idx = registry.index
    ctx = np.array([idx[example.context]])
    cand = np.array([[idx[example.target]] + [idx[n] for n in example.negatives]])
    return ctx, cand


def _single(model, example, registry, phase, lam, options, backward, disabled=()):
    ctx, cand = _example_indices(registry, example)
    res = batch_loss(model, registry, ctx, cand, phase, lam, options, backward, disabled)
    if res.n_valid == 0:
        raise NoActiveViewError(
            f"pair ({example.context!r}, {example.target!r}) has no usable view")
    return res


def phase1_pair_loss(model, example, registry, options=None) -> float:
    return _single(model, example, registry, 1, 0.0, options, False).loss


def phase2_pair_loss(model, example, registry, lam=0.1, options=None) -> float:
    return _single(model, example, registry, 2, lam, options, False).loss


def pair_backward(model, example, registry, phase, lam=0.1, options=None, upstream=1.0):
    """Accumulate gradients of ``upstream * loss`` for one example into the model."""
    if upstream == 0.0:
        return
    if upstream != 1.0:
        saved = {n: p.grad.copy() for n, p in model.params.items()}
        model.zero_grad()
    _single(model, example, registry, phase, lam, options, True)
    if upstream != 1.0:
        for n, p in model.params.items():
            p.grad *= upstream
            p.grad += saved[n]


# -- flat parameter vectors (gradient checks) -------------------------------------

def get_flat(model: NamModel, names=None) -> np.ndarray:
    names = model.param_names() if names is None else names
    return np.concatenate([model.params[n].value.ravel() for n in names])


def set_flat(model: NamModel, flat, names=None):
    names = model.param_names() if names is None else names
    k = 0
    for n in names:
        p = model.params[n]
        size = p.value.size
        p.value[...] = np.asarray(flat[k:k + size]).reshape(p.value.shape)
        k += size


def get_flat_grad(model: NamModel, names=None) -> np.ndarray:
    names = model.param_names() if names is None else names
    return np.concatenate([model.params[n].grad.ravel() for n in names])
