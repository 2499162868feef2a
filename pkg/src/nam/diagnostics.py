"""Gradient checks and invariant checks on small random models.

These back the ``selftest`` command and the acceptance tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .model import (
    LossOptions, NamModel, get_flat, get_flat_grad, pair_backward, pair_forward,
    phase1_pair_loss, phase2_pair_loss, set_flat,
)
from .training import PairExample
from .views import DirectViewTable, ViewId, ViewRegistry

TOY_KINDS = ("cf", "multihot", "dense")


def toy_problem(seed, n_items=6, z_t=4, z_a=4, N=2, dims=(3, 5), absent_prob=0.0,
                perturb=0.3, score_temperature=False):
    """Random 3-view model + registry + one example, for gradient checks.

    Parameters get a random perturbation on top of the initialisation so
    that w, b and the biases are not at their special starting values.
    """
    rng = np.random.default_rng(seed)
    items = [f"t{k}" for k in range(n_items)]
    views = []
    for name, kind in zip(("cf", "tags", "text"), TOY_KINDS):
        d = int(rng.choice(dims))
        rows = {i: rng.standard_normal(d) for i in items
                if i in items[:N + 2] or rng.random() >= absent_prob}
        views.append(DirectViewTable(ViewId(name, kind), d, rows))
    registry = ViewRegistry(views, items)
    model = NamModel.for_registry(registry, z_t=z_t, z_a=z_a, seed=seed,
                                  score_temperature=score_temperature)
    for p in model.params.values():
        p.value[...] += rng.normal(0.0, perturb, p.value.shape)
    example = PairExample(items[0], items[1], tuple(items[2:2 + N]))
    return model, registry, example


def pair_loss_grad_check(model, registry, example, phase, lam=0.1, h=1e-5, tol=1e-4,
                         options=None, names=None, batched=True):
    """Analytic pair-loss gradient against central differences.

    With ``batched`` the differences come from ``stacked_pair_loss``, a
    separate forward implementation that scores every perturbed parameter
    vector in one pass; otherwise from the model's own loss function.
    """
    options = options or LossOptions(stop_gradient_psi=False)
    names = model.param_names() if names is None else names
    x0 = get_flat(model, names)

    def f(x):
        set_flat(model, x, names)
        if phase == 1:
            return phase1_pair_loss(model, example, registry, options)
        return phase2_pair_loss(model, example, registry, lam, options)

    def g(x):
        set_flat(model, x, names)
        model.zero_grad()
        pair_backward(model, example, registry, phase, lam, options)
        return get_flat_grad(model, names)

    def fb(X):
        return stacked_pair_loss(model, registry, example, phase, lam, options, names, X)

    try:
        return cm.grad_check(f, g, x0, h=h, tol=tol, f_batch=fb if batched else None)
    finally:
        set_flat(model, x0, names)
        model.zero_grad()


def _stack_params(model, names, X):
    """name -> (P, *shape) array: rows of X for ``names``, current values elsewhere."""
    P = X.shape[0]
    out, k = {}, 0
    for n in names:
        shape = model.params[n].value.shape
        size = model.params[n].value.size
        out[n] = X[:, k:k + size].reshape((P,) + shape)
        k += size
    for n, p in model.params.items():
        if n not in out:
            out[n] = np.broadcast_to(p.value, (P,) + p.value.shape)
    return out


def _stacked_net(net, W, x):
    # x: (..., d) shared by every parameter set; returns (P, ..., out)
    h = None
    for k, (wn, bn) in enumerate(net.layers):
        if h is None:
            z = np.einsum("poi,...i->p...o", W[wn], x)
        else:
            z = np.einsum("poi,p...i->p...o", W[wn], h)
        z = z + W[bn].reshape(W[bn].shape[:1] + (1,) * (z.ndim - 2) + W[bn].shape[1:])
        h = np.maximum(z, 0.0) if k < len(net.layers) - 1 else z
    return h


def _stacked_cos(u, v):
    nu = np.maximum(np.linalg.norm(u, axis=-1), cm.COSINE_EPS)
    nv = np.maximum(np.linalg.norm(v, axis=-1), cm.COSINE_EPS)
    return np.sum(u * v, axis=-1) / (nu * nv)


def _stacked_sns(x, pos_ok, neg_ok, include_positive):
    # x: (P, M); returns (P,) loss, or None when the example has no valid term
    if not pos_ok or not neg_ok.any():
        return None
    part = np.concatenate([[include_positive], neg_ok])
    cols = x[:, part]
    m = cols.max(axis=1, keepdims=True)
    return -x[:, 0] + m[:, 0] + np.log(np.exp(cols - m).sum(axis=1))


def stacked_pair_loss(model, registry, example, phase, lam=0.1, options=None, names=None,
                      X=None):
    """Pair loss for a stack of parameter vectors X (P x n over ``names``)."""
    options = options or LossOptions()
    names = model.param_names() if names is None else names
    W = _stack_params(model, names, np.atleast_2d(X))
    P = np.atleast_2d(X).shape[0]
    items = [example.target] + list(example.negatives)
    per_view, s_all, g_all, avail = [], [], [], []
    for name in model.view_names:
        table, tower = registry[name], model.towers[name]
        xc = table.get(example.context)
        rows = [table.get(i) for i in items]
        ok = np.array([xc is not None and r is not None for r in rows])
        avail.append(ok)
        if not ok.any():
            s_all.append(np.zeros((P, len(items))))
            g_all.append(np.zeros((P, len(items))))
            continue
        xt = np.array([r if r is not None else np.zeros(table.dim) for r in rows])
        F = _stacked_net(tower.f, W, xc)                 # P x z
        G = _stacked_net(tower.g, W, xt)                 # P x M x z
        s = _stacked_cos(F[:, None, :], G)
        scale = np.exp(W[tower.log_temp])[:, None] if tower.log_temp else 1.0
        lv = _stacked_sns(scale * s, ok[0], ok[1:], options.include_positive_in_partition)
        if lv is not None:
            per_view.append(lv)
        Ac = _stacked_net(tower.alpha, W, xc)
        At = _stacked_net(tower.alpha, W, xt)
        s_all.append(W[tower.w][:, None] * s + W[tower.b][:, None])
        g_all.append(model.attention_scale * _stacked_cos(Ac[:, None, :], At))
    L1 = np.mean(per_view, axis=0) if per_view else np.zeros(P)
    if phase == 1:
        return L1 if per_view else np.full(P, np.nan)
    mu, gamma = np.stack(s_all, -1), np.stack(g_all, -1)    # P x M x H
    mask = np.stack(avail, -1)                                # M x H
    any_view = mask.any(-1)
    logits = np.where(mask, gamma, -np.inf)
    top = np.max(np.where(mask, gamma, -np.inf), axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(logits - top), 0.0)
    a = e / np.maximum(e.sum(-1, keepdims=True), np.finfo(float).tiny)
    psi = np.sum(a * np.where(mask, mu, 0.0), -1)
    l_nam = _stacked_sns(psi, any_view[0], any_view[1:], options.include_positive_in_partition)
    if l_nam is None:
        return np.full(P, np.nan)
    return l_nam + lam * L1


def op_grad_checks(seed=0, h=1e-5, tol=1e-4, instances=20) -> dict:
    """Max relative error per primitive backward op over random instances."""
    rng = np.random.default_rng(seed)
    worst = {"linear": 0.0, "relu": 0.0, "cosine": 0.0, "masked_softmax": 0.0}
    for _ in range(instances):
        n, m = rng.integers(2, 6, size=2)
        W, b, x = rng.standard_normal((m, n)), rng.standard_normal(m), rng.standard_normal(n)
        up = rng.standard_normal(m)
        flat = np.concatenate([W.ravel(), b, x])

        def lin(z):
            return float(up @ cm.linear_forward(z[:m * n].reshape(m, n), z[m * n:m * n + m],
                                                z[m * n + m:]))

        def lin_g(z):
            dW, db, dx = cm.linear_backward(z[:m * n].reshape(m, n), z[m * n:m * n + m],
                                            z[m * n + m:], up)
            return np.concatenate([dW.ravel(), db, dx])

        worst["linear"] = max(worst["linear"], cm.grad_check(lin, lin_g, flat, h, tol).max_rel_error)

        xr = rng.standard_normal(n)
        xr[np.abs(xr) < 10 * h] += 0.1
        upr = rng.standard_normal(n)
        rep = cm.grad_check(lambda z: float(upr @ cm.relu_forward(z)),
                            lambda z: cm.relu_backward(z, upr), xr, h, tol)
        worst["relu"] = max(worst["relu"], rep.max_rel_error)

        u, v = rng.standard_normal(n), rng.standard_normal(n)
        c = rng.standard_normal()
        rep = cm.grad_check(lambda z: c * float(cm.cosine_forward(z[:n], z[n:])),
                            lambda z: np.concatenate(cm.cosine_backward(z[:n], z[n:], c)),
                            np.concatenate([u, v]), h, tol)
        worst["cosine"] = max(worst["cosine"], rep.max_rel_error)

        mask = rng.random(n) < 0.7
        mask[rng.integers(n)] = True
        ups = rng.standard_normal(n)

        def sm(z):
            return float(ups @ cm.masked_softmax(z, mask))

        def sm_g(z):
            return cm.masked_softmax_backward(cm.masked_softmax(z, mask), ups)

        rep = cm.grad_check(sm, sm_g, rng.standard_normal(n), h, tol)
        worst["masked_softmax"] = max(worst["masked_softmax"], rep.max_rel_error)
    return worst


@dataclass
class SelfTestReport:
    max_errors: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def ok(self):
        return not self.failures

    def lines(self):
        for name, err in self.max_errors.items():
            status = "ok" if err <= self.tol else "FAIL"
            yield f"{name:<28} max rel err {err:.3e}  {status}"
        for f in self.failures:
            yield f"FAIL: {f}"


def invariant_checks(n=200, seed=0) -> list:
    """Simplex, masking and shift properties on random toy models; returns failures."""
    rng = np.random.default_rng(seed)
    failures = []
    for k in range(n):
        model, registry, ex = toy_problem(int(rng.integers(1 << 30)), absent_prob=0.4)
        i, j = rng.choice(registry.catalog, size=2, replace=False)
        try:
            br = pair_forward(model, i, j, registry)
        except cm.NoActiveViewError:
            continue
        if np.any(br.a < 0) or np.any(br.a[~br.mask] != 0.0) or \
                abs(br.a[br.mask].sum() - 1.0) > 1e-12:
            failures.append(f"attention simplex violated for pair {i},{j}")
        if abs(br.psi - float(np.sum(br.a * br.mu))) > 1e-12:
            failures.append("psi != sum a*mu")
        h = int(rng.integers(len(model.view_names)))
        name = model.view_names[h]
        if br.mask.sum() > 1 and br.mask[h]:
            masked = pair_forward(model, i, j, registry, disabled={name}).psi
            removed = pair_forward(model.without_view(name), i, j,
                                   registry.without_view(name)).psi
            if abs(masked - removed) > 1e-12:
                failures.append(f"mask-equivalence violated for view {name}")
        c = float(rng.normal())
        shifted = model.copy()
        for t in shifted.towers.values():
            shifted.params[t.b].value += c
        if abs(pair_forward(shifted, i, j, registry).psi - (br.psi + c)) > 1e-12:
            failures.append("shift of b does not shift psi")
    return failures


def selftest(instances=20, seed=0, tol=1e-4, corrupt=False) -> SelfTestReport:
    """Gradient-check and invariant suite. ``corrupt`` perturbs the analytic
    pair gradients, which must make the suite fail."""
    report = SelfTestReport(tol=tol)
    report.max_errors.update({f"op:{k}": v for k, v in op_grad_checks(seed, tol=tol).items()})
    worst = {1: 0.0, 2: 0.0}
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        model, registry, ex = toy_problem(int(rng.integers(1 << 30)))
        for phase in (1, 2):
            rep = pair_loss_grad_check(model, registry, ex, phase, tol=tol)
            err = rep.max_rel_error
            if corrupt:
                bad = rep.analytic * 1.01 + 1e-3
                err = float(np.max(cm.relative_error(bad, rep.numeric)))
            worst[phase] = max(worst[phase], err)
    report.max_errors["phase1_pair_loss"] = worst[1]
    report.max_errors["phase2_pair_loss"] = worst[2]
    for name, err in report.max_errors.items():
        if not err <= tol:
            report.failures.append(f"{name}: max relative error {err:.3e} > {tol:g}")
    report.failures += invariant_checks(n=10 * instances, seed=seed)
    return report
