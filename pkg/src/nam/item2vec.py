"""item2vec: skip-gram with negative sampling over item baskets.

Every ordered pair of distinct items in a basket is a positive; there is no
window. Negatives come from the unigram distribution raised to 0.75 and are
redrawn when they land inside the current basket.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .views import DirectViewTable, ViewId, sort_items

log = logging.getLogger(__name__)


@dataclass
class BasketDataset:
    baskets: list  # list of tuples of item ids, deduplicated and sorted
    ids: list = field(default_factory=list)
    dropped: int = 0

    def __len__(self):
        return len(self.baskets)

    def items(self) -> list:
        return sort_items({i for b in self.baskets for i in b})


def build_baskets(user_histories: Mapping | Iterable) -> BasketDataset:
    """One deduplicated basket per user or session; singletons are dropped."""
    pairs = user_histories.items() if isinstance(user_histories, Mapping) \
        else enumerate(user_histories)
    baskets, ids, dropped = [], [], 0
    for uid, items in pairs:
        basket = tuple(sort_items(set(items)))
        if len(basket) < 2:
            dropped += 1
            continue
        baskets.append(basket)
        ids.append(uid)
    if dropped:
        log.info("dropped %d baskets with fewer than 2 distinct items", dropped)
    return BasketDataset(baskets, ids, dropped)


class UnigramTable:
    def __init__(self, counts: np.ndarray, power: float = 0.75):
        counts = np.asarray(counts, dtype=np.float64)
        self.support = np.flatnonzero(counts > 0)
        self.weights = counts[self.support] ** power
        self.cumulative = np.cumsum(self.weights)

    @property
    def probabilities(self):
        return self.weights / self.cumulative[-1]

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.random(size) * self.cumulative[-1]
        k = np.searchsorted(self.cumulative, u, side="right")
        return self.support[np.minimum(k, self.support.size - 1)]


@dataclass
class I2VModel:
    target_emb: np.ndarray
    context_emb: np.ndarray
    catalog: list
    seen: np.ndarray
    seed: int = 0
    loss_trace: list = field(default_factory=list)

    @property
    def d(self):
        return self.target_emb.shape[1]


def ordered_pairs(baskets, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (center, context, basket) index triples; s*(s-1) per basket."""
    centers, contexts, owners = [], [], []
    for b, basket in enumerate(baskets):
        ids = np.array([index[i] for i in basket])
        s = ids.size
        c, o = np.meshgrid(ids, ids, indexing="ij")
        off = ~np.eye(s, dtype=bool)
        centers.append(c[off])
        contexts.append(o[off])
        owners.append(np.full(s * (s - 1), b))
    if not centers:
        return (np.empty(0, int),) * 3
    return np.concatenate(centers), np.concatenate(contexts), np.concatenate(owners)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_sgns(baskets: BasketDataset, d=100, epochs=5, neg_ratio=5, lr=0.025,
               seed=0, catalog=None, batch_size=256, min_lr_fraction=1e-4) -> I2VModel:
    """Train item embeddings with plain SGD and a linearly decaying rate.

    Updates are applied per minibatch of positive pairs in a fixed order, so a
    given seed always reproduces the same embeddings.
    """
    if d <= 0 or neg_ratio < 1:
        raise ValueError("need d > 0 and neg_ratio >= 1")
    if len(baskets) == 0:
        raise ValueError("cannot train item2vec on an empty basket dataset")
    catalog = sort_items(set(catalog or ()) | set(baskets.items()))
    index = {item: k for k, item in enumerate(catalog)}
    K = len(catalog)
    rng = np.random.default_rng(seed)
    bound = 0.5 / d
    target = rng.uniform(-bound, bound, size=(K, d))
    context = rng.uniform(-bound, bound, size=(K, d))

    counts = np.zeros(K)
    for basket in baskets.baskets:
        for item in basket:
            counts[index[item]] += 1
    table = UnigramTable(counts)
    centers, contexts, owners = ordered_pairs(baskets.baskets, index)
    basket_keys = _basket_membership(baskets.baskets, index, K)

    model = I2VModel(target, context, catalog, counts > 0, seed)
    n = centers.size
    total_steps = max(epochs * n, 1)
    done = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            c, o, own = centers[sel], contexts[sel], owners[sel]
            negs = _draw_negatives(table, rng, own, basket_keys, K, neg_ratio)
            step_lr = lr * max(1.0 - done / total_steps, min_lr_fraction)
            epoch_loss += _sgns_update(target, context, c, o, negs, step_lr)
            done += sel.size
        model.loss_trace.append(epoch_loss / n)
        log.debug("item2vec epoch %d loss %.5f", epoch + 1, model.loss_trace[-1])
    return model


def _basket_membership(baskets, index, K):
    keys = [b * K + index[i] for b, basket in enumerate(baskets) for i in basket]
    return np.sort(np.array(keys, dtype=np.int64))


def _in_sorted(sorted_keys, keys):
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, sorted_keys.size - 1)
    return sorted_keys[pos] == keys


def _draw_negatives(table, rng, owners, basket_keys, K, neg_ratio, max_rounds=50):
    negs = table.sample(rng, (owners.size, neg_ratio))
    for _ in range(max_rounds):
        bad = _in_sorted(basket_keys, owners[:, None].astype(np.int64) * K + negs)
        if not bad.any():
            break
        negs[bad] = table.sample(rng, int(bad.sum()))
    return negs


def _sgns_update(target, context, c, o, negs, lr):
    """One SGD step on -log s(u_o.v_c) - sum log s(-u_n.v_c); returns summed loss."""
    v = target[c]                       # B x d
    u_pos = context[o]                  # B x d
    u_neg = context[negs]               # B x N x d
    pos_logit = np.sum(v * u_pos, axis=1)
    neg_logit = np.einsum("bd,bnd->bn", v, u_neg)
    loss = np.logaddexp(0.0, -pos_logit).sum() + np.logaddexp(0.0, neg_logit).sum()
    g_pos = _sigmoid(pos_logit) - 1.0   # dL/dpos_logit
    g_neg = _sigmoid(neg_logit)         # dL/dneg_logit
    dv = g_pos[:, None] * u_pos + np.einsum("bn,bnd->bd", g_neg, u_neg)
    du_pos = g_pos[:, None] * v
    du_neg = g_neg[:, :, None] * v[:, None, :]
    np.add.at(target, c, -lr * dv)
    np.add.at(context, o, -lr * du_pos)
    np.add.at(context, negs.ravel(), -lr * du_neg.reshape(-1, v.shape[1]))
    return float(loss)


def export_cf_view(model: I2VModel, catalog=None, name="cf") -> DirectViewTable:
    """Target embeddings as a view; items never seen in a basket stay absent."""
    index = {item: k for k, item in enumerate(model.catalog)}
    rows = {}
    for item in (model.catalog if catalog is None else catalog):
        k = index.get(item)
        if k is not None and model.seen[k]:
            rows[item] = model.target_emb[k].copy()
    return DirectViewTable(ViewId(name, "cf"), model.d, rows)


def checkpoint_header(model: I2VModel) -> str:
    return f"dim={model.d} items={int(model.seen.sum())} seed={model.seed}"
