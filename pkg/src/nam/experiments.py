"""Small end-to-end experiments shared by the acceptance tests and the demos."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import item2vec as i2v
from .evaluation import Scorer, evaluate, fold_assignment, make_cold_split
from .ingest import build_content_view, filter_positive
from .model import NamModel
from .synthetic import cluster_baskets, informative_noise_registry
from .training import (
    CoConsumptionIndex, TrainConfig, build_pair_dataset, train_phase1, train_phase2,
)
from .views import ViewRegistry, sort_items

log = logging.getLogger(__name__)


def fit_nam(registry, train_baskets, config: TrainConfig):
    model = NamModel.for_registry(registry, config.z_t, config.z_a, config.seed,
                                  config.score_temperature, config.attention_scale)
    pairs = build_pair_dataset(train_baskets)
    co = CoConsumptionIndex(train_baskets, registry.catalog)
    r1 = train_phase1(model, pairs, registry, config, co)
    r2 = train_phase2(model, pairs, registry, config, co)
    return model, r1.loss_trace, r2.loss_trace


@dataclass
class AttentionSanity:
    mean_attention_informative: float
    hr10_nam: float
    hr10_noise_only: float
    seconds: float
    traces: dict = field(default_factory=dict)


def attention_sanity(seed=0, n_items=500, n_clusters=50, n_train=2000, n_test=400, z_t=32,
                     epochs=5, lr=3e-3, attention_scale=1.0) -> AttentionSanity:
    """Cluster-coded view "A" against a pure-noise view "B".

    Returns the mean attention weight on A over held-out positive pairs and
    HR@10 of the full model versus B alone.
    """
    t0 = time.perf_counter()
    items, cluster, baskets = cluster_baskets(n_items, n_clusters, n_train + n_test, seed=seed)
    train, test = baskets[:n_train], baskets[n_train:]
    registry = informative_noise_registry(items, cluster, seed=seed)
    cfg = TrainConfig(epochs=epochs, z_t=z_t, lr=lr, seed=seed, attention_scale=attention_scale)
    model, t1, t2 = fit_nam(registry, train, cfg)
    pairs = [(i, j) for b in test for i in b for j in b if i != j]
    idx = registry.index
    q = np.array([idx[i] for i, _ in pairs])
    t = np.array([idx[j] for _, j in pairs])
    _, _, a = Scorer(model, registry).score(q)
    mean_a = float(a[np.arange(q.size), t, model.view_names.index("A")].mean())
    hr_nam = evaluate(model, registry, pairs, K_list=[10]).hit_ratio[("all", 10)]
    hr_b = evaluate(model, registry, pairs, K_list=[10], disabled={"A"}).hit_ratio[("all", 10)]
    return AttentionSanity(mean_a, hr_nam, hr_b, time.perf_counter() - t0,
                           {"phase1": t1, "phase2": t2})


def item2vec_separation(seed=0, n_items=40, n_baskets=600, d=16, epochs=10):
    """Mean intra-cluster minus mean inter-cluster cosine of target embeddings."""
    items, cluster, baskets = cluster_baskets(n_items, 2, n_baskets, basket_size=(3, 6), seed=seed)
    model = i2v.train_sgns(i2v.build_baskets(baskets), d=d, epochs=epochs, neg_ratio=5,
                           lr=0.025, seed=seed)
    idx = {item: k for k, item in enumerate(model.catalog)}
    E = model.target_emb[[idx[i] for i in items]]
    En = E / np.linalg.norm(E, axis=1, keepdims=True)
    intra, inter = [], []
    for a in range(len(items)):        # brute force over all unordered pairs
        for b in range(a + 1, len(items)):
            c = float(En[a] @ En[b])
            (intra if cluster[a] == cluster[b] else inter).append(c)
    return float(np.mean(intra)), float(np.mean(inter)), model


@dataclass
class DirectionalResult:
    hr20: dict            # mode or single view -> HR@20 (warm run, all test pairs)
    cold_hr20_nam: float
    cold_hr20_cf_only: float
    seconds: float
    n_test_pairs: int = 0


def directional_check(records, genres, years, seed=0, config: TrainConfig = None,
                      i2v_params=None, holdout_folds=10, cold_fraction=0.10,
                      max_test_pairs=None) -> DirectionalResult:
    """CF + genres + year on a ratings dataset.

    (a) warm run: the full model against each view on its own (other views
    masked); (b) cold run with a cold catalog: the full model against the
    CF-only variant on cold test pairs.
    """
    t0 = time.perf_counter()
    config = config or TrainConfig(epochs=3, z_t=32, lr=3e-3, max_pairs_per_epoch=100_000)
    i2v_params = dict(dict(d=32, epochs=5, neg_ratio=5, lr=0.025), **(i2v_params or {}))
    baskets = i2v.build_baskets(filter_positive(records)).baskets
    catalog = sort_items({r.item for r in records} | set(genres) | set(years))
    assign = fold_assignment(len(baskets), holdout_folds, seed)
    train = [b for b, a in zip(baskets, assign) if a != 0]
    test = [b for b, a in zip(baskets, assign) if a == 0]
    pairs = [(i, j) for b in test for i in b for j in b if i != j]
    if max_test_pairs and len(pairs) > max_test_pairs:
        rng = np.random.default_rng(seed)
        pairs = [pairs[k] for k in np.sort(rng.choice(len(pairs), max_test_pairs, replace=False))]

    def registry_for(train_baskets):
        cf = i2v.export_cf_view(i2v.train_sgns(i2v.build_baskets(train_baskets), seed=seed,
                                               catalog=catalog, **i2v_params))
        fit = {i for b in train_baskets for i in b}
        return ViewRegistry([cf, build_content_view("genres", "multihot", genres, fit, 1),
                             build_content_view("year", "scalar", years, fit)], catalog)

    registry = registry_for(train)
    model, _, _ = fit_nam(registry, train, config)
    hr = {"nam": evaluate(model, registry, pairs, K_list=[20]).hit_ratio[("all", 20)]}
    for view in model.view_names:
        others = set(model.view_names) - {view}
        hr[view] = evaluate(model, registry, pairs, K_list=[20],
                            disabled=others).hit_ratio[("all", 20)]
    log.info("warm run HR@20: %s", hr)

    split, warm_train = make_cold_split(catalog, train, cold_fraction, seed)
    registry = registry_for(warm_train)
    model, _, _ = fit_nam(registry, warm_train, config)
    rep_nam = evaluate(model, registry, pairs, split, [20], "nam")
    rep_cf = evaluate(model, registry, pairs, split, [20], "cf-only")
    return DirectionalResult(hr, rep_nam.hit_ratio[("cold", 20)], rep_cf.hit_ratio[("cold", 20)],
                             time.perf_counter() - t0, len(pairs))
