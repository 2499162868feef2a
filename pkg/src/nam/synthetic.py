"""Synthetic datasets with known structure, used by tests and demos."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .ingest import RatingsRecord, write_ratings
from .views import DirectViewTable, ViewId, ViewRegistry


def item_ids(n, prefix="i"):
    width = len(str(n - 1))
    return [f"{prefix}{k:0{width}d}" for k in range(n)]


def cluster_baskets(n_items=500, n_clusters=50, n_baskets=2000, basket_size=(3, 6), seed=0,
                    noise=0.0):
    """Baskets drawn from a single cluster each (plus an optional stray item).

    Returns (items, cluster id per item, list of baskets).
    """
    rng = np.random.default_rng(seed)
    items = item_ids(n_items)
    cluster = np.arange(n_items) % n_clusters
    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    baskets = []
    for _ in range(n_baskets):
        c = rng.integers(n_clusters)
        size = min(int(rng.integers(basket_size[0], basket_size[1] + 1)), members[c].size)
        picks = list(rng.choice(members[c], size=size, replace=False))
        if noise and rng.random() < noise:
            picks.append(int(rng.integers(n_items)))
        baskets.append(tuple(sorted({items[k] for k in picks})))
    return items, cluster, baskets


def informative_noise_registry(items, cluster, noise_dim=16, seed=0, cf_view=None):
    """View "A" holds a one-hot cluster code, view "B" a fixed random vector."""
    rng = np.random.default_rng(seed)
    n_clusters = int(cluster.max()) + 1
    A = {i: np.eye(n_clusters)[c] for i, c in zip(items, cluster)}
    B = {i: rng.standard_normal(noise_dim) for i in items}
    views = [] if cf_view is None else [cf_view]
    views += [DirectViewTable(ViewId("A", "multihot"), n_clusters, A),
              DirectViewTable(ViewId("B", "dense"), noise_dim, B)]
    return ViewRegistry(views, items)


def movielens_like(n_users=943, n_items=1682, n_genres=19, n_topics=40, items_per_user=(20, 120),
                   seed=0):
    """Ratings with latent topics that partly show through genres and year.

    Each item belongs to one topic; each topic has a preferred genre set and
    a release-year centre. Users like a few topics and rate items from them
    highly, plus some random items. Returns (records, genres, years) where
    records are RatingsRecord objects and ids are numeric strings.
    """
    rng = np.random.default_rng(seed)
    topic = rng.integers(n_topics, size=n_items)
    topic_genres = [rng.choice(n_genres, size=rng.integers(1, 4), replace=False)
                    for _ in range(n_topics)]
    topic_year = rng.uniform(1930, 1998, size=n_topics)
    popularity = rng.pareto(1.2, size=n_items) + 1.0
    genres, years = {}, {}
    for k in range(n_items):
        g = set(topic_genres[topic[k]].tolist())
        if rng.random() < 0.3:
            g.add(int(rng.integers(n_genres)))
        if rng.random() < 0.2 and len(g) > 1:
            g.discard(int(rng.choice(sorted(g))))
        genres[str(k + 1)] = tuple(f"g{x:02d}" for x in sorted(g))
        years[str(k + 1)] = float(np.round(topic_year[topic[k]] + rng.normal(0, 6)))
    by_topic = [np.flatnonzero(topic == t) for t in range(n_topics)]
    records = []
    for u in range(n_users):
        liked = rng.choice(n_topics, size=3, replace=False)
        n = int(rng.integers(*items_per_user))
        pool = np.concatenate([by_topic[t] for t in liked])
        p = popularity[pool] / popularity[pool].sum()
        n_in = min(int(0.7 * n), pool.size)
        chosen = set(rng.choice(pool, size=n_in, replace=False, p=p).tolist())
        chosen |= set(rng.choice(n_items, size=n - n_in, replace=False).tolist())
        for k in sorted(chosen):
            in_topic = topic[k] in liked
            rating = float(np.clip(np.round(rng.normal(4.3 if in_topic else 2.8, 0.8)), 1, 5))
            records.append(RatingsRecord(str(u + 1), str(k + 1), rating))
    return records, genres, years


def write_demo_dataset(root, n_users=60, n_items=40, seed=0):
    """Write ratings.csv, items.tsv and a run.ini manifest into ``root``.

    Sizes are small so the whole command-line pipeline runs in seconds.
    Returns the manifest path.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records, genres, years = movielens_like(n_users=n_users, n_items=n_items, n_topics=4,
                                            items_per_user=(8, 16), seed=seed)
    write_ratings(records, root / "ratings.csv")
    with open(root / "items.tsv", "w", encoding="utf-8") as fh:
        fh.write("item\tgenres\tyear\n")
        for k in range(1, n_items + 1):
            item = str(k)
            fh.write(f"{item}\t{'|'.join(genres[item])}\t{years[item]:.0f}\n")
    (root / "run.ini").write_text(
        "[run]\nout = out\nseed = 3\n\n"
        "[data]\nratings = ratings.csv\nmetadata = items.tsv\n"
        "metadata_schema = item:id, genres:multihot, year:scalar\n\n"
        "[views]\ncf = true\ncontent = genres, year\nmin_freq = 1\n\n"
        "[item2vec]\ndim = 8\nepochs = 2\n\n"
        "[train]\nepochs = 2\nbatch_size = 16\nz_t = 6\nn = 3\nmax_pairs_per_epoch = 400\n\n"
        "[eval]\nk = 1-10\nfolds = 5\nfraction = 0.1\n", encoding="utf-8")
    return root / "run.ini"
