"""Ranking metrics, warm/cold catalog splits and cross-validation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core_math import COSINE_EPS
from .model import NamModel
from .views import ViewRegistry, sort_items

log = logging.getLogger(__name__)

SCENARIOS = ("all", "warm", "cold", "cold-case-1", "cold-case-2", "cold-case-3")
MODES = ("nam", "nam-cb", "cf-only")


def hit_ratio_at_k(rank: int, K: int) -> int:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return int(rank <= K)


def mrr_at_k(rank: int, K: int) -> float:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 / rank if rank <= K else 0.0


# -- scoring ------------------------------------------------------------------------

def disabled_views(model: NamModel, mode: str = "nam", cf_view: str = "cf") -> set:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "nam":
        return set()
    kinds = {v.name: v.kind for v in model.view_order}
    cf = {n for n, k in kinds.items() if k == "cf"} or {cf_view}
    if mode == "nam-cb":
        return cf
    return set(kinds) - cf


class Scorer:
    """Scores queries against the whole catalog with precomputed embeddings.

    Rows of the returned matrix are psi(query, candidate); ``valid`` marks
    pairs sharing at least one enabled view.
    """

    def __init__(self, model: NamModel, registry: ViewRegistry, disabled=()):
        model.check_registry(registry)
        self.model = model
        self.registry = registry
        self.disabled = set(disabled)
        self.names = [n for n in model.view_names if n not in self.disabled]
        if not self.names:
            raise ValueError("every view is disabled")
        self._emb = {}
        for name in self.names:
            X, P = registry.dense(name)
            tower = model.towers[name]
            self._emb[name] = dict(
                F=_unit(tower.f.forward(X)[0]), G=_unit(tower.g.forward(X)[0]),
                A=_unit(tower.alpha.forward(X)[0]), P=P,
                w=float(model.params[tower.w].value), b=float(model.params[tower.b].value))

    def score(self, queries: np.ndarray, candidates: Optional[np.ndarray] = None):
        queries = np.atleast_1d(np.asarray(queries))
        cand = slice(None) if candidates is None else np.asarray(candidates)
        gam, mus, masks = [], [], []
        for name in self.names:
            e = self._emb[name]
            s = e["F"][queries] @ e["G"][cand].T
            gam.append(self.model.attention_scale * (e["A"][queries] @ e["A"][cand].T))
            mus.append(e["w"] * s + e["b"])
            masks.append(e["P"][queries][:, None] & e["P"][cand][None, :])
        gamma, mu, mask = np.stack(gam, -1), np.stack(mus, -1), np.stack(masks, -1)
        valid = mask.any(-1)
        g = np.where(mask, gamma, -np.inf)
        m = np.where(valid, g.max(-1), 0.0)
        e = np.where(mask, np.exp(np.where(mask, gamma - m[..., None], 0.0)), 0.0)
        denom = np.where(valid, e.sum(-1), 1.0)
        a = e / denom[..., None]
        psi = np.where(valid, np.sum(a * mu, -1), -np.inf)
        return psi, valid, a


def _unit(X):
    n = np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), COSINE_EPS)
    return X / n


def rank_candidates(model, registry, query, candidates: Sequence, disabled=(), scorer=None):
    """Candidates sorted by psi(query, .) descending; ties by ascending item id.

    Candidates sharing no view with the query go last. Returns
    (ordered ids, psi per ordered id, flagged ids without a common view).
    """
    if len(candidates) == 0:
        raise ValueError("empty candidate list")
    scorer = scorer or Scorer(model, registry, disabled)
    idx = registry.index
    cidx = np.array([idx[c] for c in candidates])
    psi, valid, _ = scorer.score(np.array([idx[query]]), cidx)
    psi, valid = psi[0], valid[0]
    order = np.lexsort((cidx, -np.where(valid, psi, 0.0), ~valid))
    ordered = [candidates[k] for k in order]
    flagged = [candidates[k] for k in np.flatnonzero(~valid)]
    return ordered, psi[order], flagged


def rank_positions(psi_row: np.ndarray, valid_row: np.ndarray, query: int) -> np.ndarray:
    """1-based rank of every catalog index for one query (query itself excluded).

    Ordering: valid first, psi descending, catalog index ascending.
    """
    K = psi_row.size
    tier = np.where(valid_row, 0, 1)
    tier[query] = 2
    order = np.lexsort((np.arange(K), -np.where(valid_row, psi_row, 0.0), tier))
    ranks = np.empty(K, dtype=np.int64)
    ranks[order] = np.arange(1, K + 1)
    return ranks


# -- cold split -------------------------------------------------------------------------

@dataclass
class ColdSplit:
    warm_items: set
    cold_items: set
    seed: int = 0

    def is_cold(self, item) -> bool:
        return item in self.cold_items


def make_cold_split(catalog: Sequence, baskets, fraction=0.10, seed=0):
    """Pick floor(fraction*|catalog|) cold items and strip them from the baskets.

    Returns (ColdSplit, filtered baskets as a list of tuples).
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    items = sort_items(catalog)
    rng = np.random.default_rng(seed)
    n_cold = int(np.floor(fraction * len(items)))
    cold = {items[k] for k in rng.choice(len(items), size=n_cold, replace=False)}
    filtered = []
    for basket in getattr(baskets, "baskets", baskets):
        kept = tuple(i for i in basket if i not in cold)
        if len(kept) >= 2:
            filtered.append(kept)
    return ColdSplit(set(items) - cold, cold, seed), filtered


def classify_pair(split: Optional[ColdSplit], i, j) -> str:
    if split is None:
        return "warm"
    for item in (i, j):
        if item not in split.warm_items and item not in split.cold_items:
            raise KeyError(f"item {item!r} is not in the split catalog")
    ci, cj = i in split.cold_items, j in split.cold_items
    if not (ci or cj):
        return "warm"
    if ci and cj:
        return "cold-case-1"
    return "cold-case-2" if cj else "cold-case-3"


# -- report ----------------------------------------------------------------------------

@dataclass
class EvalReport:
    K_list: list
    hit_ratio: dict = field(default_factory=dict)   # (scenario, K) -> float
    mrr: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)      # scenario -> evaluated pairs
    no_common_view: int = 0

    def cell(self, scenario, K):
        return self.hit_ratio.get((scenario, K), float("nan")), \
            self.mrr.get((scenario, K), float("nan"))

    def rows(self):
        for scen in SCENARIOS:
            if not self.counts.get(scen):
                continue
            for K in self.K_list:
                yield scen, K, "HR", self.hit_ratio[(scen, K)], self.counts[scen]
                yield scen, K, "MRR", self.mrr[(scen, K)], self.counts[scen]

    def to_csv(self, path_or_buf, comment=""):
        lines = [f"# {comment}"] if comment else []
        lines.append("scenario,K,metric,value,n")
        lines += [f"{s},{k},{m},{v!r},{n}" for s, k, m, v, n in self.rows()]
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", encoding="utf-8") as fh:
                fh.write(text)

    def table(self, K_show=None) -> str:
        K_show = K_show or [k for k in (1, 5, 10, 20) if k in self.K_list] or self.K_list[-1:]
        head = f"{'scenario':<12} {'n':>7} " + " ".join(
            f"{'HR@' + str(k):>8} {'MRR@' + str(k):>8}" for k in K_show)
        out = [head]
        for scen in SCENARIOS:
            if not self.counts.get(scen):
                continue
            cells = " ".join(f"{self.hit_ratio[(scen, k)]:8.4f} {self.mrr[(scen, k)]:8.4f}"
                             for k in K_show)
            out.append(f"{scen:<12} {self.counts[scen]:>7} {cells}")
        return "\n".join(out)

    def curves_csv(self, path, scenario="all"):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("K,HR,MRR\n")
            for K in self.K_list:
                fh.write(f"{K},{self.hit_ratio[(scenario, K)]!r},{self.mrr[(scenario, K)]!r}\n")


def report_from_ranks(ranks: Iterable[tuple[str, Optional[int]]], K_list) -> EvalReport:
    """Build a report from (scenario, rank-or-None) records; None counts as a miss.

    Every record also lands in the "all" cell, and cold sub-cases in "cold".
    """
    K_list = sorted(K_list)
    hr, mrr, counts = {}, {}, {}
    buckets: dict[str, list] = {}
    for scen, rank in ranks:
        targets = ["all", scen] + (["cold"] if scen.startswith("cold-case") else [])
        for t in targets:
            buckets.setdefault(t, []).append(0 if rank is None else rank)
    for scen, rs in buckets.items():
        r = np.array(rs, dtype=np.int64)
        counts[scen] = r.size
        for K in K_list:
            hit = (r >= 1) & (r <= K)
            # correctly rounded sums, so the result does not depend on record order
            hr[(scen, K)] = math.fsum(hit) / r.size
            mrr[(scen, K)] = math.fsum(np.where(hit, 1.0 / np.maximum(r, 1), 0.0)) / r.size
    return EvalReport(K_list, hr, mrr, counts)


def evaluate(model: NamModel, registry: ViewRegistry, test_pairs, split=None,
             K_list=tuple(range(1, 21)), mode="nam", disabled=None) -> EvalReport:
    """Rank each test target among the full catalog minus the query.

    ``test_pairs`` is a sequence of (query, target) item ids or PairExamples.
    Pairs whose query and target share no enabled view count as misses.
    """
    disabled = disabled_views(model, mode) if disabled is None else set(disabled)
    scorer = Scorer(model, registry, disabled)
    idx = registry.index
    by_query: dict[int, list] = {}
    for p in test_pairs:
        i, j = (p.context, p.target) if hasattr(p, "context") else p
        by_query.setdefault(idx[i], []).append((i, j, idx[j]))
    records, misses = [], 0
    for q in sorted(by_query):
        psi, valid, _ = scorer.score(np.array([q]))
        ranks = rank_positions(psi[0], valid[0], q)
        for i, j, jj in by_query[q]:
            if not valid[0, jj]:
                misses += 1
                rank = None
            else:
                rank = int(ranks[jj])
            records.append((classify_pair(split, i, j), rank))
    if misses:
        log.info("%d test pairs share no view with their query", misses)
    report = report_from_ranks(records, K_list)
    report.no_common_view = misses
    return report


def mean_report(reports: Sequence[EvalReport]):
    """Unweighted mean (and std) over folds, cell by cell."""
    keys = set.intersection(*(set(r.hit_ratio) for r in reports))
    mean = EvalReport(reports[0].K_list)
    std = EvalReport(reports[0].K_list)
    for key in keys:
        hr = np.array([r.hit_ratio[key] for r in reports])
        mr = np.array([r.mrr[key] for r in reports])
        mean.hit_ratio[key], std.hit_ratio[key] = float(hr.mean()), float(hr.std())
        mean.mrr[key], std.mrr[key] = float(mr.mean()), float(mr.std())
    for scen in set.intersection(*(set(r.counts) for r in reports)):
        mean.counts[scen] = std.counts[scen] = int(sum(r.counts[scen] for r in reports))
    mean.no_common_view = sum(r.no_common_view for r in reports)
    return mean, std


def fold_assignment(n_users: int, folds: int, seed=0) -> np.ndarray:
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n_users < folds:
        raise ValueError(f"{n_users} users cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_users)
    out = np.empty(n_users, dtype=np.int64)
    out[perm] = np.arange(n_users) % folds
    return out


def cross_validate(baskets, pipeline: Callable, folds=10, seed=0):
    """Hold out each fold of users once; ``pipeline(train, test, fold)`` returns
    an EvalReport. Returns (reports, mean, std)."""
    baskets = list(getattr(baskets, "baskets", baskets))
    assign = fold_assignment(len(baskets), folds, seed)
    reports = []
    for f in range(folds):
        train = [b for b, a in zip(baskets, assign) if a != f]
        test = [b for b, a in zip(baskets, assign) if a == f]
        log.info("fold %d/%d: %d train, %d test baskets", f + 1, folds, len(train), len(test))
        reports.append(pipeline(train, test, f))
    mean, std = mean_report(reports)
    return reports, mean, std
