"""End-to-end stages driven by a run manifest (INI file).

Each stage reads what earlier stages wrote into the output directory, so the
CLI can run them one at a time. Everything written is a deterministic
function of the manifest and seed.
"""
from __future__ import annotations

import configparser
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import item2vec as i2v
from .evaluation import (
    ColdSplit, EvalReport, Scorer, cross_validate, disabled_views, evaluate,
    fold_assignment, make_cold_split,
)
from .ingest import (
    ItemMetadata, RegistryConfig, build_content_view, filter_positive, parse_metadata,
    parse_ratings, parse_sessions, write_sessions,
)
from .model import NamModel, pair_forward
from .training import (
    CoConsumptionIndex, TrainConfig, build_pair_dataset, file_sha256, load_checkpoint,
    save_checkpoint, train_phase1, train_phase2, write_loss_csv,
)
from .views import (
    DirectViewTable, ViewId, ViewRegistry, load_dense_view, load_vocabulary,
    save_dense_view, save_vocabulary, sort_items,
)

log = logging.getLogger(__name__)


class PrerequisiteError(RuntimeError):
    pass


def _bool(s):
    return str(s).strip().lower() in ("1", "true", "yes", "on")


def _list(s):
    return [x.strip() for x in str(s).split(",") if x.strip()]


def parse_k_list(s) -> list[int]:
    """"1-20" or "1,5,10,20" (ranges allowed inside the list)."""
    out = []
    for part in _list(s):
        if "-" in part:
            a, b = part.split("-")
            out += range(int(a), int(b) + 1)
        else:
            out.append(int(part))
    return sorted(set(out))


@dataclass
class Manifest:
    base: Path
    out: Path
    seed: int = 0
    ratings: Optional[Path] = None
    ratings_delimiter: str = ","
    rating_threshold: float = 3.5
    sessions: Optional[Path] = None
    metadata: Optional[Path] = None
    metadata_delimiter: str = "\t"
    metadata_schema: dict = field(default_factory=dict)
    use_cf: bool = True
    content_views: list = field(default_factory=list)
    text: Optional[Path] = None
    text_dim: Optional[int] = None
    min_freq: int = 2
    i2v: dict = field(default_factory=lambda: dict(dim=100, epochs=5, neg_ratio=5, lr=0.025))
    train: TrainConfig = field(default_factory=TrainConfig)
    k_list: list = field(default_factory=lambda: list(range(1, 21)))
    folds: int = 10
    cold_fraction: float = 0.10

    @classmethod
    def load(cls, path, overrides=None) -> "Manifest":
        """Read an INI manifest; ``overrides`` maps "section.key" -> value and wins."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.read(path, encoding="utf-8")
        for key, value in (overrides or {}).items():
            section, _, opt = key.partition(".")
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, opt, str(value))
        base = path.parent

        def get(section, key, default=None):
            return cp.get(section, key, fallback=default)

        def p(section, key):
            v = get(section, key)
            return (base / v) if v else None

        m = cls(base=base, out=base / get("run", "out", "out"), seed=int(get("run", "seed", 0)))
        m.ratings, m.sessions, m.metadata = p("data", "ratings"), p("data", "sessions"), \
            p("data", "metadata")
        m.ratings_delimiter = _delim(get("data", "ratings_delimiter", ","))
        m.rating_threshold = float(get("data", "rating_threshold", 3.5))
        m.metadata_delimiter = _delim(get("data", "metadata_delimiter", "tab"))
        m.metadata_schema = dict(x.split(":") for x in _list(get("data", "metadata_schema", "")))
        m.use_cf = _bool(get("views", "cf", "true"))
        m.content_views = _list(get("views", "content", ""))
        m.text, m.text_dim = p("views", "text"), get("views", "text_dim")
        m.text_dim = int(m.text_dim) if m.text_dim else None
        m.min_freq = int(get("views", "min_freq", 2))
        if cp.has_section("item2vec"):
            for k, v in cp.items("item2vec"):
                m.i2v[k] = float(v) if k == "lr" else int(v)
        tr = dict(cp.items("train")) if cp.has_section("train") else {}
        conv = dict(epochs=int, batch_size=int, n=int, lam=float, z_t=int, z_a=int, lr=float,
                    stop_gradient_psi=_bool, include_positive_in_partition=_bool,
                    score_temperature=_bool, attention_scale=float, max_pairs_per_epoch=int)
        kwargs = {}
        for k, v in tr.items():
            key = {"lambda": "lam", "n": "N"}.get(k, k)
            if k == "max_pairs_per_epoch" and v.strip().lower() in ("none", "off", ""):
                kwargs[key] = None
                continue
            if k not in conv and key not in conv:
                raise ValueError(f"unknown [train] key {k!r}")
            kwargs[key] = conv.get(k, conv.get(key))(v)
        kwargs["seed"] = m.seed
        m.train = TrainConfig(**kwargs)
        m.k_list = parse_k_list(get("eval", "k", "1-20"))
        m.folds = int(get("eval", "folds", 10))
        m.cold_fraction = float(get("eval", "fraction", 0.10))
        if m.ratings is None and m.sessions is None:
            raise ValueError("manifest needs data.ratings or data.sessions")
        for f in (m.ratings, m.sessions, m.metadata, m.text):
            if f is not None and not f.is_file():
                raise FileNotFoundError(f"referenced file not found: {f}")
        return m

    @property
    def registry_config(self):
        return RegistryConfig(tuple(self.content_views), self.use_cf, self.text_dim,
                              self.min_freq)


def _delim(s):
    return {"tab": "\t", "\\t": "\t", "comma": ",", "pipe": "|"}.get(s, s)


# -- ingest ------------------------------------------------------------------------------

@dataclass
class Dataset:
    catalog: list
    baskets: i2v.BasketDataset
    metadata: Optional[ItemMetadata]
    counts: dict


def load_dataset(m: Manifest) -> Dataset:
    counts = {}
    if m.ratings is not None:
        parsed = parse_ratings(m.ratings, m.ratings_delimiter)
        counts.update(ratings=len(parsed), malformed=len(parsed.malformed))
        histories = filter_positive(parsed.records, m.rating_threshold)
        all_items = {r.item for r in parsed.records}
    else:
        parsed = parse_sessions(m.sessions)
        counts.update(sessions=len(parsed), malformed=len(parsed.malformed),
                      empty_sessions=parsed.dropped)
        histories = {r.session: r.items for r in parsed.records}
        all_items = {i for r in parsed.records for i in r.items}
    baskets = i2v.build_baskets(histories)
    metadata = None
    if m.metadata is not None:
        metadata = parse_metadata(m.metadata, m.metadata_schema, m.metadata_delimiter)
        all_items |= metadata.items()
    catalog = sort_items(all_items | set(baskets.items()))
    counts.update(baskets=len(baskets), dropped_baskets=baskets.dropped, items=len(catalog))
    return Dataset(catalog, baskets, metadata, counts)


def split_users(baskets, folds, seed, holdout_fold=0):
    assign = fold_assignment(len(baskets.baskets), folds, seed)
    train = [b for b, a in zip(baskets.baskets, assign) if a != holdout_fold]
    test = [b for b, a in zip(baskets.baskets, assign) if a == holdout_fold]
    train_ids = [u for u, a in zip(baskets.ids, assign) if a != holdout_fold]
    test_ids = [u for u, a in zip(baskets.ids, assign) if a == holdout_fold]
    return (train, train_ids), (test, test_ids)


def content_tables(m: Manifest, metadata, fit_items, catalog) -> list[DirectViewTable]:
    tables = []
    for col in m.content_views:
        if metadata is None or col not in metadata.fields:
            raise ValueError(f"content view {col!r} has no metadata column")
        tables.append(build_content_view(col, metadata.kinds[col], metadata.fields[col],
                                         fit_items, m.min_freq))
    if m.text is not None:
        if not m.text_dim:
            raise ValueError("views.text requires views.text_dim")
        tables.append(load_dense_view(m.text, m.text_dim, "text", "dense"))
    return tables


def ingest(m: Manifest) -> dict:
    out = m.out
    (out / "views").mkdir(parents=True, exist_ok=True)
    ds = load_dataset(m)
    (train, train_ids), (test, test_ids) = split_users(ds.baskets, m.folds, m.seed)
    write_sessions(train, out / "baskets_train.tsv", train_ids)
    write_sessions(test, out / "baskets_test.tsv", test_ids)
    (out / "catalog.txt").write_text("".join(f"{i}\n" for i in ds.catalog), encoding="utf-8")
    fit = {i for b in train for i in b}
    views = []
    for t in content_tables(m, ds.metadata, fit, ds.catalog):
        save_dense_view(t, out / "views" / f"{t.name}.tsv")
        if "vocabulary" in t.meta:
            save_vocabulary(t.meta["vocabulary"], out / "views" / f"{t.name}.vocab")
        views.append(dict(name=t.name, kind=t.view.kind, dim=t.dim,
                          meta={k: v for k, v in t.meta.items() if k != "vocabulary"}))
    reg = dict(use_cf=m.use_cf, content=views, seed=m.seed)
    (out / "registry.json").write_text(json.dumps(reg, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    counts = dict(ds.counts, train_baskets=len(train), test_baskets=len(test))
    (out / "ingest_summary.json").write_text(json.dumps(counts, indent=1, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return counts


def _require(path: Path, stage: str):
    if not path.is_file():
        raise PrerequisiteError(f"{path.name} not found; run `{stage}` first")


def read_baskets(path) -> list:
    return [tuple(r.items) for r in parse_sessions(path).records]


def training_baskets(m: Manifest) -> list:
    warm = m.out / "baskets_train_warm.tsv"
    if warm.is_file():
        return read_baskets(warm)
    _require(m.out / "baskets_train.tsv", "ingest")
    return read_baskets(m.out / "baskets_train.tsv")


def load_split(m: Manifest) -> Optional[ColdSplit]:
    path = m.out / "split.tsv"
    if not path.is_file():
        return None
    warm, cold, seed = set(), set(), 0
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("# seed="):
            seed = int(line.split("=")[1])
            continue
        item, tag = line.split("\t")
        (cold if tag == "cold" else warm).add(item)
    return ColdSplit(warm, cold, seed)


def split_cold(m: Manifest, fraction=None) -> ColdSplit:
    _require(m.out / "catalog.txt", "ingest")
    catalog = (m.out / "catalog.txt").read_text(encoding="utf-8").split()
    train = read_baskets(m.out / "baskets_train.tsv")
    split, filtered = make_cold_split(catalog, train, fraction or m.cold_fraction, m.seed)
    with open(m.out / "split.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"# seed={m.seed}\n")
        for item in sort_items(catalog):
            fh.write(f"{item}\t{'cold' if item in split.cold_items else 'warm'}\n")
    write_sessions(filtered, m.out / "baskets_train_warm.tsv")
    return split


def train_cf(m: Manifest) -> i2v.I2VModel:
    baskets = i2v.build_baskets(training_baskets(m))
    p = m.i2v
    model = i2v.train_sgns(baskets, d=int(p["dim"]), epochs=int(p["epochs"]),
                           neg_ratio=int(p["neg_ratio"]), lr=float(p["lr"]), seed=m.seed)
    table = i2v.export_cf_view(model)
    save_dense_view(table, m.out / "views" / "cf.tsv", header=i2v.checkpoint_header(model))
    write_loss_csv(m.out / "cf_loss.csv", {"cf": model.loss_trace}, f"seed={m.seed}")
    return model


def load_registry(m: Manifest) -> ViewRegistry:
    _require(m.out / "registry.json", "ingest")
    spec = json.loads((m.out / "registry.json").read_text(encoding="utf-8"))
    catalog = (m.out / "catalog.txt").read_text(encoding="utf-8").split()
    views = []
    if spec["use_cf"]:
        cf = m.out / "views" / "cf.tsv"
        _require(cf, "train-cf")
        views.append(load_dense_view(cf, _cf_dim(cf), "cf", "cf"))
    for v in spec["content"]:
        t = load_dense_view(m.out / "views" / f"{v['name']}.tsv", v["dim"], v["name"], v["kind"])
        t.meta.update(v["meta"])
        vocab = m.out / "views" / f"{v['name']}.vocab"
        if vocab.is_file():
            t.meta["vocabulary"] = load_vocabulary(vocab)
        views.append(t)
    return ViewRegistry(views, catalog)


def _cf_dim(path) -> int:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    for tok in first.lstrip("# ").split():
        if tok.startswith("dim="):
            return int(tok[4:])
    raise ValueError(f"{path}: missing dim header")


def _co_index(registry, baskets):
    return CoConsumptionIndex(baskets, registry.catalog)


def run_phase1(m: Manifest) -> tuple[NamModel, str]:
    registry = load_registry(m)
    baskets = training_baskets(m)
    cfg = m.train
    model = NamModel.for_registry(registry, cfg.z_t, cfg.z_a, m.seed, cfg.score_temperature,
                                  cfg.attention_scale)
    res = train_phase1(model, build_pair_dataset(baskets), registry, cfg,
                       _co_index(registry, baskets))
    digest = save_checkpoint(model, cfg, m.out / "phase1.ckpt")
    write_loss_csv(m.out / "phase1_loss.csv", {1: res.loss_trace},
                   f"seed={m.seed} checkpoint={digest}")
    return model, digest


def run_phase2(m: Manifest) -> tuple[NamModel, str]:
    ckpt = m.out / "phase1.ckpt"
    if not ckpt.is_file():
        raise PrerequisiteError("phase1.ckpt not found; run `train-phase1` first")
    registry = load_registry(m)
    model, _ = load_checkpoint(ckpt, registry)
    baskets = training_baskets(m)
    res = train_phase2(model, build_pair_dataset(baskets), registry, m.train,
                       _co_index(registry, baskets))
    digest = save_checkpoint(model, m.train, m.out / "phase2.ckpt")
    write_loss_csv(m.out / "phase2_loss.csv", {2: res.loss_trace},
                   f"seed={m.seed} checkpoint={digest}")
    return model, digest


def test_pairs(m: Manifest):
    _require(m.out / "baskets_test.tsv", "ingest")
    return [(i, j) for b in read_baskets(m.out / "baskets_test.tsv")
            for i in b for j in b if i != j]


def run_evaluate(m: Manifest, checkpoint=None, mode="nam", use_split=True) -> EvalReport:
    checkpoint = Path(checkpoint) if checkpoint else m.out / "phase2.ckpt"
    if not checkpoint.is_file():
        raise PrerequisiteError(f"{checkpoint} not found; run `train-phase2` first")
    registry = load_registry(m)
    model, _ = load_checkpoint(checkpoint, registry)
    split = load_split(m) if use_split else None
    report = evaluate(model, registry, test_pairs(m), split, m.k_list, mode)
    comment = f"seed={m.seed} checkpoint={file_sha256(checkpoint)} mode={mode}"
    report.to_csv(m.out / f"eval_{mode}.csv", comment)
    report.curves_csv(m.out / f"curves_{mode}.csv")
    return report


@dataclass
class Recommendation:
    rank: int
    item: str
    psi: float
    views: dict   # view -> (a, mu, s)


def recommend(model: NamModel, registry: ViewRegistry, query, top_k=10, mode="nam"):
    if query not in registry.index:
        raise KeyError(f"unknown item {query!r}")
    disabled = disabled_views(model, mode)
    scorer = Scorer(model, registry, disabled)
    q = registry.index[query]
    psi, valid, _ = scorer.score(np.array([q]))
    psi, valid = psi[0], valid[0].copy()
    valid[q] = False
    cand = np.flatnonzero(valid)
    order = cand[np.lexsort((cand, -psi[cand]))][:top_k]
    out = []
    for r, k in enumerate(order, 1):
        item = registry.catalog[k]
        br = pair_forward(model, query, item, registry, disabled)
        out.append(Recommendation(r, item, br.psi, {v: (float(br.a[h]), float(br.mu[h]),
                                                        float(br.s[h]))
                                                    for h, v in enumerate(br.views)}))
    return out


def run_cross_validate(m: Manifest, mode="nam", cold=True):
    """Full pipeline per fold: cold split, item2vec, phase 1, phase 2, evaluate."""
    ds = load_dataset(m)

    def pipeline(train, test, fold):
        seed = m.seed + fold
        split = None
        if cold:
            split, train = make_cold_split(ds.catalog, train, m.cold_fraction, seed)
        fit = {i for b in train for i in b}
        views = []
        if m.use_cf:
            i2 = i2v.train_sgns(i2v.build_baskets(train), d=int(m.i2v["dim"]),
                                epochs=int(m.i2v["epochs"]), neg_ratio=int(m.i2v["neg_ratio"]),
                                lr=float(m.i2v["lr"]), seed=seed, catalog=ds.catalog)
            views.append(i2v.export_cf_view(i2))
        views += content_tables(m, ds.metadata, fit, ds.catalog)
        registry = ViewRegistry(views, ds.catalog)
        cfg = TrainConfig.from_dict(dict(m.train.to_dict(), seed=seed))
        model = NamModel.for_registry(registry, cfg.z_t, cfg.z_a, seed, cfg.score_temperature,
                                      cfg.attention_scale)
        pairs = build_pair_dataset(train)
        co = CoConsumptionIndex(train, registry.catalog)
        train_phase1(model, pairs, registry, cfg, co)
        train_phase2(model, pairs, registry, cfg, co)
        tp = [(i, j) for b in test for i in b for j in b if i != j]
        return evaluate(model, registry, tp, split, m.k_list, mode)

    return cross_validate(ds.baskets, pipeline, m.folds, m.seed)
