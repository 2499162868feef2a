"""Readers for ratings, sessions and item metadata, and the registry builder."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .views import (
    DirectViewTable, ViewId, ViewRegistry, build_vocabulary, encode_multihot,
    encode_onehot, encode_year, load_dense_view, sort_items,
)

log = logging.getLogger(__name__)

MOVIES_VIEWS = ("cf", "genres", "actors", "tags", "year", "text")
APPS_VIEWS = ("cf", "tags", "category", "text")


class IngestError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}" if lineno else f"{path}: {msg}")
        self.path, self.lineno = path, lineno


@dataclass(frozen=True)
class RatingsRecord:
    user: str
    item: str
    rating: float
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class SessionRecord:
    session: str
    items: tuple


@dataclass
class ParseResult:
    records: list
    malformed: list = field(default_factory=list)  # (lineno, reason)
    dropped: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def parse_ratings(path, delimiter=",", header=None, scale=(0.0, 5.0)) -> ParseResult:
    """Parse ``user,item,rating[,timestamp]`` lines.

    ``header=None`` sniffs a header when the first rating field is not numeric.
    Malformed lines are skipped and reported, not fatal.
    """
    records, malformed = [], []
    lo, hi = scale
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter) if len(delimiter) == 1 else \
            (line.rstrip("\n").split(delimiter) for line in fh)
        for lineno, row in enumerate(reader, 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and (header or (header is None and not _is_number(row[2] if len(row) > 2 else ""))):
                continue
            if len(row) < 3:
                malformed.append((lineno, f"expected >= 3 fields, got {len(row)}"))
                continue
            try:
                rating = float(row[2])
                ts = int(row[3]) if len(row) > 3 and row[3].strip() else None
            except ValueError as exc:
                malformed.append((lineno, str(exc)))
                continue
            if not lo <= rating <= hi:
                malformed.append((lineno, f"rating {rating} outside [{lo}, {hi}]"))
                continue
            records.append(RatingsRecord(row[0].strip(), row[1].strip(), rating, ts))
    if malformed:
        log.warning("%s: %d malformed lines skipped", path, len(malformed))
    return ParseResult(records, malformed)


def write_ratings(records, path, delimiter=","):
    """Canonical form: header, then user,item,rating[,timestamp] in input order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delimiter.join(["userId", "movieId", "rating", "timestamp"]) + "\n")
        for r in records:
            fields_ = [r.user, r.item, repr(r.rating)]
            if r.timestamp is not None:
                fields_.append(str(r.timestamp))
            fh.write(delimiter.join(fields_) + "\n")


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def filter_positive(records, threshold=3.5) -> dict:
    """user -> list of items rated strictly above ``threshold`` (first-seen order)."""
    out: dict[str, list] = {}
    for r in records:
        if r.rating > threshold:
            out.setdefault(r.user, []).append(r.item)
    return out


def parse_sessions(path) -> ParseResult:
    """``session<TAB>item,item,...`` per line; sessions with no items are dropped."""
    records, malformed, dropped = [], [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                malformed.append((lineno, "expected session<TAB>items"))
                continue
            items = tuple(x.strip() for x in parts[1].split(",") if x.strip())
            if not items:
                dropped += 1
                continue
            records.append(SessionRecord(parts[0], items))
    return ParseResult(records, malformed, dropped)


def write_sessions(baskets, path, ids=None):
    with open(path, "w", encoding="utf-8") as fh:
        for k, basket in enumerate(baskets):
            sid = ids[k] if ids is not None else str(k)
            fh.write(f"{sid}\t{','.join(basket)}\n")


# -- metadata -------------------------------------------------------------------

METADATA_KINDS = ("id", "multihot", "onehot", "scalar", "ignore")


@dataclass
class ItemMetadata:
    # column -> item -> label tuple (multihot/onehot) or float (scalar)
    fields: dict
    kinds: dict

    def items(self):
        out = set()
        for values in self.fields.values():
            out.update(values)
        return out


def parse_metadata(path, schema: dict, delimiter="\t", label_sep="|", strict=True) -> ItemMetadata:
    """Read a header-led table of item attributes.

    ``schema`` maps column name -> kind (one column must be "id"). A blank
    multihot field means "no labels" and stays present; a blank onehot or
    scalar field is recorded as missing.
    """
    for col, kind in schema.items():
        if kind not in METADATA_KINDS:
            raise ValueError(f"schema column {col!r}: unknown kind {kind!r}")
    id_cols = [c for c, k in schema.items() if k == "id"]
    if len(id_cols) != 1:
        raise ValueError("schema needs exactly one id column")
    id_col = id_cols[0]
    fields_ = {c: {} for c, k in schema.items() if k not in ("id", "ignore")}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return ItemMetadata(fields_, dict(schema))
        unknown = [h for h in header if h not in schema]
        if unknown and strict:
            raise IngestError(path, 1, f"unknown columns {unknown}")
        missing = [c for c in schema if c not in header]
        if missing:
            raise IngestError(path, 1, f"missing columns {missing}")
        pos = {h: k for k, h in enumerate(header)}
        seen = set()
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            item = row[pos[id_col]].strip()
            if not item:
                raise IngestError(path, lineno, "empty item id")
            if item in seen:
                raise IngestError(path, lineno, f"duplicate item id {item!r}")
            seen.add(item)
            for col in fields_:
                raw = row[pos[col]].strip()
                kind = schema[col]
                if kind == "multihot":
                    fields_[col][item] = tuple(sorted({x.strip() for x in raw.split(label_sep)
                                                      if x.strip()}))
                elif not raw:
                    continue
                elif kind == "onehot":
                    fields_[col][item] = (raw,)
                else:
                    try:
                        fields_[col][item] = float(raw)
                    except ValueError:
                        raise IngestError(path, lineno, f"column {col!r}: {raw!r} is not a number") from None
    return ItemMetadata(fields_, dict(schema))


# -- registry ---------------------------------------------------------------------

@dataclass
class RegistryConfig:
    content_views: tuple = ()       # metadata column names, in view order
    use_cf: bool = True
    text_dim: Optional[int] = None
    min_freq: int = 2
    # items whose statistics (vocabularies, year mean/std) are fitted
    fit_items: Optional[set] = None


def build_content_view(name, kind, values: dict, fit_items=None, min_freq=2,
                       vocabulary=None, stats=None) -> DirectViewTable:
    """Encode one metadata column. ``values`` maps item -> labels or scalar."""
    fit = values if fit_items is None else {i: v for i, v in values.items() if i in fit_items}
    if kind in ("multihot", "onehot"):
        if vocabulary is None:
            vocabulary = build_vocabulary(fit.values(), min_freq if kind == "multihot" else 1)
        if not vocabulary:
            vocabulary = ["<none>"]
        vocab_set = set(vocabulary)
        rows = {}
        for item, labels in values.items():
            known = [x for x in labels if x in vocab_set]
            if kind == "onehot":
                if known:
                    rows[item] = encode_onehot(vocabulary, known[0])
            else:
                rows[item] = encode_multihot(vocabulary, known)
        return DirectViewTable(ViewId(name, kind), len(vocabulary), rows,
                               meta={"vocabulary": list(vocabulary)})
    if kind == "scalar":
        if stats is None:
            xs = np.array(list(fit.values()), dtype=np.float64)
            mean = float(xs.mean()) if xs.size else 0.0
            std = float(xs.std()) if xs.size > 1 and xs.std() > 0 else 1.0
        else:
            mean, std = stats
        rows = {item: encode_year(v, mean, std) for item, v in values.items()}
        return DirectViewTable(ViewId(name, "scalar"), 1, rows, meta={"mean": mean, "std": std})
    raise ValueError(f"cannot build a content view of kind {kind!r}")


def build_registry(catalog, metadata: Optional[ItemMetadata] = None,
                   cf_view: Optional[DirectViewTable] = None, text_view_path=None,
                   config: RegistryConfig = None) -> ViewRegistry:
    """CF view (unless disabled) followed by content views, then the text view.

    Metadata items absent from the interaction catalog are kept as
    permanently cold catalog items.
    """
    config = config or RegistryConfig()
    views = []
    catalog = set(catalog)
    if config.use_cf and cf_view is not None:
        views.append(cf_view)
    for col in config.content_views:
        if metadata is None or col not in metadata.fields:
            raise ValueError(f"content view {col!r} has no metadata column")
        views.append(build_content_view(col, metadata.kinds[col], metadata.fields[col],
                                        config.fit_items, config.min_freq))
    if text_view_path is not None:
        if not config.text_dim:
            raise ValueError("text view needs text_dim")
        views.append(load_dense_view(text_view_path, config.text_dim, "text", "dense"))
    if metadata is not None:
        catalog |= metadata.items()
    return ViewRegistry(views, sort_items(catalog))


# -- MovieLens 100K layout ----------------------------------------------------------

ML100K_GENRES = ("unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
                 "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
                 "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western")


def load_movielens_100k(directory):
    """Read ``u.data`` and ``u.item`` from an extracted ml-100k directory.

    Returns (ratings ParseResult, genres: item -> labels, years: item -> float).
    """
    from pathlib import Path
    directory = Path(directory)
    ratings = parse_ratings(directory / "u.data", delimiter="\t", header=False)
    genres, years = {}, {}
    with open(directory / "u.item", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("|")
            if len(parts) < 5 + len(ML100K_GENRES):
                raise IngestError(directory / "u.item", lineno, "too few fields")
            item = parts[0]
            flags = parts[5:5 + len(ML100K_GENRES)]
            genres[item] = tuple(g for g, f in zip(ML100K_GENRES, flags) if f == "1")
            date = parts[2].strip()
            if date[-4:].isdigit():
                years[item] = float(date[-4:])
    return ratings, genres, years
