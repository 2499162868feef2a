"""Direct views: per-item vectors for each information source.

A view either has a row for an item or it does not. Missing rows are never
filled in; they drive the attention mask downstream.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

VIEW_KINDS = ("cf", "multihot", "onehot", "scalar", "dense")


class VocabularyError(KeyError):
    pass


class ViewParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class ViewId:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise ValueError(f"unknown view kind {self.kind!r}")


@dataclass
class DirectViewTable:
    view: ViewId
    dim: int
    rows: dict = field(default_factory=dict)
    # extra encoder state (vocabulary, year mean/std) kept with the view
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("view dimension must be positive")
        for item, row in list(self.rows.items()):
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (self.dim,):
                raise ValueError(
                    f"view {self.view.name}: row for {item!r} has shape {row.shape}, "
                    f"expected ({self.dim},)")
            self.rows[item] = row

    @property
    def name(self):
        return self.view.name

    def present(self, item) -> bool:
        return item in self.rows

    def get(self, item) -> Optional[np.ndarray]:
        return self.rows.get(item)

    def matrix(self, items: Sequence) -> tuple[np.ndarray, np.ndarray]:
        """Stack rows for ``items``; absent items get a zero row and False."""
        X = np.zeros((len(items), self.dim))
        present = np.zeros(len(items), dtype=bool)
        for k, item in enumerate(items):
            row = self.rows.get(item)
            if row is not None:
                X[k] = row
                present[k] = True
        return X, present


class ViewRegistry:
    """Ordered collection of view tables plus the item catalog.

    The view order is the axis order of every attention softmax.
    """

    def __init__(self, views: Iterable[DirectViewTable], catalog: Iterable = ()):
        self.views = list(views)
        if not self.views:
            raise ValueError("a registry needs at least one view")
        names = [v.name for v in self.views]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate view names in {names}")
        items = set(catalog)
        for v in self.views:
            items.update(v.rows)
        self.catalog = sort_items(items)
        self.index = {item: k for k, item in enumerate(self.catalog)}
        self._by_name = {v.name: v for v in self.views}
        self._cache = {}

    @property
    def view_names(self) -> list[str]:
        return [v.name for v in self.views]

    def __len__(self):
        return len(self.views)

    def __getitem__(self, name) -> DirectViewTable:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"view {name!r} is not registered") from None

    def without_view(self, name) -> "ViewRegistry":
        self[name]
        return ViewRegistry([v for v in self.views if v.name != name], self.catalog)

    def dense(self, name) -> tuple[np.ndarray, np.ndarray]:
        """(K x dim matrix, presence mask) over the catalog, cached."""
        if name not in self._cache:
            self._cache[name] = self[name].matrix(self.catalog)
        return self._cache[name]

    def presence(self) -> np.ndarray:
        """K x |H| boolean presence matrix."""
        return np.stack([self.dense(n)[1] for n in self.view_names], axis=1)


def get_view_vector(registry: ViewRegistry, item, view: str) -> Optional[np.ndarray]:
    return registry[view].get(item)


def sort_items(items) -> list:
    """Catalog order: numeric ids numerically, then everything else as text."""
    def key(x):
        s = str(x)
        return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)
    return sorted(items, key=key)


# -- encoders ----------------------------------------------------------------

def build_vocabulary(label_sets: Iterable[Iterable[str]], min_freq: int = 1) -> list[str]:
    counts = Counter()
    for labels in label_sets:
        counts.update(set(labels))
    return sorted(label for label, c in counts.items() if c >= min_freq)


def encode_multihot(vocabulary: Sequence[str], labels: Iterable[str]) -> np.ndarray:
    pos = {label: k for k, label in enumerate(vocabulary)}
    out = np.zeros(len(vocabulary))
    for label in labels:
        if label not in pos:
            raise VocabularyError(f"label {label!r} not in vocabulary")
        out[pos[label]] = 1.0
    return out


def encode_onehot(vocabulary: Sequence[str], label: str) -> np.ndarray:
    return encode_multihot(vocabulary, [label])


def encode_year(year, mean: float, std: float) -> np.ndarray:
    if not std > 0:
        raise ValueError(f"year std must be positive, got {std}")
    return np.array([(float(year) - mean) / std])


def save_vocabulary(vocabulary: Sequence[str], path):
    Path(path).write_text("".join(f"{label}\n" for label in vocabulary), encoding="utf-8")


def load_vocabulary(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


# -- dense view files --------------------------------------------------------

def load_dense_view(path, expected_dim: int, name: str = "text",
                    kind: str = "dense") -> DirectViewTable:
    """Read ``item<TAB>x1<TAB>...<TAB>xd`` records; ``#`` lines are comments."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            item, values = parts[0], parts[1:]
            if len(values) != expected_dim:
                raise ViewParseError(path, lineno,
                                     f"expected {expected_dim} values, got {len(values)}")
            try:
                vec = np.array([float(v) for v in values])
            except ValueError as exc:
                raise ViewParseError(path, lineno, str(exc)) from None
            if not np.all(np.isfinite(vec)):
                raise ViewParseError(path, lineno, "non-finite value")
            if item in rows:
                raise ViewParseError(path, lineno, f"duplicate item id {item!r}")
            rows[item] = vec
    return DirectViewTable(ViewId(name, kind), expected_dim, rows)


def save_dense_view(table: DirectViewTable, path, header: Optional[str] = None):
    """Inverse of load_dense_view; floats are written with repr for exact round trip."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for item in sort_items(table.rows):
            fh.write(item if isinstance(item, str) else str(item))
            for x in table.rows[item]:
                fh.write("\t" + repr(float(x)))
            fh.write("\n")
