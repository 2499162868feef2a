"""Pair datasets, negative sampling and the two-phase training driver."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core_math import Adam, Param, ShapeError
from .model import LossOptions, NamModel, batch_loss
from .views import ViewId, ViewRegistry

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class SamplingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PairExample:
    context: str
    target: str
    negatives: tuple = ()

    def __post_init__(self):
        if self.context == self.target:
            raise ValueError("context and target must differ")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    N: int = 4
    lam: float = 0.1
    z_t: int = 100
    z_a: Optional[int] = None
    lr: float = 1e-3
    seed: int = 0
    stop_gradient_psi: bool = True
    include_positive_in_partition: bool = False
    score_temperature: bool = False
    attention_scale: float = 1.0
    max_pairs_per_epoch: Optional[int] = 1_000_000

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.N, self.z_t) < 0 or \
                min(self.batch_size, self.N, self.z_t) == 0:
            raise ValueError("epochs must be >= 0 and batch_size, N, z_t positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.z_a is None:
            self.z_a = self.z_t

    @property
    def loss_options(self):
        return LossOptions(self.stop_gradient_psi, self.include_positive_in_partition)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# -- data -----------------------------------------------------------------------

def build_pair_dataset(baskets, seed=None) -> list[PairExample]:
    """Every ordered pair of distinct items per basket, duplicates across baskets kept.

    ``seed`` is accepted for interface symmetry; the output order is the
    basket order and does not depend on it.
    """
    out = []
    for basket in getattr(baskets, "baskets", baskets):
        items = list(dict.fromkeys(basket))
        for i in items:
            for j in items:
                if i != j:
                    out.append(PairExample(i, j))
    return out


class CoConsumptionIndex:
    """Which items were ever consumed together, over a fixed item universe.

    ``pool`` is the set of items negatives may be drawn from (the training
    catalog); item positions follow ``universe``.
    """

    def __init__(self, baskets, universe: Sequence, pool: Optional[Sequence] = None):
        self.universe = list(universe)
        self.index = {item: k for k, item in enumerate(self.universe)}
        K = len(self.universe)
        self.K = K
        keys = set()
        seen = set()
        for basket in getattr(baskets, "baskets", baskets):
            ids = sorted({self.index[i] for i in basket})
            seen.update(ids)
            for a in ids:
                for b in ids:
                    keys.add(a * K + b)   # includes (a, a): an item never negates itself
        self.keys = np.array(sorted(keys), dtype=np.int64)
        if pool is None:
            pool_idx = sorted(seen)
        else:
            pool_idx = sorted(self.index[i] for i in pool)
        self.pool = np.array(pool_idx, dtype=np.int64)
        self._partner_count = None

    def contains(self, a, b) -> np.ndarray:
        keys = np.asarray(a, dtype=np.int64) * self.K + np.asarray(b, dtype=np.int64)
        if self.keys.size == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.keys, keys), self.keys.size - 1)
        return self.keys[pos] == keys

    def co_consumed(self, item) -> set:
        a = self.index[item]
        lo, hi = np.searchsorted(self.keys, [a * self.K, (a + 1) * self.K])
        return {self.universe[k - a * self.K] for k in self.keys[lo:hi]}

    def eligible(self, a: int) -> np.ndarray:
        return self.pool[~self.contains(np.full(self.pool.size, a), self.pool)]


def sample_negatives(context, N, index: CoConsumptionIndex, rng) -> list:
    """N uniform draws (with replacement) from items never co-consumed with context."""
    a = index.index[context]
    pool = index.eligible(a)
    if pool.size == 0:
        raise SamplingError(f"no eligible negatives for {context!r}")
    return [index.universe[k] for k in rng.choice(pool, size=N)]


def sample_negatives_batch(ctx: np.ndarray, N: int, index: CoConsumptionIndex, rng,
                           max_rounds=64):
    """Vectorised rejection sampling; returns (B x N negatives, ok mask).

    Contexts whose rejection loop does not settle fall back to an explicit
    eligible pool; contexts with an empty pool are reported in ``ok``.
    """
    pool = index.pool
    B = ctx.size
    negs = pool[rng.integers(0, pool.size, size=(B, N))]
    bad = index.contains(ctx[:, None], negs)
    for _ in range(max_rounds):
        if not bad.any():
            break
        negs[bad] = pool[rng.integers(0, pool.size, size=int(bad.sum()))]
        bad = index.contains(ctx[:, None], negs)
    ok = np.ones(B, dtype=bool)
    for r in np.flatnonzero(bad.any(axis=1)):
        elig = index.eligible(int(ctx[r]))
        if elig.size == 0:
            ok[r] = False
            continue
        negs[r, bad[r]] = rng.choice(elig, size=int(bad[r].sum()))
    return negs, ok


# -- driver -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: NamModel
    loss_trace: list = field(default_factory=list)
    skipped: int = 0


def pairs_to_indices(pairs: Sequence[PairExample], registry: ViewRegistry):
    idx = registry.index
    ctx = np.array([idx[p.context] for p in pairs], dtype=np.int64)
    tgt = np.array([idx[p.target] for p in pairs], dtype=np.int64)
    return ctx, tgt


def _train(model: NamModel, pairs, registry: ViewRegistry, config: TrainConfig,
           co_index: CoConsumptionIndex, phase: int, train_params, views=None,
           rng=None) -> TrainResult:
    model.check_registry(registry)
    if co_index.universe != registry.catalog:
        raise ValueError("co-consumption index must be built over the registry catalog")
    rng = rng if rng is not None else np.random.default_rng(config.seed + 7919 * phase)
    ctx_all, tgt_all = pairs_to_indices(pairs, registry)
    opt = Adam({n: model.params[n] for n in train_params}, lr=config.lr)
    trace, skipped = [], 0
    for epoch in range(config.epochs):
        order = rng.permutation(ctx_all.size)
        cap = config.max_pairs_per_epoch
        if cap is not None and order.size > cap:
            order = np.sort(rng.choice(order.size, size=cap, replace=False))
            order = rng.permutation(order)
        ctx_e, tgt_e = ctx_all[order], tgt_all[order]
        negs, ok = sample_negatives_batch(ctx_e, config.N, co_index, rng)
        skipped += int((~ok).sum())
        total, count = 0.0, 0
        for start in range(0, ctx_e.size, config.batch_size):
            sl = slice(start, start + config.batch_size)
            keep = ok[sl]
            if not keep.any():
                continue
            c = ctx_e[sl][keep]
            cand = np.concatenate([tgt_e[sl][keep][:, None], negs[sl][keep]], axis=1)
            opt.zero_grad()
            res = batch_loss(model, registry, c, cand, phase, config.lam,
                             config.loss_options, backward=True, views=views)
            if not np.isfinite(res.loss):
                raise TrainingError(
                    f"phase {phase}: non-finite loss at epoch {epoch + 1}, batch {start // config.batch_size}")
            skipped += res.n_skipped
            if res.n_valid:
                opt.step()
                total += res.loss * res.n_valid
                count += res.n_valid
        trace.append(total / count if count else float("nan"))
        log.info("phase %d epoch %d/%d mean loss %.5f", phase, epoch + 1, config.epochs,
                 trace[-1])
    return TrainResult(model, trace, skipped)


def train_phase1(model, pairs, registry, config: TrainConfig, co_index, views=None,
                 rng=None) -> TrainResult:
    """Minimise the per-view SNS losses; each tower only sees its own term.

    ``views`` limits training to those towers; all others are left untouched.
    """
    views = model.view_names if views is None else list(views)
    params = model.param_names(views, "embedding")
    return _train(model, pairs, registry, config, co_index, 1, params, views, rng)


def train_phase2(model, pairs, registry, config: TrainConfig, co_index, rng=None) -> TrainResult:
    """Learn attention and affine parameters; towers move only via the lambda term
    unless ``stop_gradient_psi`` is off."""
    params = model.param_names(group="attention")
    if config.lam > 0 or not config.stop_gradient_psi:
        params = model.param_names()
    return _train(model, pairs, registry, config, co_index, 2, params, None, rng)


def write_loss_csv(path, traces: dict, comment: str = ""):
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("epoch,phase,mean_loss\n")
        for phase, trace in traces.items():
            for e, v in enumerate(trace, 1):
                fh.write(f"{e},{phase},{v!r}\n")


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"NAMCKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(model: NamModel, config: Optional[TrainConfig], path) -> str:
    """Write a header (JSON) plus raw little-endian float64 arrays; returns sha256."""
    arrays = []
    views = []
    for v in model.view_order:
        tower = model.towers[v.name]
        views.append(dict(name=v.name, kind=v.kind, z_h=model.dims[v.name], arch=tower.arch,
                          params=tower.param_names))
    payload = io.BytesIO()
    for name in model.param_names():
        a = np.asarray(model.params[name].value, dtype="<f8", order="C")
        arrays.append(dict(name=name, shape=list(a.shape), offset=payload.tell()))
        payload.write(a.tobytes(order="C"))
    body = payload.getvalue()
    header = dict(version=FORMAT_VERSION, z_t=model.z_t, z_a=model.z_a,
                  score_temperature=model.score_temperature,
                  attention_scale=model.attention_scale,
                  view_order=[v.name for v in model.view_order], views=views, arrays=arrays,
                  config=config.to_dict() if config is not None else None,
                  payload_bytes=len(body), payload_sha256=hashlib.sha256(body).hexdigest())
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + len(head).to_bytes(8, "little") + head + body
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, registry: Optional[ViewRegistry] = None):
    """Returns (model, config dict). Nothing is returned on any inconsistency."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint")
    n = int.from_bytes(blob[len(MAGIC):len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    body = blob[start + n:]
    if len(body) != header["payload_bytes"] or \
            hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: truncated or corrupted payload")
    views = [ViewId(v["name"], v["kind"]) for v in header["views"]]
    model = NamModel(views, {v["name"]: v["z_h"] for v in header["views"]}, header["z_t"],
                     header["z_a"], header["score_temperature"],
                     header.get("attention_scale", 1.0))
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(body, dtype="<f8", count=count, offset=spec["offset"])
        model.params[spec["name"]] = Param(a.reshape(shape).astype(np.float64))
    missing = set(model.param_names()) - set(model.params)
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    if registry is not None:
        try:
            model.check_registry(registry)
        except ShapeError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
    return model, header.get("config")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
