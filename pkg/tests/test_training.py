import numpy as np
import pytest

from nam.diagnostics import toy_problem
from nam.model import NamModel
from nam.synthetic import cluster_baskets, informative_noise_registry
from nam.training import (
    CheckpointError, CoConsumptionIndex, PairExample, TrainConfig, build_pair_dataset,
    load_checkpoint, sample_negatives, sample_negatives_batch, save_checkpoint, train_phase1,
    train_phase2, write_loss_csv,
)


def small_problem(seed=0):
    items, cluster, baskets = cluster_baskets(40, 4, 120, seed=seed)
    reg = informative_noise_registry(items, cluster, noise_dim=4, seed=seed)
    return reg, baskets


def test_pair_example_rejects_self_pair():
    with pytest.raises(ValueError):
        PairExample("a", "a")


def test_pair_dataset_all_ordered_pairs():
    pairs = build_pair_dataset([("a", "b", "c"), ("a", "b")])
    got = [(p.context, p.target) for p in pairs]
    assert len(got) == 6 + 2
    assert got.count(("a", "b")) == 2


def test_negatives_never_co_consumed():
    reg, baskets = small_problem()
    co = CoConsumptionIndex(baskets, reg.catalog)
    together = {(a, b) for bk in baskets for a in bk for b in bk}
    rng = np.random.default_rng(0)
    ctx = np.array([reg.index[b[0]] for b in baskets] * 5)
    negs, ok = sample_negatives_batch(ctx, 4, co, rng)
    assert ok.all()
    for c, row in zip(ctx, negs):
        for n in row:
            assert (reg.catalog[c], reg.catalog[n]) not in together


def test_negatives_uniform_over_eligible():
    baskets = [("a", "b"), ("c", "d"), ("e", "f")]
    universe = ["a", "b", "c", "d", "e", "f"]
    co = CoConsumptionIndex(baskets, universe)
    rng = np.random.default_rng(1)
    draws = sample_negatives("a", 200_000, co, rng)
    counts = {x: draws.count(x) for x in "cdef"}
    assert set(draws) == set("cdef")
    for c in counts.values():
        assert abs(c / 50_000 - 1) < 0.05


def test_train_loss_trace_and_phase_param_groups():
    reg, baskets = small_problem(1)
    cfg = TrainConfig(epochs=3, z_t=6, batch_size=16, lr=3e-3, seed=2)
    model = NamModel.for_registry(reg, cfg.z_t, cfg.z_a, cfg.seed)
    co = CoConsumptionIndex(baskets, reg.catalog)
    pairs = build_pair_dataset(baskets)
    before = {n: p.value.copy() for n, p in model.params.items()}
    r1 = train_phase1(model, pairs, reg, cfg, co)
    assert len(r1.loss_trace) == 3 and all(np.isfinite(r1.loss_trace))
    for n in model.param_names(group="attention"):
        assert np.array_equal(model.params[n].value, before[n])

    cfg0 = TrainConfig(epochs=2, z_t=6, batch_size=16, lam=0.0, seed=2)
    frozen = {n: model.params[n].value.copy() for n in model.param_names(group="embedding")}
    r2 = train_phase2(model, pairs, reg, cfg0, co)
    assert len(r2.loss_trace) == 2
    for n, v in frozen.items():
        assert model.params[n].value.tobytes() == v.tobytes()


def test_phase1_restricted_to_one_tower():
    reg, baskets = small_problem(2)
    cfg = TrainConfig(epochs=1, z_t=5, batch_size=8, seed=0)
    model = NamModel.for_registry(reg, 5, 5, 0)
    before = {n: p.value.copy() for n, p in model.params.items()}
    train_phase1(model, build_pair_dataset(baskets), reg, cfg,
                 CoConsumptionIndex(baskets, reg.catalog), views=["B"])
    for n in model.towers["A"].param_names:
        assert model.params[n].value.tobytes() == before[n].tobytes()
    assert any(not np.array_equal(model.params[n].value, before[n])
               for n in model.towers["B"].embedding_params)


def test_training_is_seed_deterministic():
    reg, baskets = small_problem(3)
    outs = []
    for _ in range(2):
        cfg = TrainConfig(epochs=1, z_t=5, batch_size=8, seed=9)
        model = NamModel.for_registry(reg, 5, 5, 9)
        co = CoConsumptionIndex(baskets, reg.catalog)
        pairs = build_pair_dataset(baskets)
        train_phase1(model, pairs, reg, cfg, co)
        train_phase2(model, pairs, reg, cfg, co)
        outs.append(b"".join(model.params[n].value.tobytes() for n in model.param_names()))
    assert outs[0] == outs[1]


def test_checkpoint_round_trip(tmp_path):
    model, reg, _ = toy_problem(0, score_temperature=True)
    cfg = TrainConfig(z_t=4)
    d1 = save_checkpoint(model, cfg, tmp_path / "a.ckpt")
    back, cdict = load_checkpoint(tmp_path / "a.ckpt", reg)
    assert cdict["z_t"] == 4
    for n in model.param_names():
        assert back.params[n].value.tobytes() == model.params[n].value.tobytes()
    d2 = save_checkpoint(back, cfg, tmp_path / "b.ckpt")
    assert d1 == d2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_truncated_and_mismatched(tmp_path):
    model, reg, _ = toy_problem(0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, None, p)
    blob = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(ValueError):
        load_checkpoint(p, reg.without_view("text"))


def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "l.csv", {1: [0.5, 0.25]}, "seed=1")
    assert (tmp_path / "l.csv").read_text() == "# seed=1\nepoch,phase,mean_loss\n1,1,0.5\n2,1,0.25\n"


def test_config_round_trip_and_validation():
    cfg = TrainConfig(epochs=2, lam=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.z_a == cfg.z_t
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)


def test_checkpoint_keeps_scalar_shapes(tmp_path):
    model, reg, _ = toy_problem(1)
    save_checkpoint(model, None, tmp_path / "s.ckpt")
    back, _ = load_checkpoint(tmp_path / "s.ckpt")
    for n in model.param_names():
        assert back.params[n].value.shape == model.params[n].value.shape
