import math
from dataclasses import replace

import numpy as np
import pytest

from tilrec import trainer as trainer_mod
from tilrec.backbone import EmbeddingTable, bpr_coeffs, margins, softplus
from tilrec.data import InteractionStore, synthesize
from tilrec.errors import ConfigError, NumericalFault
from tilrec.evaluation import MetricsReport, topk_from_scores
from tilrec.gradcheck import check_outer
from tilrec.interest import all_interests, states_ui
from tilrec.optim import Adam
from tilrec.sampler import Batch
from tilrec.trainer import (TILModel, TrainConfig, Trainer, outer_gradient, theta_grads, train, virtual_step,
                            weighted_loss)
from tilrec.weightgen import WeightNetParams

TINY = dict(d=8, K=4, batch=128, max_epochs=4, pretrain_epochs=2, patience=50, refresh_every=3)


@pytest.fixture(scope="module")
def world():
    store, _ = synthesize(40, 80, 3, noise_rate=0.2, seed=0, density=0.1)
    return store


def _rand_problem(seed, n_users=4, n_items=7, d=3, B=8):
    rng = np.random.default_rng(seed)
    table = EmbeddingTable(rng.normal(size=(n_users, d)), rng.normal(size=(n_items, d)))
    gen = WeightNetParams(rng.normal(size=(d, 2 * d)), rng.normal(size=d), rng.normal(size=d), rng.normal())
    u = rng.integers(n_users, size=B)
    i = rng.integers(n_items, size=B)
    j = (i + 1 + rng.integers(n_items - 1, size=B)) % n_items
    return table, gen, Batch(u, i, j), rng


# -- weighted loss ------------------------------------------------------------------

def test_zero_weights_zero_loss():
    table, gen, batch, rng = _rand_problem(0)
    gen = WeightNetParams.zeros(3)
    gen.b2[...] = -800.0
    assert weighted_loss(table, gen, batch, rng.normal(size=(8, 6))) == 0.0


def test_unit_weights_equal_mean_bpr():
    table, _, batch, rng = _rand_problem(1)
    gen = WeightNetParams.zeros(3)
    gen.b2[...] = 40.0
    expected = float(np.mean(softplus(-margins(table, *batch))))
    assert weighted_loss(table, gen, batch, rng.normal(size=(8, 6))) == pytest.approx(expected, abs=1e-12)


def test_weighted_loss_matches_loop():
    table, gen, batch, rng = _rand_problem(2)
    S = rng.normal(size=(8, 6))
    total = []
    for t, (u, i, j) in enumerate(zip(*batch)):
        z = np.maximum(gen.W1 @ S[t] + gen.b1, 0.0)
        w = 1.0 / (1.0 + math.exp(-(float(gen.W2 @ z) + float(gen.b2))))
        x = float(table.P[u] @ table.Q[i] - table.P[u] @ table.Q[j])
        total.append(w * math.log1p(math.exp(-x)))
    assert weighted_loss(table, gen, batch, S) == pytest.approx(math.fsum(total) / 8, abs=1e-12)


# -- inner step ----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"P": np.arange(6.0).reshape(2, 3)}
    before = p["P"].copy()
    Adam(0.1).step(p, {"P": np.zeros((2, 3))})
    np.testing.assert_array_equal(p["P"], before)


def test_single_triplet_step_matches_scalar_adam():
    table, _, _, _ = _rand_problem(3, n_users=2, n_items=3, d=2)
    batch = Batch(np.array([1]), np.array([0]), np.array([2]))
    w, lr, l2 = 0.3, 0.05, 0.01
    b1, b2, eps = 0.9, 0.999, 1e-8
    P0, Q0 = table.P.copy(), table.Q.copy()
    opt = Adam(lr)
    for _ in range(3):
        x = margins(table, *batch)
        opt.step(table.params(), theta_grads(table, batch, w * bpr_coeffs(x), l2))

    # scalar oracle, one coordinate at a time
    P, Q = P0.copy(), Q0.copy()
    mP, vP, mQ, vQ = np.zeros_like(P), np.zeros_like(P), np.zeros_like(Q), np.zeros_like(Q)
    for t in range(1, 4):
        x = float(P[1] @ Q[0] - P[1] @ Q[2])
        c = -w / (1.0 + math.exp(x))
        gP, gQ = np.zeros_like(P), np.zeros_like(Q)
        for k in range(2):
            gP[1, k] = c * (Q[0, k] - Q[2, k]) + 2 * l2 * P[1, k]
            gQ[0, k] = c * P[1, k] + 2 * l2 * Q[0, k]
            gQ[2, k] = -c * P[1, k] + 2 * l2 * Q[2, k]
        for arr, g, m, v in ((P, gP, mP, vP), (Q, gQ, mQ, vQ)):
            for idx in np.ndindex(arr.shape):
                m[idx] = b1 * m[idx] + (1 - b1) * g[idx]
                v[idx] = b2 * v[idx] + (1 - b2) * g[idx] ** 2
                arr[idx] -= lr * (m[idx] / (1 - b1 ** t)) / (math.sqrt(v[idx] / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(table.P, P, atol=1e-14)
    np.testing.assert_allclose(table.Q, Q, atol=1e-14)


def test_adam_late_block_bias_correction():
    opt = Adam(0.1)
    a, b = {"x": np.zeros(1)}, {"y": np.zeros(1)}
    opt.step(a, {"x": np.ones(1)})
    opt.step(a, {"x": np.ones(1)})
    opt.step(b, {"y": np.ones(1)})
    # a fresh block's first step moves by lr, regardless of when it joins
    assert b["y"][0] == pytest.approx(-0.1, abs=1e-9)


# -- virtual step and outer gradient ---------------------------------------------------------

def test_virtual_step_trivial():
    table, _, batch, _ = _rand_problem(4)
    zero = {"P": np.zeros_like(table.P), "Q": np.zeros_like(table.Q)}
    proxy = virtual_step(table, zero, 0.3)
    np.testing.assert_array_equal(proxy.P, table.P)
    g = theta_grads(table, batch, bpr_coeffs(margins(table, *batch)), 0.0)
    proxy = virtual_step(table, g, 0.0)
    np.testing.assert_array_equal(proxy.Q, table.Q)


def test_virtual_step_matches_formula():
    table, _, batch, _ = _rand_problem(5)
    coef = bpr_coeffs(margins(table, *batch))
    g = theta_grads(table, batch, coef, 0.02)
    proxy = virtual_step(table, g, 0.1)
    gP, gQ = np.zeros_like(table.P), np.zeros_like(table.Q)
    for c, u, i, j in zip(coef, *batch):
        gP[u] += c * (table.Q[i] - table.Q[j])
        gQ[i] += c * table.P[u]
        gQ[j] -= c * table.P[u]
    for u in set(batch.u.tolist()):
        gP[u] += 0.04 * table.P[u]
    for i in set(batch.i.tolist()) | set(batch.j.tolist()):
        gQ[i] += 0.04 * table.Q[i]
    np.testing.assert_allclose(proxy.P, table.P - 0.1 * gP, atol=1e-13)
    np.testing.assert_allclose(proxy.Q, table.Q - 0.1 * gQ, atol=1e-13)


def test_outer_gradient_zero_without_inner_pathway():
    _, gen, batch, rng = _rand_problem(6)
    table = EmbeddingTable(np.zeros((4, 3)), np.zeros((7, 3)))
    grads, _, _, _ = outer_gradient(table, gen, batch, rng.normal(size=(8, 6)), batch, 0.1)
    for g in grads.values():
        assert np.all(g == 0)


def test_outer_gradient_zero_at_zero_lr():
    table, gen, batch, rng = _rand_problem(7)
    grads, _, _, _ = outer_gradient(table, gen, batch, rng.normal(size=(8, 6)), batch, 0.0, l2=0.01)
    for g in grads.values():
        assert np.all(g == 0)


@pytest.mark.parametrize("seed", range(20))
def test_outer_gradient_finite_differences(seed):
    assert check_outer(np.random.default_rng([seed, 99])) < 1e-3


# -- config ---------------------------------------------------------------------------

def test_config_from_strings():
    cfg = TrainConfig.from_dict({"strategy": "til_ui", "lr_inner": "0.01", "K": "12", "state_grad": "yes"})
    assert cfg.lr_inner == 0.01 and cfg.K == 12 and cfg.state_grad is True


@pytest.mark.parametrize("values, field", [
    ({"strategy": "nope"}, "strategy"),
    ({"lr_inner": "-1"}, "lr_inner"),
    ({"K": "2.5"}, "K"),
    ({"mystery": "1"}, "mystery"),
])
def test_config_errors_name_field(values, field):
    with pytest.raises(ConfigError) as exc:
        TrainConfig.from_dict(values)
    assert exc.value.field == field


def test_too_many_clusters(world):
    with pytest.raises(ConfigError):
        Trainer(world, TrainConfig(strategy="til_mi", K=world.n_items + 1, d=4))


# -- training loop ------------------------------------------------------------------------

def test_early_stop_with_patience_one(world, monkeypatch):
    flat = MetricsReport({20: 0.5}, {20: 0.5}, 1)
    monkeypatch.setattr(trainer_mod, "evaluate", lambda *a, **k: flat)
    res = train(world, TrainConfig(strategy="baseline_bpr", patience=1, max_epochs=10, d=4))
    assert res.stopped_epoch == 2 and res.best_epoch == 1


def test_no_stopping_during_warmup(world, monkeypatch):
    flat = MetricsReport({20: 0.5}, {20: 0.5}, 1)
    monkeypatch.setattr(trainer_mod, "evaluate", lambda *a, **k: flat)
    res = train(world, TrainConfig(strategy="til_mi", **{**TINY, "patience": 1, "max_epochs": 10}))
    assert res.stopped_epoch == TINY["pretrain_epochs"] + 1


def test_bpr_memorizes_separable_world():
    # 20 users, each with 5 of 40 items; rank-d MF can order any such pattern
    rng = np.random.default_rng(0)
    train_pos = [np.sort(rng.choice(40, size=5, replace=False)) for _ in range(20)]
    store = InteractionStore.from_lists(20, 40, train_pos, [[]] * 20, [[]] * 20)
    res = train(store, TrainConfig(strategy="baseline_bpr", d=16, lr_inner=0.05, l2=0.0, max_epochs=200,
                                   patience=1000, batch=100))
    ranked = topk_from_scores(res.model.table.P @ res.model.table.Q.T, 20)
    recall = np.mean([np.isin(train_pos[u], ranked[u]).mean() for u in range(20)])
    assert recall == 1.0


def test_mi_without_clustering_terms_tracks_ui(world):
    cfg = TrainConfig(strategy="til_ui", **TINY)
    ui = Trainer(world, cfg)
    mi = Trainer(world, replace(cfg, strategy="til_mi", gamma=0.0, alpha_scale=0.0))
    for _ in range(TINY["max_epochs"]):
        ui.run_epoch()
        mi.run_epoch()
    assert mi.model.clusters is not None
    np.testing.assert_array_equal(ui.model.table.P, mi.model.table.P)
    np.testing.assert_array_equal(ui.model.table.Q, mi.model.table.Q)
    np.testing.assert_array_equal(ui.model.gen.W1, mi.model.gen.W1)


def test_frozen_unit_weights_step_equals_bpr(world):
    for strategy in ("til_ui", "til_mi"):
        cfg = TrainConfig(strategy=strategy, gamma=0.0, **{**TINY, "pretrain_epochs": 0})
        bpr = Trainer(world, replace(cfg, strategy="baseline_bpr"))
        til = Trainer(world, cfg)
        til.model.gen = WeightNetParams.zeros(cfg.d)
        til.model.gen.b2[...] = 40.0
        bpr.run_epoch()
        til.run_epoch()
        np.testing.assert_array_equal(bpr.model.table.P, til.model.table.P)
        np.testing.assert_array_equal(bpr.model.table.Q, til.model.table.Q)


def test_training_is_deterministic(world):
    cfg = TrainConfig(strategy="til_mi", **TINY)
    a, b = train(world, cfg), train(world, cfg)
    np.testing.assert_array_equal(a.model.table.P, b.model.table.P)
    assert a.test_metrics(world).recall == b.test_metrics(world).recall
    assert [r.val_recall for r in a.history] == [r.val_recall for r in b.history]


@pytest.mark.parametrize("overrides", [
    {"strategy": "til_mik"},
    {"strategy": "til_mi", "state_grad": True},
    {"strategy": "til_ui", "outer_mode": "first_order"},
    {"strategy": "til_ui", "scheme": "joint"},
    {"strategy": "til_mi", "reduction": "mean", "outer_every": 2, "sampler": "popularity"},
])
def test_variants_run_and_stay_finite(world, overrides):
    res = train(world, TrainConfig(**{**TINY, **overrides}))
    assert res.model.table.is_finite() and res.model.gen.is_finite()
    assert len(res.history) == TINY["max_epochs"]
    assert all(0.0 < w < 1.0 for w in res.batch_mean_weights)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_parameters_raise(world):
    tr = Trainer(world, TrainConfig(strategy="til_ui", **TINY))
    tr.model.table.P[:] = np.nan
    with pytest.raises(NumericalFault):
        tr.run_epoch()


def test_model_roundtrip(tmp_path, world):
    tr = Trainer(world, TrainConfig(strategy="til_mi", **TINY))
    for _ in range(TINY["max_epochs"]):
        tr.run_epoch()
    model = tr.model
    model.save(tmp_path / "m.npz", seed=0)
    back = TILModel.load(tmp_path / "m.npz")
    np.testing.assert_array_equal(back.table.Q, model.table.Q)
    np.testing.assert_array_equal(back.gen.W1, model.gen.W1)
    np.testing.assert_array_equal(back.clusters.centers, model.clusters.centers)
    np.testing.assert_array_equal(back.clusters.membership, model.clusters.membership)


def test_states_shape(world):
    table = EmbeddingTable.init(world.n_users, world.n_items, 5, 0)
    S = states_ui(table, all_interests(table, world), [0, 1], [0, 1], [2, 3])
    assert S.shape == (2, 10)
