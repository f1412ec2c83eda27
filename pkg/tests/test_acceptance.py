"""The nine acceptance criteria, each reporting one PASS/FAIL line.

Training runs are shared: the 3-seed runs on the acceptance world feed the
directional-gain, TIL-MI vs TIL-MIK, robustness and case-study criteria.
"""

import math
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from tilrec.clustering import cluster_grads, kl_loss, soft_assign, target
from tilrec.data import NoiseSpec, inject_noise, synthesize
from tilrec.evaluation import ndcg_at_k, recall_at_k
from tilrec.gradcheck import run_gradcheck
from tilrec.reports import case_study
from tilrec.trainer import TrainConfig, Trainer, train
from tilrec.weightgen import WeightNetParams

SEEDS = (0, 1, 2)
WORLD = dict(n_users=500, n_items=1000, n_latent_groups=8, noise_rate=0.2, item_spread=0.7, user_spread=0.7)
# selected on validation Recall@20 from the lr / l2 / alpha / gamma grids, scaled to desk size
CFG = TrainConfig(lr_inner=1e-3, lr_outer=1e-4, l2=1e-2, K=16, batch=1000, max_epochs=600, patience=50,
                  pretrain_epochs=50)


def _line(log, n, ok, detail):
    log(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@lru_cache(maxsize=None)
def world(seed):
    store, _ = synthesize(seed=seed, **WORLD)
    return store


@lru_cache(maxsize=None)
def noisy_world(seed):
    return inject_noise(world(seed), NoiseSpec("noisy_pos_neg", 0.5, seed))


@lru_cache(maxsize=None)
def run(strategy, seed, noisy=False):
    store = noisy_world(seed) if noisy else world(seed)
    start = time.perf_counter()
    res = train(store, replace(CFG, strategy=strategy, seed=seed))
    return res, res.test_metrics(store).recall[20], time.perf_counter() - start


def mean_recall(strategy, noisy=False):
    return float(np.mean([run(strategy, s, noisy)[1] for s in SEEDS]))


def seconds(strategies, noisy=False):
    return sum(run(st, s, noisy)[2] for st in strategies for s in SEEDS)


# -- 1 ---------------------------------------------------------------------------------

def test_c1_gradient_suite(acceptance_log):
    start = time.perf_counter()
    results = run_gradcheck(100, seed=0)
    took = time.perf_counter() - start
    ok = all(r.passed for r in results) and took < 60
    detail = ", ".join(f"{r.name}={r.max_rel_error:.1e}" for r in results)
    _line(acceptance_log, 1, ok, f"{detail} in {took:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------

def _trajectory(trainer, n_steps):
    snaps = []
    step = trainer.train_step

    def recording(batch):
        out = step(batch)
        snaps.append((trainer.model.table.P.copy(), trainer.model.table.Q.copy()))
        return out

    trainer.train_step = recording
    while len(snaps) < n_steps:
        trainer.run_epoch()
    return snaps[:n_steps]


def test_c2_reduction_identity(acceptance_log):
    store = world(0)
    cfg = replace(CFG, gamma=0.0, pretrain_epochs=0, seed=0)
    reference = _trajectory(Trainer(store, replace(cfg, strategy="baseline_bpr")), 50)
    mismatches = {}
    for strategy in ("til_ui", "til_mi", "til_mik"):
        til = Trainer(store, replace(cfg, strategy=strategy))
        til.model.gen = WeightNetParams.zeros(cfg.d)
        til.model.gen.b2[...] = 40.0  # sigmoid(40) rounds to exactly 1.0
        traj = _trajectory(til, 50)
        mismatches[strategy] = sum(not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]))
                                   for a, b in zip(reference, traj))
    ok = not any(mismatches.values())
    _line(acceptance_log, 2, ok, f"steps differing from BPR over 50: {mismatches}")
    assert ok


# -- 3 ---------------------------------------------------------------------------------

def test_c3_weight_collapse(acceptance_log):
    start = time.perf_counter()
    out = {}
    for scheme in ("joint", "bilevel"):
        cfg = replace(CFG, strategy="til_ui", scheme=scheme, max_epochs=100, patience=10**6, seed=0)
        out[scheme] = Trainer(world(0), cfg).fit().batch_mean_weights
    took = time.perf_counter() - start
    joint_min, bilevel_min = min(out["joint"]), min(out["bilevel"])
    ok = joint_min < 0.05 and bilevel_min > 0.2 and took < 300
    _line(acceptance_log, 3, ok, f"joint batch-mean weight min {joint_min:.4f} (< 0.05), "
          f"bilevel min {bilevel_min:.4f} (> 0.2), {took:.0f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------------------

def test_c4_directional_gain(acceptance_log):
    bpr, ui, mi = (mean_recall(s) for s in ("baseline_bpr", "til_ui", "til_mi"))
    took = seconds(("baseline_bpr", "til_ui", "til_mi"))
    gain = (mi - bpr) / bpr
    ok = gain >= 0.02 and mi >= ui and took < 900
    _line(acceptance_log, 4, ok, f"Recall@20 BPR {bpr:.4f}, UI {ui:.4f}, MI {mi:.4f}; "
          f"MI gain {100 * gain:+.2f}% (need >= +2%), MI >= UI: {mi >= ui}; {took:.0f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------------------

def test_c5_robustness_ordering(acceptance_log):
    strategies = ("baseline_bpr", "til_ui", "til_mi")
    drops = {s: mean_recall(s) - mean_recall(s, noisy=True) for s in strategies}
    took = seconds(strategies, noisy=True) + seconds(strategies)
    ok = drops["til_ui"] < drops["baseline_bpr"] and drops["til_mi"] < drops["baseline_bpr"] and took < 1800
    detail = ", ".join(f"{s} {d:.4f}" for s, d in drops.items())
    _line(acceptance_log, 5, ok, f"Recall@20 drop under noisy_pos_neg 0.5: {detail}; {took:.0f}s")
    assert ok


# -- 6 ---------------------------------------------------------------------------------

def test_c6_case_study(acceptance_log):
    res, _, _ = run("til_mi", 0)
    report = case_study(res.model, world(0), CFG.alpha_scale)
    top, border = report.cell(5, 1), report.cell(4, 3)
    ok = top is not None and border is not None and top > border
    _line(acceptance_log, 6, ok, f"normalized weight cell (5,1) = {top} vs (4,3) = {border}")
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def test_c7_clustering_invariants(acceptance_log):
    rng = np.random.default_rng(0)
    Q = soft_assign(rng.normal(size=(10_000, 4)), rng.normal(size=(8, 4)))
    T = target(Q)
    row_err = max(np.max(np.abs(Q.sum(axis=1) - 1)), np.max(np.abs(T.sum(axis=1) - 1)))

    kl_self = max(kl_loss(q[None], q[None]) for q in Q[:200])
    kl_other = [kl_loss(T[k:k + 1], Q[k:k + 1]) for k in range(200) if not np.array_equal(T[k], Q[k])]
    dist = rng.dirichlet(np.ones(8), size=200)
    kl_rand = [kl_loss(dist[k:k + 1], Q[k:k + 1]) for k in range(200)]

    items, centers = rng.normal(size=(60, 4)), rng.normal(size=(5, 4))
    frozen = target(soft_assign(items, centers))
    losses = [kl_loss(frozen, soft_assign(items, centers))]
    for _ in range(200):
        _, gi, gc = cluster_grads(items, centers, frozen)
        items -= 0.01 * gi
        centers -= 0.01 * gc
        losses.append(kl_loss(frozen, soft_assign(items, centers)))
    worst_rise = max(b - a for a, b in zip(losses, losses[1:]))

    ok = (row_err < 1e-9 and kl_self == 0.0 and min(kl_other) > 0 and min(kl_rand) > 0
          and worst_rise <= 1e-10)
    _line(acceptance_log, 7, ok, f"row-sum error {row_err:.1e}, KL(Q,Q) max {kl_self}, "
          f"KL(T,Q) min {min(kl_other):.1e}, largest per-step KL rise {worst_rise:.1e}")
    assert ok


# -- 8 ---------------------------------------------------------------------------------

def _brute_recall(ranked, test, k):
    hits = 0
    for item in ranked[:k]:
        if item in test:
            hits += 1
    return hits / len(test)


def _brute_ndcg(ranked, test, k):
    dcg = 0.0
    for r, item in enumerate(ranked[:k]):
        if item in test:
            dcg += 1.0 / math.log2(r + 2)
    idcg = 0.0
    for r in range(min(k, len(test))):
        idcg += 1.0 / math.log2(r + 2)
    return dcg / idcg


def test_c8_metric_oracle(acceptance_log):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        ranked = [int(x) for x in rng.permutation(n)]
        test = {int(x) for x in rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)}
        k = int(rng.integers(1, n + 1))
        mismatches += recall_at_k(ranked, test, k) != _brute_recall(ranked, test, k)
        mismatches += ndcg_at_k(ranked, test, k) != _brute_ndcg(ranked, test, k)
    hand = ndcg_at_k([0, 7, 1], [7], 3)
    ok = mismatches == 0 and abs(hand - 0.6309297535714574) < 1e-12
    _line(acceptance_log, 8, ok, f"{mismatches} mismatches over 1000 instances, rank-2 hit ndcg {hand:.13f}")
    assert ok


# -- 9 ---------------------------------------------------------------------------------

def test_c9_mi_vs_mik(acceptance_log):
    mi, mik = mean_recall("til_mi"), mean_recall("til_mik")
    ok = mi >= mik
    _line(acceptance_log, 9, ok, f"Recall@20 TIL-MI {mi:.4f} vs TIL-MIK {mik:.4f} (diff {mi - mik:+.4f})")
    assert ok
