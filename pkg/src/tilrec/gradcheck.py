"""Central finite-difference checks for every analytic gradient in the package.

Each check draws small random instances in double precision and returns the
worst relative error seen. Relative error per entry is
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from tilrec import clustering, interest, weightgen
from tilrec.backbone import EmbeddingTable, bpr_coeffs, bpr_grad, bpr_loss, l2_penalty, margins, softplus
from tilrec.sampler import Batch, Triplet
from tilrec.trainer import outer_gradient, theta_grads
from tilrec.weightgen import WeightNetParams

STEP = 1e-5
FLOOR = 1e-6  # central-difference roundoff at STEP is ~1e-11 absolute
KINK_MARGIN = 1e-3


def central_diff(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Numerical gradient of ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    g = np.zeros(x.shape)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _rand_table(rng, n_users, n_items, d, scale=1.0):
    return EmbeddingTable(scale * rng.normal(size=(n_users, d)), scale * rng.normal(size=(n_items, d)))


def _rand_gen(rng, d, scale=1.0):
    return WeightNetParams(scale * rng.normal(size=(d, 2 * d)), scale * rng.normal(size=d),
                           scale * rng.normal(size=d), scale * rng.normal(size=()))


def _near_kink(gen, S) -> bool:
    pre = S @ gen.W1.T + gen.b1
    return bool(np.any(np.abs(pre) < KINK_MARGIN))


def _rand_batch(rng, n_users, n_items, size):
    u = rng.integers(n_users, size=size)
    i = rng.integers(n_items, size=size)
    j = (i + 1 + rng.integers(n_items - 1, size=size)) % n_items
    return Batch(u, i, j)


# -- individual checks ----------------------------------------------------------------

def check_bpr(rng) -> float:
    table = _rand_table(rng, 3, 4, 3)
    u, i = int(rng.integers(3)), int(rng.integers(4))
    j = int((i + 1 + rng.integers(3)) % 4)
    t = Triplet(u, i, j)
    l2 = float(rng.uniform(0, 0.1))

    def f():
        return bpr_loss(table, t) + l2_penalty(table, [u], [i, j], l2)

    g = bpr_grad(table, t, l2).dense(table)
    return max(rel_error(g["P"], central_diff(f, table.P)), rel_error(g["Q"], central_diff(f, table.Q)))


def _rand_store(rng, n_users, n_items):
    from tilrec.data import InteractionStore
    train = []
    for _ in range(n_users):
        k = int(rng.integers(1, n_items))
        train.append(rng.choice(n_items, size=k, replace=False))
    return InteractionStore.from_lists(n_users, n_items, train, [[]] * n_users, [[]] * n_users)


def check_weighted(rng) -> float:
    """Mean weighted BPR loss: model gradient with frozen weights, generator gradient,
    and the full gradient when states are differentiated too (UI and MI)."""
    n_users, n_items, d, B = 3, 5, 3, 6
    store = _rand_store(rng, n_users, n_items)
    table = _rand_table(rng, n_users, n_items, d)
    gen = _rand_gen(rng, d)
    batch = _rand_batch(rng, n_users, n_items, B)
    eta = interest.all_interests(table, store)
    S = interest.states_ui(table, eta, *batch)
    if _near_kink(gen, S):
        return check_weighted(rng)
    worst = 0.0

    # frozen states: weights are constants for the model parameters
    w, cache = weightgen.weights(gen, S)
    x = margins(table, *batch)
    g = theta_grads(table, batch, w * bpr_coeffs(x) / B, 0.0)

    def f_frozen():
        return float(np.mean(w * softplus(-margins(table, *batch))))

    worst = max(worst, rel_error(g["P"], central_diff(f_frozen, table.P)),
                rel_error(g["Q"], central_diff(f_frozen, table.Q)))

    # generator parameters (single-level objective)
    losses = softplus(-x)
    g_lam, _ = weightgen.backward(gen, cache, losses / B)

    def f_gen():
        ww, _ = weightgen.weights(gen, S)
        return float(np.mean(ww * losses))

    for name, arr in gen.params().items():
        worst = max(worst, rel_error(g_lam[name], central_diff(f_gen, arr)))

    # states differentiated w.r.t. the embeddings and centers
    K = 2
    centers = rng.normal(size=(K, d))
    membership = rng.integers(K, size=n_items)
    alpha = float(rng.uniform(0.1, 2.0))
    for use_mi in (False, True):
        def states():
            e = interest.all_interests(table, store)
            if use_mi:
                return interest.states_mi(table, e, *batch, centers, membership, alpha)
            return interest.states_ui(table, e, *batch)

        S2 = states()
        if _near_kink(gen, S2):
            continue
        w2, cache2 = weightgen.weights(gen, S2)
        l2_ = softplus(-margins(table, *batch))
        gth = theta_grads(table, batch, w2 * bpr_coeffs(margins(table, *batch)) / B, 0.0)
        _, g_s = weightgen.backward(gen, cache2, l2_ / B, need_state_grad=True)
        gP, gQ, gPhi = interest.state_backward(table, store, interest.all_interests(table, store), *batch, g_s,
                                               centers if use_mi else None,
                                               membership if use_mi else None, alpha)

        def f_full():
            ww, _ = weightgen.weights(gen, states())
            return float(np.mean(ww * softplus(-margins(table, *batch))))

        worst = max(worst, rel_error(gth["P"] + gP, central_diff(f_full, table.P)),
                    rel_error(gth["Q"] + gQ, central_diff(f_full, table.Q)))
        if use_mi:
            worst = max(worst, rel_error(gPhi, central_diff(f_full, centers)))
    return worst


def check_weightnet(rng) -> float:
    d = int(rng.integers(2, 5))
    gen = _rand_gen(rng, d)
    s = rng.normal(size=2 * d)
    if _near_kink(gen, s[None, :]):
        return check_weightnet(rng)
    _, cache = weightgen.weight_forward(gen, s)
    grads, g_s = weightgen.weight_backward(gen, cache)

    def f():
        return weightgen.weight_forward(gen, s)[0]

    worst = rel_error(g_s, central_diff(f, s))
    for name, arr in gen.params().items():
        worst = max(worst, rel_error(grads[name], central_diff(f, arr)))
    return worst


def check_cluster(rng) -> float:
    n, K, d = 5, 3, 4
    items = rng.normal(size=(n, d))
    centers = rng.normal(size=(K, d))
    tau = float(rng.choice([0.5, 1.0, 2.0]))
    tgt = clustering.target(clustering.soft_assign(items, centers, tau))
    _, g_items, g_centers = clustering.cluster_grads(items, centers, tgt, tau)

    def f():
        return clustering.kl_loss(tgt, clustering.soft_assign(items, centers, tau))

    return max(rel_error(g_items, central_diff(f, items)), rel_error(g_centers, central_diff(f, centers)))


def composite_outer_scalar(table: EmbeddingTable, gen: WeightNetParams, inner, states, outer,
                           lr_inner: float, l2: float) -> float:
    """``J_outer(theta - lr * grad J_inner(theta, lambda))`` with explicit per-triplet loops.

    Sum reduction; independent of the vectorized training code.
    """
    P, Q = table.P, table.Q
    gP, gQ = np.zeros_like(P), np.zeros_like(Q)
    for t, (u, i, j) in enumerate(zip(*inner)):
        s = states[t]
        z = np.maximum(gen.W1 @ s + gen.b1, 0.0)
        w = 1.0 / (1.0 + math.exp(-(float(gen.W2 @ z) + float(gen.b2))))
        x = float(P[u] @ Q[i] - P[u] @ Q[j])
        c = -w / (1.0 + math.exp(x))
        gP[u] += c * (Q[i] - Q[j])
        gQ[i] += c * P[u]
        gQ[j] -= c * P[u]
    for u in set(int(v) for v in inner[0]):
        gP[u] += 2 * l2 * P[u]
    for i in set(int(v) for v in inner[1]) | set(int(v) for v in inner[2]):
        gQ[i] += 2 * l2 * Q[i]
    Pt, Qt = P - lr_inner * gP, Q - lr_inner * gQ
    total = 0.0
    for u, i, j in zip(*outer):
        x = float(Pt[u] @ Qt[i] - Pt[u] @ Qt[j])
        total += math.log1p(math.exp(-x)) if x > -30 else -x
    return total


def check_outer(rng) -> float:
    """The tiny instance: 2 users, 3 items, d = 2, two inner and two outer triplets."""
    n_users, n_items, d = 2, 3, 2
    table = _rand_table(rng, n_users, n_items, d)
    gen = _rand_gen(rng, d)
    inner = _rand_batch(rng, n_users, n_items, 2)
    outer = _rand_batch(rng, n_users, n_items, 2)
    states = rng.normal(size=(2, 2 * d))
    if _near_kink(gen, states):
        return check_outer(rng)
    lr = float(rng.uniform(0.05, 0.5))
    l2 = float(rng.uniform(0, 0.05))
    grads, _, _, _ = outer_gradient(table, gen, inner, states, outer, lr, l2, "sum")

    def f():
        return composite_outer_scalar(table, gen, inner, states, outer, lr, l2)

    worst = 0.0
    for name, arr in gen.params().items():
        worst = max(worst, rel_error(grads[name], central_diff(f, arr)))
    return worst


# -- suite ----------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


CHECKS: dict[str, tuple[Callable, float]] = {
    "bpr": (check_bpr, 1e-4),
    "weighted_loss": (check_weighted, 1e-4),
    "weight_net": (check_weightnet, 1e-4),
    "cluster_kl": (check_cluster, 1e-4),
    "bilevel_outer": (check_outer, 1e-3),
}


def run_gradcheck(n_instances: int = 100, seed: int = 0, checks=None) -> list[CheckResult]:
    checks = CHECKS if checks is None else checks
    results = []
    for k, (name, (fn, tol)) in enumerate(checks.items()):
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        worst = max(fn(rng) for _ in range(n_instances))
        results.append(CheckResult(name, worst, tol, n_instances, time.perf_counter() - start))
    return results
