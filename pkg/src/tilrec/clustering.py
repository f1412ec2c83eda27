"""End-to-end item clustering with a Student's-t kernel and KL self-training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterState:
    """Learnable centers plus the soft/target/hard assignments from the last refresh."""

    centers: np.ndarray
    soft: np.ndarray | None = None
    target: np.ndarray | None = None
    membership: np.ndarray | None = None
    tau: float = 1.0

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    def refresh(self, item_emb: np.ndarray) -> None:
        """Recompute soft assignments, targets and hard memberships from ``item_emb``."""
        self.soft = soft_assign(item_emb, self.centers, self.tau)
        self.target = target(self.soft)
        self.membership = refresh_membership(self.soft)

    def copy(self) -> ClusterState:
        def cp(a):
            return None if a is None else a.copy()
        return ClusterState(self.centers.copy(), cp(self.soft), cp(self.target), cp(self.membership), self.tau)


def sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (np.sum(points ** 2, axis=1)[:, None] + np.sum(centers ** 2, axis=1)[None, :]
          - 2.0 * points @ centers.T)
    return np.maximum(d2, 0.0)


def _kmeans_pp(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = sq_distances(points, points[chosen[0]][None, :])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a chosen center
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        closest = np.minimum(closest, sq_distances(points, points[nxt][None, :])[:, 0])
    return points[chosen].copy()


def kmeans(points: np.ndarray, K: int, seed=0, max_iter: int = 100, tol: float = 1e-6,
           init: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iter`` iterations or once the relative inertia change
    drops below ``tol``. An emptied cluster is reseeded at the point farthest
    from its current center.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n < K:
        raise ValueError(f"kmeans needs at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, K, rng) if init is None else np.array(init, dtype=float)

    prev = np.inf
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = sq_distances(points, centers)
        assign = np.argmin(d2, axis=1)
        dist = d2[np.arange(n), assign]
        counts = np.bincount(assign, minlength=K)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist))
            assign[far] = k
            dist[far] = 0.0
            counts = np.bincount(assign, minlength=K)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, points)
        centers = sums / counts[:, None]
        inertia = float(sq_distances(points, centers)[np.arange(n), assign].sum())
        if prev < np.inf and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        if inertia == 0.0:
            break
        prev = inertia
    assign = np.argmin(sq_distances(points, centers), axis=1)
    return centers, assign


def _log_kernel(d2: np.ndarray, tau: float) -> np.ndarray:
    return -0.5 * (tau + 1.0) * np.log1p(d2 / tau)


def soft_assign(item_emb: np.ndarray, centers: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Student's-t soft assignment of every item to every center (rows sum to 1)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    logk = _log_kernel(sq_distances(item_emb, centers), tau)
    logk -= logk.max(axis=1, keepdims=True)
    k = np.exp(logk)
    return k / k.sum(axis=1, keepdims=True)


def target(soft: np.ndarray) -> np.ndarray:
    """Sharpened, frequency-normalized target distribution."""
    freq = soft.sum(axis=0)
    num = soft ** 2 / freq
    return num / num.sum(axis=1, keepdims=True)


def kl_loss(tgt: np.ndarray, soft: np.ndarray) -> float:
    """``sum T log(T / Q)``; zero-target cells contribute nothing, a zero ``Q`` under
    positive target gives ``inf``."""
    mask = tgt > 0
    if np.any(soft[mask] <= 0):
        return float("inf")
    t, q = tgt[mask], soft[mask]
    return float(np.sum(t * (np.log(t) - np.log(q))))


def cluster_grads(item_emb: np.ndarray, centers: np.ndarray, tgt: np.ndarray, tau: float = 1.0
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """KL loss and its gradients with respect to item embeddings and centers.

    The target is held fixed.
    """
    d2 = sq_distances(item_emb, centers)
    logk = _log_kernel(d2, tau)
    logk -= logk.max(axis=1, keepdims=True)
    k = np.exp(logk)
    soft = k / k.sum(axis=1, keepdims=True)
    loss = kl_loss(tgt, soft)
    row_mass = tgt.sum(axis=1, keepdims=True)
    M = -(tau + 1.0) * (soft * row_mass - tgt) / (tau + d2)
    g_items = M.sum(axis=1)[:, None] * item_emb - M @ centers
    g_centers = M.sum(axis=0)[:, None] * centers - M.T @ item_emb
    return loss, g_items, g_centers


def refresh_membership(soft: np.ndarray) -> np.ndarray:
    """Hard cluster ids; ties go to the lowest index."""
    return np.argmax(soft, axis=1)
