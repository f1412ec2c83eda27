"""Generator input states built from user-interest proximities.

A state has a positive half and a negative half, each ``d`` long. Under the
Uni-Interest strategy the positive half is ``q_i*p_u + q_i*eta_u``, where
``eta_u`` is the mean embedding of the user's training positives. Multi-Interest
adds ``alpha * (mu*p_u + mu*eta_u)`` per half, ``mu`` being the center of the
item's cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tilrec.backbone import EmbeddingTable, scatter_rows
from tilrec.data import InteractionStore

STRATEGIES = ("UI", "MI")


@dataclass(frozen=True)
class InterestState:
    s: np.ndarray
    strategy: str

    @property
    def positive(self) -> np.ndarray:
        return self.s[: self.s.size // 2]

    @property
    def negative(self) -> np.ndarray:
        return self.s[self.s.size // 2:]


def user_interest(table: EmbeddingTable, store: InteractionStore, u: int) -> np.ndarray:
    items = store.train_pos[u]
    if not items.size:
        raise ValueError(f"user {u} has no training positives")
    return table.Q[items].mean(axis=0)


def all_interests(table: EmbeddingTable, store: InteractionStore) -> np.ndarray:
    """``eta_u`` for every user at once (zero rows for users without positives)."""
    return np.asarray(store.mean_operator @ table.Q)


def states_ui(table: EmbeddingTable, eta: np.ndarray, u, i, j) -> np.ndarray:
    pu, eu = table.P[u], eta[u]
    qi, qj = table.Q[i], table.Q[j]
    return np.concatenate([qi * pu + qi * eu, qj * pu + qj * eu], axis=1)


def states_mi(table: EmbeddingTable, eta: np.ndarray, u, i, j, centers: np.ndarray,
              membership: np.ndarray, alpha: float) -> np.ndarray:
    if membership is None or (membership[i] < 0).any() or (membership[j] < 0).any():
        raise ValueError("cluster memberships must be refreshed before building MI states")
    pu, eu = table.P[u], eta[u]
    qi, qj = table.Q[i], table.Q[j]
    mi, mj = centers[membership[i]], centers[membership[j]]
    pos = qi * pu + qi * eu + alpha * (mi * pu + mi * eu)
    neg = qj * pu + qj * eu + alpha * (mj * pu + mj * eu)
    return np.concatenate([pos, neg], axis=1)


def state_ui(table: EmbeddingTable, store: InteractionStore, t, eta_u=None) -> InterestState:
    eta_u = user_interest(table, store, t.u) if eta_u is None else eta_u
    eta = np.zeros((table.n_users, table.d))
    eta[t.u] = eta_u
    s = states_ui(table, eta, [t.u], [t.i], [t.j])[0]
    return InterestState(s, "UI")


def state_mi(table: EmbeddingTable, clusters, store: InteractionStore, t, alpha_scale: float = 1.0,
             eta_u=None) -> InterestState:
    """``clusters`` is anything with ``centers`` and ``membership`` arrays (a ClusterState)."""
    eta_u = user_interest(table, store, t.u) if eta_u is None else eta_u
    eta = np.zeros((table.n_users, table.d))
    eta[t.u] = eta_u
    s = states_mi(table, eta, [t.u], [t.i], [t.j], clusters.centers, clusters.membership, alpha_scale)[0]
    return InterestState(s, "MI")


def state_backward(table: EmbeddingTable, store: InteractionStore, eta: np.ndarray, u, i, j,
                   grad_s: np.ndarray, centers=None, membership=None, alpha: float = 0.0):
    """Pull ``dJ/ds`` back onto P, Q (directly and through ``eta``) and the centers.

    Returns dense ``(gP, gQ, gPhi)``; ``gPhi`` is None without clusters.
    """
    d = table.d
    g_pos, g_neg = grad_s[:, :d], grad_s[:, d:]
    h = table.P[u] + eta[u]
    a_i, a_j = table.Q[i], table.Q[j]
    if centers is not None:
        a_i = a_i + alpha * centers[membership[i]]
        a_j = a_j + alpha * centers[membership[j]]
    g_h = g_pos * a_i + g_neg * a_j

    gP = scatter_rows(table.n_users, u, g_h)
    # the same pull also reaches every item averaged into eta_u
    gQ = np.asarray(store.mean_operator.T @ gP)
    gQ += scatter_rows(table.n_items, np.concatenate([i, j]), np.concatenate([g_pos * h, g_neg * h]))
    gPhi = None
    if centers is not None:
        gPhi = scatter_rows(centers.shape[0], np.concatenate([membership[i], membership[j]]),
                            alpha * np.concatenate([g_pos * h, g_neg * h]))
    return gP, gQ, gPhi
