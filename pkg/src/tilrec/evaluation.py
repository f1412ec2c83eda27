"""Top-k ranking metrics over full-catalog candidate sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tilrec.backbone import EmbeddingTable
from tilrec.data import InteractionStore


@dataclass
class MetricsReport:
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    n_users_evaluated: int = 0

    def to_dict(self) -> dict:
        out = {"n_users_evaluated": self.n_users_evaluated}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out


def recall_at_k(ranked, test_pos, k: int) -> float:
    test = set(int(x) for x in test_pos)
    if not test:
        raise ValueError("recall is undefined for an empty test set")
    return len(test.intersection(int(x) for x in list(ranked)[:k])) / len(test)


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(ranked, test_pos, k: int) -> float:
    test = set(int(x) for x in test_pos)
    if not test:
        raise ValueError("ndcg is undefined for an empty test set")
    # plain left-to-right sums, so the scalar metric is exact against a hand loop
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(list(ranked)[:k]) if int(item) in test)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(test))))
    return dcg / idcg


def topk_from_scores(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the ``k`` largest scores, ties broken toward lower index.

    ``-inf`` entries are masked candidates; they sort last and callers drop
    them when a row has fewer than ``k`` real candidates.
    """
    scores = np.atleast_2d(scores)
    n, m = scores.shape
    k = min(k, m)
    if k == m:
        return np.argsort(-scores, axis=1, kind="stable")
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(scores, part, axis=1).min(axis=1)
    above = scores > kth[:, None]
    tied = scores == kth[:, None]
    room = k - above.sum(axis=1)
    chosen = above | (tied & (np.cumsum(tied, axis=1) <= room[:, None]))
    idx = np.nonzero(chosen)[1].reshape(n, k)
    order = np.argsort(-np.take_along_axis(scores, idx, axis=1), axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def masked_scores(table: EmbeddingTable, store: InteractionStore, users: np.ndarray,
                  exclude_val: bool = False) -> np.ndarray:
    scores = table.P[users] @ table.Q.T
    mask = store.train_matrix[users]
    if exclude_val:
        mask = mask + store.heldout_matrix("val")[users]
    rows, cols = mask.nonzero()
    scores[rows, cols] = -np.inf
    return scores


def topk(table: EmbeddingTable, store: InteractionStore, u: int, k: int, exclude_val: bool = False
         ) -> list[int]:
    """The ``k`` best-scoring items for ``u`` outside the user's training positives."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = masked_scores(table, store, np.array([u]), exclude_val)[0]
    ranked = topk_from_scores(scores[None, :], k)[0]
    return [int(i) for i in ranked if np.isfinite(scores[i])]


def evaluate(table: EmbeddingTable, store: InteractionStore, which: str = "test", ks=(20,),
             exclude_val: bool = False, chunk: int = 2048) -> MetricsReport:
    """Macro-averaged Recall@k and NDCG@k over users with a non-empty ``which`` split."""
    users = store.evaluable_users(which)
    ks = sorted(set(int(k) for k in ks))
    report = MetricsReport({k: 0.0 for k in ks}, {k: 0.0 for k in ks}, int(users.size))
    if not users.size:
        return report
    kmax = max(ks)
    disc = _discounts(kmax)
    idcg_table = np.cumsum(disc)
    held = store.heldout_matrix(which)
    rec_sum = {k: 0.0 for k in ks}
    ndcg_sum = {k: 0.0 for k in ks}
    for start in range(0, users.size, chunk):
        batch = users[start:start + chunk]
        scores = masked_scores(table, store, batch, exclude_val and which == "test")
        ranked = topk_from_scores(scores, kmax)
        truth = held[batch].toarray() > 0
        hits = np.take_along_axis(truth, ranked, axis=1)
        n_true = truth.sum(axis=1)
        for k in ks:
            h = hits[:, :k]
            rec_sum[k] += float(np.sum(h.sum(axis=1) / n_true))
            dcg = h @ disc[:h.shape[1]]
            idcg = idcg_table[np.minimum(k, n_true) - 1]
            ndcg_sum[k] += float(np.sum(dcg / idcg))
    for k in ks:
        report.recall[k] = rec_sum[k] / users.size
        report.ndcg[k] = ndcg_sum[k] / users.size
    return report
