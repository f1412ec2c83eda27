"""Negative sampling: one sampled negative per observed training positive."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from tilrec.data import InteractionStore

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("uniform", "popularity")
MAX_RETRIES = 100
DEFAULT_BATCH = 5000


@dataclass(frozen=True)
class Triplet:
    u: int
    i: int
    j: int


class Batch(NamedTuple):
    u: np.ndarray
    i: np.ndarray
    j: np.ndarray

    def __len__(self):
        return int(self.u.size)

    def triplets(self) -> list[Triplet]:
        return [Triplet(int(a), int(b), int(c)) for a, b, c in zip(self.u, self.i, self.j)]

    @classmethod
    def of(cls, triplets) -> Batch:
        arr = np.array([(t.u, t.i, t.j) for t in triplets], dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])


class NegativeSampler:
    """Draws negatives for a store, excluding each user's training positives.

    With ``exclude_heldout`` the user's validation and test positives are
    excluded too. ``kind="popularity"`` draws proportionally to training
    interaction counts, restricted to the user's complement set.
    """

    def __init__(self, store: InteractionStore, kind: str = "uniform", exclude_heldout: bool = False):
        if kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {kind!r}")
        self.store = store
        self.kind = kind
        n_items = store.n_items
        excluded = []
        for u in range(store.n_users):
            ex = store.train_pos[u]
            if exclude_heldout:
                ex = np.union1d(ex, np.union1d(store.val_pos[u], store.test_pos[u]))
            excluded.append(ex)
        self._excluded = excluded
        self._keys = np.sort(np.concatenate(
            [u * n_items + ex for u, ex in enumerate(excluded)] or [np.zeros(0, np.int64)]))
        self.full_users = np.array([u for u, ex in enumerate(excluded) if ex.size >= n_items],
                                   dtype=np.int64)
        if self.full_users.size:
            log.warning("%d user(s) have no possible negatives and are skipped", self.full_users.size)
        if kind == "popularity":
            counts = store.item_counts.astype(float)
            if counts.sum() <= 0:
                counts = np.ones(n_items)
            self._probs = counts / counts.sum()
            self._cdf = np.cumsum(self._probs)
            self._cdf[-1] = 1.0

    def is_excluded(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.store.n_items + np.asarray(items, dtype=np.int64)
        if not self._keys.size:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, self._keys.size - 1)
        return self._keys[pos] == keys

    def _draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.integers(self.store.n_items, size=n)
        return np.minimum(np.searchsorted(self._cdf, rng.random(n), side="right"),
                          self.store.n_items - 1)

    def _complement_draw(self, u: int, rng: np.random.Generator) -> int:
        cand = np.setdiff1d(np.arange(self.store.n_items), self._excluded[u])
        if self.kind == "uniform":
            return int(rng.choice(cand))
        p = self._probs[cand]
        if p.sum() <= 0:
            return int(rng.choice(cand))
        return int(rng.choice(cand, p=p / p.sum()))

    def negatives(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One negative per entry of ``users``; callers must drop :attr:`full_users` first."""
        users = np.asarray(users, dtype=np.int64)
        out = self._draw(users.size, rng)
        bad = np.flatnonzero(self.is_excluded(users, out))
        for _ in range(MAX_RETRIES):
            if not bad.size:
                return out
            out[bad] = self._draw(bad.size, rng)
            bad = bad[self.is_excluded(users[bad], out[bad])]
        for k in bad:
            out[k] = self._complement_draw(int(users[k]), rng)
        return out

    def epoch(self, rng: np.random.Generator, batch_size: int = DEFAULT_BATCH,
              shuffle: bool = True) -> Iterator[Batch]:
        """Yield batches covering every training positive exactly once.

        The last partial batch is kept.
        """
        users, items = self.store.train_users, self.store.train_items
        if self.full_users.size:
            keep = ~np.isin(users, self.full_users)
            users, items = users[keep], items[keep]
        order = rng.permutation(users.size) if shuffle else np.arange(users.size)
        users, items = users[order], items[order]
        negs = self.negatives(users, rng)
        for start in range(0, users.size, batch_size):
            sl = slice(start, start + batch_size)
            yield Batch(users[sl], items[sl], negs[sl])

    def random_batch(self, rng: np.random.Generator, batch_size: int = DEFAULT_BATCH) -> Batch:
        """A batch of positives drawn uniformly with replacement, each with a fresh negative."""
        users, items = self.store.train_users, self.store.train_items
        if self.full_users.size:
            keep = ~np.isin(users, self.full_users)
            users, items = users[keep], items[keep]
        pick = rng.integers(users.size, size=min(batch_size, users.size))
        u, i = users[pick], items[pick]
        return Batch(u, i, self.negatives(u, rng))


def sample_epoch(store: InteractionStore, kind: str = "uniform", rng: np.random.Generator | None = None,
                 batch_size: int = DEFAULT_BATCH, exclude_heldout: bool = False) -> Iterator[Triplet]:
    """Stream one epoch of triplets, one per training positive."""
    rng = np.random.default_rng() if rng is None else rng
    sampler = NegativeSampler(store, kind, exclude_heldout)
    for batch in sampler.epoch(rng, batch_size):
        yield from batch.triplets()
