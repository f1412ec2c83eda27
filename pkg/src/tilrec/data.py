"""Interaction ingestion, filtering, splitting, noise injection and synthetic worlds.

The central type is :class:`InteractionStore`, an immutable bundle of per-user
train/validation/test positive sets over dense internal indices.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from tilrec.errors import EmptyDatasetError, ParseError

STORE_FORMAT = "tilrec-store"
STORE_VERSION = 1

NOISE_MODES = ("clean", "noisy_pos", "noisy_neg", "noisy_pos_neg")


@dataclass(frozen=True)
class RawInteraction:
    user: str
    item: str
    rating: float | None = None
    timestamp: int | None = None

    def __post_init__(self):
        if self.rating is not None and not 1.0 <= self.rating <= 5.0:
            raise ValueError(f"rating {self.rating} outside [1, 5]")


@dataclass(frozen=True)
class NoiseSpec:
    mode: str = "clean"
    fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}; expected one of {NOISE_MODES}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"noise fraction must lie in (0, 1], got {self.fraction}")


def _frozen(arr) -> np.ndarray:
    out = np.array(sorted(set(int(x) for x in arr)), dtype=np.int64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class InteractionStore:
    """Per-user positive sets for train, validation and test.

    ``train_pos[u]`` is a sorted int array (the user's training positives);
    ``removed_pos[u]`` holds positives withdrawn by ``noisy_neg`` noise, which
    the sampler is free to draw as negatives.
    """

    n_users: int
    n_items: int
    train_pos: tuple[np.ndarray, ...]
    val_pos: tuple[np.ndarray, ...]
    test_pos: tuple[np.ndarray, ...]
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    rating_lookup: Mapping[tuple[int, int], float] | None = None
    removed_pos: tuple[np.ndarray, ...] | None = None
    meta: Mapping = field(default_factory=dict)

    @classmethod
    def from_lists(cls, n_users, n_items, train, val, test, user_ids=None, item_ids=None,
                   rating_lookup=None, removed=None, meta=None):
        if user_ids is None:
            user_ids = [f"u{k}" for k in range(n_users)]
        if item_ids is None:
            item_ids = [f"i{k}" for k in range(n_items)]
        store = cls(
            n_users=int(n_users),
            n_items=int(n_items),
            train_pos=tuple(_frozen(x) for x in train),
            val_pos=tuple(_frozen(x) for x in val),
            test_pos=tuple(_frozen(x) for x in test),
            user_ids=tuple(user_ids),
            item_ids=tuple(item_ids),
            rating_lookup=dict(rating_lookup) if rating_lookup is not None else None,
            removed_pos=tuple(_frozen(x) for x in removed) if removed is not None else None,
            meta=dict(meta or {}),
        )
        store.validate()
        return store

    def validate(self):
        n = self.n_users
        if not (len(self.train_pos) == len(self.val_pos) == len(self.test_pos) == n):
            raise ValueError("split lists must have one entry per user")
        if len(self.user_ids) != n or len(self.item_ids) != self.n_items:
            raise ValueError("id maps do not match the index ranges")
        for u in range(n):
            tr, va, te = self.train_pos[u], self.val_pos[u], self.test_pos[u]
            for arr in (tr, va, te):
                if arr.size and (arr[0] < 0 or arr[-1] >= self.n_items):
                    raise ValueError(f"user {u}: item index out of range")
            if np.intersect1d(tr, va).size or np.intersect1d(tr, te).size or np.intersect1d(va, te).size:
                raise ValueError(f"user {u}: splits overlap")
            if (va.size or te.size) and not tr.size:
                raise ValueError(f"user {u}: held-out positives without training positives")

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {uid: k for k, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {iid: k for k, iid in enumerate(self.item_ids)}

    @property
    def n_train(self) -> int:
        return int(sum(x.size for x in self.train_pos))

    @cached_property
    def train_users(self) -> np.ndarray:
        """User index of every training pair, aligned with :attr:`train_items`."""
        return np.repeat(np.arange(self.n_users), [x.size for x in self.train_pos])

    @cached_property
    def train_items(self) -> np.ndarray:
        if not self.n_train:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.train_pos)

    @cached_property
    def train_matrix(self) -> sp.csr_matrix:
        data = np.ones(self.n_train)
        return sp.csr_matrix((data, (self.train_users, self.train_items)),
                             shape=(self.n_users, self.n_items))

    @cached_property
    def mean_operator(self) -> sp.csr_matrix:
        """Row-normalized train matrix; ``mean_operator @ Q`` averages each user's positives."""
        counts = np.array([max(x.size, 1) for x in self.train_pos], dtype=float)
        return sp.diags(1.0 / counts) @ self.train_matrix

    @cached_property
    def item_counts(self) -> np.ndarray:
        return np.bincount(self.train_items, minlength=self.n_items)

    def heldout_matrix(self, which: str) -> sp.csr_matrix:
        sets = {"val": self.val_pos, "test": self.test_pos}[which]
        rows = np.repeat(np.arange(self.n_users), [x.size for x in sets])
        cols = np.concatenate(sets) if rows.size else np.zeros(0, dtype=np.int64)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_users, self.n_items))

    def evaluable_users(self, which: str = "test") -> np.ndarray:
        sets = {"val": self.val_pos, "test": self.test_pos}[which]
        return np.array([u for u in range(self.n_users) if sets[u].size], dtype=np.int64)

    # -- snapshots -----------------------------------------------------------------

    def to_dict(self) -> dict:
        ratings = None
        if self.rating_lookup is not None:
            ratings = [[u, i, r] for (u, i), r in sorted(self.rating_lookup.items())]
        return {
            "format": STORE_FORMAT,
            "version": STORE_VERSION,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "user_ids": list(self.user_ids),
            "item_ids": list(self.item_ids),
            "train": [x.tolist() for x in self.train_pos],
            "val": [x.tolist() for x in self.val_pos],
            "test": [x.tolist() for x in self.test_pos],
            "removed": None if self.removed_pos is None else [x.tolist() for x in self.removed_pos],
            "ratings": ratings,
            "meta": dict(self.meta),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> InteractionStore:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        if blob.get("format") != STORE_FORMAT:
            raise ValueError(f"{path} is not a store snapshot")
        if blob.get("version") != STORE_VERSION:
            raise ValueError(f"unsupported store snapshot version {blob.get('version')}")
        ratings = None
        if blob["ratings"] is not None:
            ratings = {(int(u), int(i)): float(r) for u, i, r in blob["ratings"]}
        return cls.from_lists(
            blob["n_users"], blob["n_items"], blob["train"], blob["val"], blob["test"],
            user_ids=blob["user_ids"], item_ids=blob["item_ids"], rating_lookup=ratings,
            removed=blob["removed"], meta=blob["meta"],
        )


# -- ingestion -------------------------------------------------------------------------

_HEADER_NAMES = ("user", "uid", "item", "iid", "rating", "timestamp")


def _looks_numeric(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _is_header(fields: Sequence[str]) -> bool:
    if any(not _looks_numeric(f) for f in fields[2:]):
        return True
    head = [f.strip().lower() for f in fields[:2]]
    return any(h.startswith(_HEADER_NAMES) for h in head) and len(set(head)) == len(head)


def read_interactions(path) -> list[RawInteraction]:
    """Parse every record in a delimited interaction file, without thresholding."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        first = True
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = [f.strip() for f in (line.split("\t") if "\t" in line else line.split(","))]
            if first:
                first = False
                if _is_header(fields):
                    continue
            if not 2 <= len(fields) <= 4:
                raise ParseError(path, line_no, f"expected 2-4 fields, got {len(fields)}")
            user, item = fields[0], fields[1]
            if not user or not item:
                raise ParseError(path, line_no, "empty user or item id")
            rating = timestamp = None
            try:
                if len(fields) >= 3 and fields[2] != "":
                    rating = float(fields[2])
                if len(fields) == 4 and fields[3] != "":
                    timestamp = int(float(fields[3]))
            except ValueError as exc:
                raise ParseError(path, line_no, f"non-numeric rating or timestamp ({exc})") from None
            if rating is not None and not 1.0 <= rating <= 5.0:
                raise ParseError(path, line_no, f"rating {rating} outside [1, 5]")
            records.append(RawInteraction(user, item, rating, timestamp))
    return records


def binarize(records: Iterable[RawInteraction], rating_threshold: float = 4.0) -> list[RawInteraction]:
    return [r for r in records if r.rating is None or r.rating >= rating_threshold]


def load_interactions(path, rating_threshold: float = 4.0) -> list[RawInteraction]:
    """Read ``path`` and keep the records that count as positive feedback.

    Rated records below ``rating_threshold`` are dropped; unrated records are
    already implicit and pass through.
    """
    kept = binarize(read_interactions(path), rating_threshold)
    if not kept:
        raise EmptyDatasetError(f"{path}: no positive interactions at threshold {rating_threshold}")
    return kept


def filter_sparse(interactions: Sequence[RawInteraction], min_count: int = 10) -> list[RawInteraction]:
    """Drop users and items with fewer than ``min_count`` distinct partners, to a fixed point."""
    current = list(interactions)
    if min_count <= 0:
        return current
    while True:
        pairs = {(r.user, r.item) for r in current}
        users = Counter(u for u, _ in pairs)
        items = Counter(i for _, i in pairs)
        kept = [r for r in current if users[r.user] >= min_count and items[r.item] >= min_count]
        if not kept:
            raise EmptyDatasetError(f"every interaction removed by the {min_count}-core filter")
        if len(kept) == len(current):
            return kept
        current = kept


def _split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    _, r_val, r_test = ratios
    n_val = max(1, math.floor(r_val * n + 0.5)) if r_val > 0 else 0
    n_test = max(1, math.floor(r_test * n + 0.5)) if r_test > 0 else 0
    if n - n_val - n_test < 1:
        return n, 0, 0
    return n - n_val - n_test, n_val, n_test


def _partition(items: np.ndarray, ratios, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_tr, n_va, _ = _split_counts(items.size, ratios)
    perm = items[rng.permutation(items.size)]
    return perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]


def split(interactions: Sequence[RawInteraction], ratios=(0.8, 0.1, 0.1), seed: int = 0,
          extra_ratings: Iterable[RawInteraction] = ()) -> InteractionStore:
    """Randomly partition each user's positives into train/val/test.

    Users whose positives cannot fill all requested splits keep everything in
    train. ``extra_ratings`` are non-positive rated records kept only in the
    rating lookup (used by the importance case study).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if not interactions:
        raise EmptyDatasetError("nothing to split")

    user_ids = sorted({r.user for r in interactions})
    item_ids = sorted({r.item for r in interactions})
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}

    per_user: dict[int, set[int]] = defaultdict(set)
    ratings: dict[tuple[int, int], float] = {}
    for r in interactions:
        u, i = uidx[r.user], iidx[r.item]
        per_user[u].add(i)
        if r.rating is not None:
            ratings[(u, i)] = max(r.rating, ratings.get((u, i), r.rating))
    for r in extra_ratings:
        if r.rating is not None and r.user in uidx and r.item in iidx:
            key = (uidx[r.user], iidx[r.item])
            if key not in ratings:
                ratings[key] = r.rating

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for u in range(len(user_ids)):
        tr, va, te = _partition(np.array(sorted(per_user[u]), dtype=np.int64), ratios, rng)
        train.append(tr)
        val.append(va)
        test.append(te)
    return InteractionStore.from_lists(
        len(user_ids), len(item_ids), train, val, test, user_ids=user_ids, item_ids=item_ids,
        rating_lookup=ratings or None, meta={"split_seed": seed, "ratios": list(ratios)},
    )


def prepare_store(path, rating_threshold: float = 4.0, min_count: int = 10,
                  ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionStore:
    """File to store: binarize, apply the k-core filter, then split."""
    records = read_interactions(path)
    positives = binarize(records, rating_threshold)
    if not positives:
        raise EmptyDatasetError(f"{path}: no positive interactions at threshold {rating_threshold}")
    positives = filter_sparse(positives, min_count)
    extra = [r for r in records if r.rating is not None and r.rating < rating_threshold]
    store = split(positives, ratios, seed, extra_ratings=extra)
    meta = dict(store.meta, source=str(path), rating_threshold=rating_threshold, min_count=min_count)
    return replace(store, meta=meta)


# -- noise -----------------------------------------------------------------------------

def _noise_count(fraction: float, n: int) -> int:
    return math.floor(fraction * n + 0.5)


def inject_noise(store: InteractionStore, spec: NoiseSpec, rng: np.random.Generator | None = None
                 ) -> InteractionStore:
    """Corrupt the training split: fake positives, withdrawn positives, or both.

    Per user, ``c_u = round(fraction * |train_pos(u)|)``. Withdrawn positives
    are kept in ``removed_pos`` and become eligible negatives. Validation and
    test sets are untouched.
    """
    if spec.mode == "clean":
        return store
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    add = spec.mode in ("noisy_pos", "noisy_pos_neg")
    remove = spec.mode in ("noisy_neg", "noisy_pos_neg")

    train, removed = [], []
    all_items = np.arange(store.n_items)
    for u in range(store.n_users):
        tr = store.train_pos[u]
        gone = np.zeros(0, dtype=np.int64)
        if tr.size == 0:
            train.append(tr)
            removed.append(gone)
            continue
        c = _noise_count(spec.fraction, tr.size)
        kept = tr
        if remove and c:
            # at least one true positive stays so held-out users keep a training profile
            n_drop = min(c, tr.size - 1)
            gone = rng.choice(tr, size=n_drop, replace=False)
            kept = np.setdiff1d(tr, gone)
        if add and c:
            observed = np.concatenate([tr, store.val_pos[u], store.test_pos[u]])
            pool = np.setdiff1d(all_items, observed)
            fake = rng.choice(pool, size=min(c, pool.size), replace=False)
            kept = np.union1d(kept, fake)
        train.append(kept)
        removed.append(gone)

    prior = store.removed_pos
    if prior is not None:
        removed = [np.union1d(a, b) for a, b in zip(prior, removed)]
    meta = dict(store.meta, noise={"mode": spec.mode, "fraction": spec.fraction, "seed": spec.seed})
    return InteractionStore.from_lists(
        store.n_users, store.n_items, train, store.val_pos, store.test_pos,
        user_ids=store.user_ids, item_ids=store.item_ids, rating_lookup=store.rating_lookup,
        removed=removed if remove or prior is not None else None, meta=meta,
    )


# -- synthetic worlds ------------------------------------------------------------------

def synthesize(n_users: int, n_items: int, n_latent_groups: int, noise_rate: float = 0.0,
               seed: int = 0, *, density: float = 0.03, latent_dim: int = 16,
               item_spread: float = 0.35, user_spread: float = 0.35,
               max_interests: int = 2, ratios=(0.8, 0.1, 0.1)) -> tuple[InteractionStore, np.ndarray]:
    """Draw a group-structured preference world with known ground truth.

    Items belong to one of ``n_latent_groups`` groups; each user mixes one to
    ``max_interests`` group centers. Affinity is the inner product of latent
    vectors. Each user's positives are the items above a per-user affinity
    threshold; these are split per user, then ``noise_rate`` of each user's
    training positives worth of false positives (drawn from below-threshold
    items) are added to train only. Validation and test stay clean.

    Every user also gets graded ratings: 5 and 4 split the true positives,
    3 is the band just below the threshold, 2 the next band, 1 the rest. The
    rating lookup holds all positives, the fake positives, the grade-3 band and
    an equally sized random sample of the remaining items.

    Returns the store and the dense ``n_users x n_items`` affinity matrix.
    """
    if min(n_users, n_items, n_latent_groups) <= 0:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_latent_groups, latent_dim))
    item_group = rng.integers(n_latent_groups, size=n_items)
    V = centers[item_group] + item_spread * rng.normal(size=(n_items, latent_dim))

    n_int = rng.integers(1, max(1, min(max_interests, n_latent_groups)) + 1, size=n_users)
    U = np.empty((n_users, latent_dim))
    for u in range(n_users):
        groups = rng.choice(n_latent_groups, size=n_int[u], replace=False)
        U[u] = centers[groups].mean(axis=0)
    U += user_spread * rng.normal(size=(n_users, latent_dim))
    affinity = U @ V.T

    mean_pos = max(3.0, density * n_items)
    lo, hi = max(3, int(round(0.5 * mean_pos))), max(4, int(round(1.5 * mean_pos)))
    n_pos = np.minimum(rng.integers(lo, hi + 1, size=n_users), n_items - 1)

    grades = np.ones((n_users, n_items), dtype=np.int8)
    positives = []
    for u in range(n_users):
        order = np.argsort(-affinity[u], kind="stable")
        k = int(n_pos[u])
        bands = (((k + 1) // 2, 5), (k, 4), (2 * k, 3), (4 * k, 2))
        start = 0
        for stop, grade in bands:
            grades[u, order[start:stop]] = grade
            start = stop
        positives.append(np.sort(order[:k]))

    train, val, test = [], [], []
    for u in range(n_users):
        tr, va, te = _partition(positives[u], ratios, rng)
        train.append(tr)
        val.append(va)
        test.append(te)

    fake_pos = []
    for u in range(n_users):
        c = _noise_count(noise_rate, train[u].size) if noise_rate > 0 else 0
        pool = np.flatnonzero(grades[u] <= 3)
        fake = rng.choice(pool, size=min(c, pool.size), replace=False) if c else np.zeros(0, np.int64)
        fake_pos.append(np.sort(fake))
        train[u] = np.union1d(train[u], fake)

    lookup: dict[tuple[int, int], float] = {}
    for u in range(n_users):
        band3 = np.flatnonzero(grades[u] == 3)
        rest = np.flatnonzero(grades[u] <= 2)
        sample = rng.choice(rest, size=min(band3.size, rest.size), replace=False)
        for i in np.concatenate([positives[u], fake_pos[u], band3, sample]):
            lookup[(u, int(i))] = float(grades[u, i])

    meta = {
        "synthetic": {
            "n_users": n_users, "n_items": n_items, "n_latent_groups": n_latent_groups,
            "noise_rate": noise_rate, "seed": seed, "density": density, "latent_dim": latent_dim,
            "item_spread": item_spread, "user_spread": user_spread, "max_interests": max_interests,
        },
        "item_group": item_group.tolist(),
        "fake_positives": [f.tolist() for f in fake_pos],
    }
    store = InteractionStore.from_lists(n_users, n_items, train, val, test,
                                        rating_lookup=lookup, meta=meta)
    return store, affinity
