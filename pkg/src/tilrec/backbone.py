"""Matrix-factorization backbone and the BPR pairwise loss."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

SNAPSHOT_FORMAT = "tilrec-embeddings"
SNAPSHOT_VERSION = 1


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def xavier_uniform(rng: np.random.Generator, shape, fan_in=None, fan_out=None) -> np.ndarray:
    if fan_in is None or fan_out is None:
        # torch convention for a 2-D weight: (fan_out, fan_in)
        fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def scatter_rows(n_rows: int, idx, vals: np.ndarray) -> np.ndarray:
    """``out[idx[t]] += vals[t]`` into a fresh ``(n_rows, d)`` array (a sparse matmul, faster than ``np.add.at``)."""
    idx = np.asarray(idx, dtype=np.int64)
    m = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n_rows, idx.size))
    return np.asarray(m @ vals)


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


@dataclass
class EmbeddingTable:
    P: np.ndarray
    Q: np.ndarray

    @property
    def d(self) -> int:
        return self.P.shape[1]

    @property
    def n_users(self) -> int:
        return self.P.shape[0]

    @property
    def n_items(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def init(cls, n_users: int, n_items: int, d: int = 64, rng=None) -> EmbeddingTable:
        if d < 1:
            raise ValueError("embedding dimension must be >= 1")
        rng = np.random.default_rng(rng)
        return cls(xavier_uniform(rng, (n_users, d)), xavier_uniform(rng, (n_items, d)))

    def copy(self) -> EmbeddingTable:
        return EmbeddingTable(self.P.copy(), self.Q.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"P": self.P, "Q": self.Q}

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.P).all() and np.isfinite(self.Q).all())

    def save(self, path, seed=None, extra=None):
        header = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION, "n_users": self.n_users,
                  "n_items": self.n_items, "d": self.d, "seed": seed}
        arrays = {"P": self.P, "Q": self.Q}
        for name, arr in (extra or {}).items():
            arrays[name] = np.asarray(arr)
        write_npz(path, {"header": np.array(json.dumps(header, sort_keys=True)), **arrays})

    @classmethod
    def load(cls, path) -> tuple[EmbeddingTable, dict, dict[str, np.ndarray]]:
        with np.load(path, allow_pickle=False) as blob:
            header = json.loads(str(blob["header"]))
            if header.get("format") != SNAPSHOT_FORMAT or header.get("version") != SNAPSHOT_VERSION:
                raise ValueError(f"{path}: unsupported snapshot {header.get('format')} v{header.get('version')}")
            extra = {k: blob[k].copy() for k in blob.files if k not in ("header", "P", "Q")}
            table = cls(blob["P"].copy(), blob["Q"].copy())
        if table.P.shape != (header["n_users"], header["d"]) or table.Q.shape != (header["n_items"], header["d"]):
            raise ValueError(f"{path}: matrix shapes disagree with header")
        return table, header, extra


@dataclass
class GradAccumulator:
    """Row-sparse gradients for P and Q: only rows touched by a batch are stored."""

    user_rows: np.ndarray
    user_grad: np.ndarray
    item_rows: np.ndarray
    item_grad: np.ndarray

    @classmethod
    def from_rows(cls, users, user_grads, items, item_grads) -> GradAccumulator:
        ur, uinv = np.unique(users, return_inverse=True)
        ir, iinv = np.unique(items, return_inverse=True)
        ug = np.zeros((ur.size, user_grads.shape[1]))
        ig = np.zeros((ir.size, item_grads.shape[1]))
        np.add.at(ug, uinv, user_grads)
        np.add.at(ig, iinv, item_grads)
        return cls(ur, ug, ir, ig)

    def add_l2(self, table: EmbeddingTable, l2: float) -> GradAccumulator:
        if l2:
            self.user_grad += 2.0 * l2 * table.P[self.user_rows]
            self.item_grad += 2.0 * l2 * table.Q[self.item_rows]
        return self

    def dense(self, table: EmbeddingTable) -> dict[str, np.ndarray]:
        gP = np.zeros_like(table.P)
        gQ = np.zeros_like(table.Q)
        gP[self.user_rows] = self.user_grad
        gQ[self.item_rows] = self.item_grad
        return {"P": gP, "Q": gQ}

    def user(self, u: int) -> np.ndarray:
        k = np.searchsorted(self.user_rows, u)
        if k < self.user_rows.size and self.user_rows[k] == u:
            return self.user_grad[k]
        return np.zeros(self.user_grad.shape[1])

    def item(self, i: int) -> np.ndarray:
        k = np.searchsorted(self.item_rows, i)
        if k < self.item_rows.size and self.item_rows[k] == i:
            return self.item_grad[k]
        return np.zeros(self.item_grad.shape[1])


def l2_penalty(table: EmbeddingTable, users, items, l2: float) -> float:
    if not l2:
        return 0.0
    ur, ir = np.unique(users), np.unique(items)
    return l2 * float(np.sum(table.P[ur] ** 2) + np.sum(table.Q[ir] ** 2))


def score(table: EmbeddingTable, u: int, i: int) -> float:
    return float(table.P[u] @ table.Q[i])


def margins(table: EmbeddingTable, u, i, j) -> np.ndarray:
    """``score(u, i) - score(u, j)`` for aligned index arrays."""
    return np.einsum("bd,bd->b", table.P[u], table.Q[i] - table.Q[j])


def bpr_losses(table: EmbeddingTable, u, i, j) -> np.ndarray:
    return softplus(-margins(table, u, i, j))


def bpr_loss(table: EmbeddingTable, t) -> float:
    return float(softplus(-(score(table, t.u, t.i) - score(table, t.u, t.j))))


def bpr_coeffs(x: np.ndarray) -> np.ndarray:
    """Derivative of the BPR loss with respect to the margin, ``-sigmoid(-x)``."""
    return -sigmoid(-np.asarray(x, dtype=float))


def batch_grad(table: EmbeddingTable, u, i, j, coef: np.ndarray) -> GradAccumulator:
    """Gradient of ``sum_t coef_t * margin_t`` under the MF score.

    With ``coef = w_t * bpr_coeffs(x_t) / B`` this is the gradient of the mean
    weighted BPR loss.
    """
    pu, qi, qj = table.P[u], table.Q[i], table.Q[j]
    c = coef[:, None]
    g_user = c * (qi - qj)
    g_pos = c * pu
    items = np.concatenate([i, j])
    return GradAccumulator.from_rows(u, g_user, items, np.concatenate([g_pos, -g_pos]))


def bpr_grad(table: EmbeddingTable, t, l2: float = 0.0) -> GradAccumulator:
    """Gradient of a single triplet's BPR loss, plus ``l2 * ||row||^2`` on touched rows."""
    u, i, j = np.array([t.u]), np.array([t.i]), np.array([t.j])
    coef = bpr_coeffs(margins(table, u, i, j))
    return batch_grad(table, u, i, j, coef).add_l2(table, l2)
