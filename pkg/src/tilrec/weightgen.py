"""Two-layer importance generator ``w = sigmoid(W2 . relu(W1 s + b1) + b2)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tilrec.backbone import sigmoid, xavier_uniform

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class WeightNetParams:
    W1: np.ndarray  # (d, 2d)
    b1: np.ndarray  # (d,)
    W2: np.ndarray  # (d,)
    b2: np.ndarray  # 0-d, kept as an array so optimizers can update it in place

    def __post_init__(self):
        self.b2 = np.asarray(self.b2, dtype=float).reshape(())
        d = self.b1.shape[0]
        if self.W1.shape != (d, 2 * d) or self.W2.shape != (d,):
            raise ValueError(f"inconsistent generator shapes W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape}")

    @property
    def d(self) -> int:
        return self.b1.shape[0]

    @classmethod
    def init(cls, d: int, rng=None) -> WeightNetParams:
        rng = np.random.default_rng(rng)
        return cls(
            W1=xavier_uniform(rng, (d, 2 * d)),
            b1=np.zeros(d),
            W2=xavier_uniform(rng, (d,), fan_in=d, fan_out=1),
            b2=np.zeros(()),
        )

    @classmethod
    def zeros(cls, d: int) -> WeightNetParams:
        return cls(np.zeros((d, 2 * d)), np.zeros(d), np.zeros(d), np.zeros(()))

    def copy(self) -> WeightNetParams:
        return WeightNetParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.params().values())


@dataclass
class ForwardCache:
    s: np.ndarray       # (B, 2d)
    pre: np.ndarray     # (B, d) hidden pre-activations
    z: np.ndarray       # (B, d)
    w: np.ndarray       # (B,)


def weights(params: WeightNetParams, S: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward over the rows of ``S``."""
    pre = S @ params.W1.T + params.b1
    z = np.maximum(pre, 0.0)
    w = np.atleast_1d(sigmoid(z @ params.W2 + params.b2))
    return w, ForwardCache(S, pre, z, w)


def backward(params: WeightNetParams, cache: ForwardCache, upstream: np.ndarray,
             need_state_grad: bool = False) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Gradients of ``sum_t upstream_t * w_t`` w.r.t. the parameters (and optionally the states).

    The relu subgradient at zero is zero.
    """
    g_out = np.asarray(upstream, dtype=float) * cache.w * (1.0 - cache.w)
    g_hidden = (g_out[:, None] * params.W2[None, :]) * (cache.pre > 0)
    grads = {
        "W1": g_hidden.T @ cache.s,
        "b1": g_hidden.sum(axis=0),
        "W2": cache.z.T @ g_out,
        "b2": np.asarray(g_out.sum()),
    }
    g_s = g_hidden @ params.W1 if need_state_grad else None
    return grads, g_s


def weight_forward(params: WeightNetParams, s) -> tuple[float, ForwardCache]:
    s = np.asarray(getattr(s, "s", s), dtype=float)
    if s.shape != (2 * params.d,):
        raise ValueError(f"state must have length {2 * params.d}, got {s.shape}")
    w, cache = weights(params, s[None, :])
    return float(w[0]), cache


def weight_backward(params: WeightNetParams, cache: ForwardCache, upstream: float = 1.0
                    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    grads, g_s = backward(params, cache, np.array([upstream]), need_state_grad=True)
    return grads, g_s[0]
