"""Bilevel training of the MF backbone and the importance generator.

Each training iteration alternates two updates on one sampled batch:

* outer: build the one-step SGD proxy ``theta~ = theta - lr_inner * grad J_inner``,
  evaluate the unweighted BPR loss on a fresh batch at ``theta~`` and step the
  generator along the exact gradient of that composite map;
* inner: one Adam step of the model parameters on the importance-weighted
  loss (plus the clustering loss for the Multi-Interest variants).

Generator states are treated as constants with respect to the model
parameters unless ``state_grad`` is set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from tilrec import clustering, interest, weightgen
from tilrec.backbone import EmbeddingTable, bpr_coeffs, margins, scatter_rows, softplus
from tilrec.clustering import ClusterState
from tilrec.data import InteractionStore
from tilrec.errors import ConfigError, NumericalFault
from tilrec.evaluation import MetricsReport, evaluate
from tilrec.optim import Adam
from tilrec.sampler import Batch, NegativeSampler
from tilrec.weightgen import WeightNetParams

log = logging.getLogger(__name__)

STRATEGY_NAMES = ("baseline_bpr", "til_ui", "til_mi", "til_mik")
OUTER_MODES = ("second_order", "first_order")
SCHEMES = ("bilevel", "joint")
REDUCTIONS = ("sum", "mean")

# stream ids for numpy SeedSequence-style seeding
_INIT, _INNER, _OUTER, _KMEANS, _FD = range(5)


@dataclass
class TrainConfig:
    strategy: str = "til_mi"
    lr_inner: float = 1e-3
    lr_outer: float = 1e-3
    l2: float = 1e-5
    alpha_scale: float = 1.0
    gamma: float = 1e-2
    tau: float = 1.0
    K: int = 60
    d: int = 64
    batch: int = 5000
    outer_batch: int = 0           # 0: same size as ``batch``
    max_epochs: int = 3000
    pretrain_epochs: int = 500
    refresh_every: int = 10
    patience: int = 100
    outer_mode: str = "second_order"
    scheme: str = "bilevel"
    outer_every: int = 1           # inner steps per outer step
    reduction: str = "sum"         # batch reduction of the optimized objectives
    sampler: str = "uniform"
    exclude_heldout: bool = False
    state_grad: bool = False
    eval_k: int = 20
    exclude_val_in_test: bool = False
    fd_eps: float = 1e-4
    seed: int = 0

    def validate(self) -> TrainConfig:
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError(f"must be one of {STRATEGY_NAMES}", "strategy")
        if self.outer_mode not in OUTER_MODES:
            raise ConfigError(f"must be one of {OUTER_MODES}", "outer_mode")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"must be one of {SCHEMES}", "scheme")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"must be one of {REDUCTIONS}", "reduction")
        for name in ("lr_inner", "lr_outer", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", name)
        for name in ("l2", "gamma", "alpha_scale", "fd_eps"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", name)
        for name in ("K", "d", "batch", "max_epochs", "refresh_every", "patience", "outer_every", "eval_k"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.pretrain_epochs < 0 or self.outer_batch < 0:
            raise ConfigError("must be non-negative", "pretrain_epochs" if self.pretrain_epochs < 0 else "outer_batch")
        return self

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError("unknown training option", key)
            kwargs[key] = _coerce(raw, type(getattr(cls(), key)), key)
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def uses_clusters(self) -> bool:
        return self.strategy in ("til_mi", "til_mik")

    @property
    def uses_generator(self) -> bool:
        return self.strategy != "baseline_bpr"


def _coerce(raw, typ, key):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    try:
        if typ is bool:
            if isinstance(raw, str):
                low = raw.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if typ is int:
            as_float = float(raw)
            if as_float != int(as_float):
                raise ValueError(raw)
            return int(as_float)
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot interpret {raw!r} as {typ.__name__}", key) from None


@dataclass
class TILModel:
    table: EmbeddingTable
    gen: WeightNetParams | None = None
    clusters: ClusterState | None = None

    def copy(self) -> TILModel:
        return TILModel(self.table.copy(), None if self.gen is None else self.gen.copy(),
                        None if self.clusters is None else self.clusters.copy())

    def save(self, path, seed=None):
        extra = {}
        if self.gen is not None:
            extra.update({f"gen_{k}": v for k, v in self.gen.params().items()})
        if self.clusters is not None:
            extra["Phi"] = self.clusters.centers
            if self.clusters.membership is not None:
                extra["membership"] = self.clusters.membership
            extra["tau"] = np.asarray(self.clusters.tau)
        self.table.save(path, seed=seed, extra=extra)

    @classmethod
    def load(cls, path) -> TILModel:
        table, _, extra = EmbeddingTable.load(path)
        gen = None
        if "gen_W1" in extra:
            gen = WeightNetParams(extra["gen_W1"], extra["gen_b1"], extra["gen_W2"], extra["gen_b2"])
        clusters = None
        if "Phi" in extra:
            clusters = ClusterState(extra["Phi"], membership=extra.get("membership"),
                                    tau=float(extra.get("tau", 1.0)))
        return cls(table, gen, clusters)


@dataclass
class EpochRecord:
    epoch: int
    inner_loss: float
    outer_loss: float
    kl_loss: float
    mean_weight: float
    val_recall: float
    val_ndcg: float

    HEADER = ("epoch", "inner_loss", "outer_loss", "kl_loss", "mean_weight", "val_recall@20", "val_ndcg@20")


@dataclass
class TrainResult:
    model: TILModel
    history: list[EpochRecord]
    best_epoch: int
    best_val: float
    stopped_epoch: int
    config: TrainConfig
    batch_mean_weights: list[float] = field(default_factory=list)

    def test_metrics(self, store: InteractionStore, ks=(20,)) -> MetricsReport:
        return evaluate(self.model.table, store, "test", ks, exclude_val=self.config.exclude_val_in_test)


# -- functional pieces ----------------------------------------------------------------

def weighted_loss(table: EmbeddingTable, gen: WeightNetParams, batch: Batch, states: np.ndarray) -> float:
    """Mean over the batch of ``w_t * L_BPR(t)``."""
    w, _ = weightgen.weights(gen, states)
    return float(np.mean(w * softplus(-margins(table, batch.u, batch.i, batch.j))))


def _scale(n: int, reduction: str) -> float:
    return 1.0 if reduction == "sum" else 1.0 / n


def theta_grads(table: EmbeddingTable, batch: Batch, coef: np.ndarray, l2: float) -> dict[str, np.ndarray]:
    """Dense gradient of ``sum_t coef_t * margin_t`` plus the L2 term on touched rows."""
    u, i, j = batch
    pu, qi, qj = table.P[u], table.Q[i], table.Q[j]
    c = coef[:, None]
    gP = scatter_rows(table.n_users, u, c * (qi - qj))
    cp = c * pu
    gQ = scatter_rows(table.n_items, np.concatenate([i, j]), np.concatenate([cp, -cp]))
    if l2:
        ur = np.flatnonzero(np.bincount(u, minlength=table.n_users))
        ir = np.flatnonzero(np.bincount(i, minlength=table.n_items) + np.bincount(j, minlength=table.n_items))
        gP[ur] += 2.0 * l2 * table.P[ur]
        gQ[ir] += 2.0 * l2 * table.Q[ir]
    return {"P": gP, "Q": gQ}


def virtual_step(table: EmbeddingTable, grads: dict[str, np.ndarray], lr_inner: float) -> EmbeddingTable:
    """One plain SGD step ``theta - lr_inner * grad`` (the proxy), as a new table."""
    return EmbeddingTable(table.P - lr_inner * grads["P"], table.Q - lr_inner * grads["Q"])


def outer_loss_and_grad(table: EmbeddingTable, batch: Batch, reduction: str = "sum"
                        ) -> tuple[float, dict[str, np.ndarray]]:
    """Unweighted BPR objective on ``batch`` and its gradient (no L2)."""
    x = margins(table, *batch)
    s = _scale(len(batch), reduction)
    loss = float(np.mean(softplus(-x)))
    return loss, theta_grads(table, batch, s * bpr_coeffs(x), 0.0)


def alignment(table: EmbeddingTable, batch: Batch, dldx: np.ndarray, G: dict[str, np.ndarray]) -> np.ndarray:
    """Per-triplet inner product ``<G, grad_theta L_BPR(t)>``."""
    u, i, j = batch
    pu, qi, qj = table.P[u], table.Q[i], table.Q[j]
    dots = np.einsum("bd,bd->b", G["P"][u], qi - qj) + np.einsum("bd,bd->b", G["Q"][i] - G["Q"][j], pu)
    return dldx * dots


def outer_gradient(table: EmbeddingTable, gen: WeightNetParams, batch_inner: Batch, states: np.ndarray,
                   batch_outer: Batch, lr_inner: float, l2: float = 0.0, reduction: str = "sum",
                   extra_theta_grads: dict[str, np.ndarray] | None = None):
    """Exact gradient of ``lambda -> J_outer(theta - lr_inner * grad J_inner(theta, lambda))``.

    States are constants, so ``lambda`` enters the proxy only through the
    weight factors: ``d theta~/d lambda = -lr_inner * s * sum_t grad L(t) (x) grad w_t``.
    ``extra_theta_grads`` are lambda-independent inner terms (clustering loss).

    Returns ``(grads, outer_loss, weights, proxy_table)``.
    """
    w, cache = weightgen.weights(gen, states)
    x = margins(table, *batch_inner)
    dldx = bpr_coeffs(x)
    s = _scale(len(batch_inner), reduction)
    g_inner = theta_grads(table, batch_inner, s * w * dldx, l2)
    if extra_theta_grads:
        for k, g in extra_theta_grads.items():
            if k in g_inner:
                g_inner[k] = g_inner[k] + g
    proxy = virtual_step(table, g_inner, lr_inner)
    outer_loss, G = outer_loss_and_grad(proxy, batch_outer, reduction)
    a = alignment(table, batch_inner, dldx, G)
    grads, _ = weightgen.backward(gen, cache, -lr_inner * s * a)
    return grads, outer_loss, w, proxy


def composite_outer(table: EmbeddingTable, gen: WeightNetParams, batch_inner: Batch, states: np.ndarray,
                    batch_outer: Batch, lr_inner: float, l2: float = 0.0, reduction: str = "sum",
                    extra_theta_grads=None) -> float:
    """Value of the proxy outer objective, for finite differencing."""
    w, _ = weightgen.weights(gen, states)
    x = margins(table, *batch_inner)
    s = _scale(len(batch_inner), reduction)
    g_inner = theta_grads(table, batch_inner, s * w * bpr_coeffs(x), l2)
    if extra_theta_grads:
        for k, g in extra_theta_grads.items():
            if k in g_inner:
                g_inner[k] = g_inner[k] + g
    proxy = virtual_step(table, g_inner, lr_inner)
    xo = margins(proxy, *batch_outer)
    total = float(np.sum(softplus(-xo)))
    return total if reduction == "sum" else total / len(batch_outer)


def first_order_outer_gradient(table, gen, batch_inner, states, batch_outer, lr_inner, l2, reduction,
                               rng: np.random.Generator, eps: float = 1e-4, extra_theta_grads=None):
    """Simultaneous-perturbation estimate of the outer gradient, one random direction per block.

    Diagnostic fallback: unbiased in expectation but noisy.
    """
    grads = {}
    for name, base in gen.params().items():
        v = rng.choice([-1.0, 1.0], size=base.shape)
        original = base.copy()
        base += eps * v
        hi = composite_outer(table, gen, batch_inner, states, batch_outer, lr_inner, l2, reduction, extra_theta_grads)
        base[...] = original - eps * v
        lo = composite_outer(table, gen, batch_inner, states, batch_outer, lr_inner, l2, reduction, extra_theta_grads)
        base[...] = original
        grads[name] = (hi - lo) / (2 * eps) * v
    return grads


# -- trainer --------------------------------------------------------------------------

class Trainer:
    """Stateful training loop; :meth:`fit` runs the full schedule with early stopping."""

    def __init__(self, store: InteractionStore, cfg: TrainConfig, model: TILModel | None = None):
        self.store = store
        self.cfg = cfg.validate()
        if cfg.uses_clusters and cfg.K > store.n_items:
            raise ConfigError(f"K={cfg.K} exceeds the number of items {store.n_items}", "K")
        self.sampler = NegativeSampler(store, cfg.sampler, cfg.exclude_heldout)
        init_rng = np.random.default_rng([cfg.seed, _INIT])
        if model is None:
            table = EmbeddingTable.init(store.n_users, store.n_items, cfg.d, init_rng)
            gen = WeightNetParams.init(cfg.d, init_rng) if cfg.uses_generator else None
            model = TILModel(table, gen)
        self.model = model
        self.opt_theta = Adam(cfg.lr_inner)
        self.opt_lambda = Adam(cfg.lr_outer)
        # single-level scheme: the generator descends the inner objective at the model's rate
        self._opt_joint = Adam(cfg.lr_inner)
        self.iteration = 0
        self.epoch = 0
        self.cluster_refreshes = 0
        self.eta: np.ndarray | None = None
        self.batch_mean_weights: list[float] = []
        self._outer_rng = None

    # phase helpers
    @property
    def clustering_active(self) -> bool:
        return self.cfg.uses_clusters and self.epoch >= self.cfg.pretrain_epochs

    def _init_clusters(self):
        cfg = self.cfg
        centers, _ = clustering.kmeans(self.model.table.Q, cfg.K, seed=[cfg.seed, _KMEANS, 0])
        self.model.clusters = ClusterState(centers, tau=cfg.tau)
        self.model.clusters.refresh(self.model.table.Q)
        self.cluster_refreshes = 1

    def _refresh_clusters(self):
        cfg, cs = self.cfg, self.model.clusters
        if cfg.strategy == "til_mik":
            cs.centers, _ = clustering.kmeans(self.model.table.Q, cfg.K,
                                              seed=[cfg.seed, _KMEANS, self.cluster_refreshes])
        cs.refresh(self.model.table.Q)
        self.cluster_refreshes += 1

    def states(self, batch: Batch, table: EmbeddingTable | None = None) -> np.ndarray:
        table = self.model.table if table is None else table
        if self.clustering_active:
            cs = self.model.clusters
            return interest.states_mi(table, self.eta, batch.u, batch.i, batch.j, cs.centers,
                                      cs.membership, self.cfg.alpha_scale)
        return interest.states_ui(table, self.eta, batch.u, batch.i, batch.j)

    def _cluster_terms(self):
        """Gradients of ``gamma * KL`` on item embeddings and centers (None when inactive)."""
        cfg = self.cfg
        if not self.clustering_active or cfg.gamma == 0:
            return 0.0, None
        cs = self.model.clusters
        kl, g_items, g_centers = clustering.cluster_grads(self.model.table.Q, cs.centers, cs.target, cfg.tau)
        if not math.isfinite(kl):
            raise NumericalFault("clustering loss became infinite (zero soft assignment under a positive target)")
        grads = {"Q": cfg.gamma * g_items}
        if cfg.strategy == "til_mi":
            grads["Phi"] = cfg.gamma * g_centers
        return kl, grads

    def _check(self, what: str, *arrays):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericalFault(f"non-finite {what} at epoch {self.epoch}, iteration {self.iteration}",
                                     snapshot=getattr(self, "_last_good", None))

    def train_step(self, batch: Batch) -> dict[str, float]:
        """One outer update (when scheduled) followed by one inner update on ``batch``."""
        cfg, model = self.cfg, self.model
        table = model.table
        if self.clustering_active and (self.iteration % cfg.refresh_every == 0):
            self._refresh_clusters()
        s = _scale(len(batch), cfg.reduction)
        x = margins(table, *batch)
        dldx = bpr_coeffs(x)
        losses = softplus(-x)
        kl, cgrads = self._cluster_terms()
        outer_loss = float("nan")

        if not cfg.uses_generator:
            w = np.ones(len(batch))
            grads = theta_grads(table, batch, (w * dldx) * s, cfg.l2)
        else:
            S = self.states(batch)
            self._check("state", S)
            if cfg.scheme == "bilevel" and self.iteration % cfg.outer_every == 0:
                outer_batch = self.sampler.random_batch(self._outer_rng, cfg.outer_batch or cfg.batch)
                if cfg.outer_mode == "second_order":
                    g_lam, outer_loss, _, _ = outer_gradient(
                        table, model.gen, batch, S, outer_batch, cfg.lr_inner, cfg.l2, cfg.reduction, cgrads)
                else:
                    g_lam = first_order_outer_gradient(
                        table, model.gen, batch, S, outer_batch, cfg.lr_inner, cfg.l2, cfg.reduction,
                        self._outer_rng, cfg.fd_eps, cgrads)
                self._check("outer gradient", *g_lam.values())
                self.opt_lambda.step(model.gen.params(), g_lam)

            w, cache = weightgen.weights(model.gen, S)
            grads = theta_grads(table, batch, (w * dldx) * s, cfg.l2)
            if cfg.state_grad or cfg.scheme == "joint":
                g_lam, g_s = weightgen.backward(model.gen, cache, s * losses, need_state_grad=cfg.state_grad)
                if cfg.state_grad:
                    cs = model.clusters if self.clustering_active else None
                    gP, gQ, gPhi = interest.state_backward(
                        table, self.store, self.eta, batch.u, batch.i, batch.j, g_s,
                        None if cs is None else cs.centers, None if cs is None else cs.membership,
                        cfg.alpha_scale)
                    grads["P"] += gP
                    grads["Q"] += gQ
                    if gPhi is not None and cfg.strategy == "til_mi":
                        cgrads = dict(cgrads or {})
                        cgrads["Phi"] = cgrads.get("Phi", 0.0) + gPhi
                if cfg.scheme == "joint":
                    self._check("generator gradient", *g_lam.values())
                    self._opt_joint.step(model.gen.params(), g_lam)

        if cgrads:
            grads["Q"] = grads["Q"] + cgrads["Q"]
        self._check("inner gradient", grads["P"], grads["Q"])
        params = table.params()
        if cgrads and "Phi" in cgrads:
            params["Phi"] = model.clusters.centers
            grads["Phi"] = cgrads["Phi"]
        self.opt_theta.step(params, grads)
        self.iteration += 1
        mean_w = float(np.mean(w))
        self.batch_mean_weights.append(mean_w)
        return {"inner_loss": float(np.mean(w * losses)), "outer_loss": outer_loss, "kl_loss": kl,
                "mean_weight": mean_w}

    def run_epoch(self) -> dict[str, float]:
        cfg = self.cfg
        if cfg.uses_clusters and self.epoch == cfg.pretrain_epochs and self.model.clusters is None:
            self._init_clusters()
        self.eta = interest.all_interests(self.model.table, self.store)
        inner_rng = np.random.default_rng([cfg.seed, _INNER, self.epoch])
        self._outer_rng = np.random.default_rng([cfg.seed, _OUTER, self.epoch])
        sums = {"inner_loss": 0.0, "outer_loss": 0.0, "kl_loss": 0.0, "mean_weight": 0.0}
        n = 0
        for batch in self.sampler.epoch(inner_rng, cfg.batch):
            out = self.train_step(batch)
            for k in sums:
                sums[k] += out[k] if math.isfinite(out[k]) else 0.0
            n += 1
        self.epoch += 1
        return {k: v / max(n, 1) for k, v in sums.items()}

    def fit(self, max_epochs: int | None = None, on_epoch=None) -> TrainResult:
        cfg = self.cfg
        max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
        history = []
        best_val, best_epoch, bad = -math.inf, 0, 0
        best = self.model.copy()
        self._last_good = best
        warm = cfg.pretrain_epochs if cfg.uses_clusters else 0
        if not self.store.evaluable_users("val").size:
            log.warning("no validation users: early stopping disabled, keeping the last epoch")
            warm = max_epochs
        while self.epoch < max_epochs:
            stats = self.run_epoch()
            if not all(math.isfinite(stats[k]) for k in ("inner_loss", "mean_weight")):
                raise NumericalFault(f"non-finite loss at epoch {self.epoch}", snapshot=best)
            metrics = evaluate(self.model.table, self.store, "val", (cfg.eval_k,))
            val_r, val_n = metrics.recall[cfg.eval_k], metrics.ndcg[cfg.eval_k]
            rec = EpochRecord(self.epoch, stats["inner_loss"], stats["outer_loss"], stats["kl_loss"],
                              stats["mean_weight"], val_r, val_n)
            history.append(rec)
            self._last_good = self.model.copy()
            if on_epoch is not None:
                on_epoch(self, rec)
            if self.epoch <= warm:
                # no stopping while pre-training (or without a validation split); track the latest model
                best, best_val, best_epoch, bad = self._last_good, val_r, self.epoch, 0
            elif val_r > best_val:
                best, best_val, best_epoch, bad = self._last_good, val_r, self.epoch, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    log.info("early stop at epoch %d (best %d, val recall %.4f)", self.epoch, best_epoch, best_val)
                    break
        return TrainResult(best, history, best_epoch, best_val, self.epoch, cfg, list(self.batch_mean_weights))


def train(store: InteractionStore, cfg: TrainConfig, model: TILModel | None = None, on_epoch=None
          ) -> TrainResult:
    return Trainer(store, cfg, model).fit(on_epoch=on_epoch)
