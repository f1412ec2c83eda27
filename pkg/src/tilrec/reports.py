"""Post-training analyses: importance weights by rating cell, and robustness to label noise."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from tilrec import interest, weightgen
from tilrec.data import NOISE_MODES, InteractionStore, NoiseSpec, inject_noise
from tilrec.trainer import TILModel, TrainConfig, train

POS_GRADES = (4, 5)
NEG_GRADES = (1, 2, 3)


def triplet_weights(model: TILModel, store: InteractionStore, u, i, j, alpha_scale: float = 1.0
                    ) -> np.ndarray:
    """Generator weights for arbitrary triplets under the trained model.

    Uses the Multi-Interest state when the model carries cluster centers.
    """
    if model.gen is None:
        return np.ones(len(np.atleast_1d(u)))
    u, i, j = (np.atleast_1d(np.asarray(a, dtype=np.int64)) for a in (u, i, j))
    eta = interest.all_interests(model.table, store)
    cs = model.clusters
    if cs is not None and cs.membership is not None:
        S = interest.states_mi(model.table, eta, u, i, j, cs.centers, cs.membership, alpha_scale)
    else:
        S = interest.states_ui(model.table, eta, u, i, j)
    return weightgen.weights(model.gen, S)[0]


@dataclass
class CaseStudy:
    """Mean weight per ``(rating_i, rating_j)`` cell; ``normalized`` is relative to the largest cell x 100."""

    mean: dict[tuple[int, int], float]
    counts: dict[tuple[int, int], int]
    normalized: dict[tuple[int, int], float] = field(default_factory=dict)

    def cell(self, pos: int, neg: int) -> float | None:
        return self.normalized.get((pos, neg))

    def rows(self) -> list[dict]:
        out = []
        for p in POS_GRADES:
            for n in NEG_GRADES:
                if (p, n) in self.mean:
                    out.append({"rating_pos": p, "rating_neg": n, "count": self.counts[(p, n)],
                                "mean_weight": self.mean[(p, n)], "normalized": self.normalized[(p, n)]})
        return out

    def format(self) -> str:
        lines = ["pos\\neg " + "".join(f"{n:>9d}" for n in NEG_GRADES)]
        for p in POS_GRADES:
            cells = [self.normalized.get((p, n)) for n in NEG_GRADES]
            lines.append(f"{p:>7d} " + "".join(f"{c:9.2f}" if c is not None else f"{'-':>9}" for c in cells))
        return "\n".join(lines)


def normalize_cells(mean: dict) -> dict:
    if not mean:
        return {}
    top = max(mean.values())
    return {k: (100.0 * v / top if top > 0 else 0.0) for k, v in mean.items()}


def case_study(model: TILModel, store: InteractionStore, alpha_scale: float = 1.0,
               max_pairs_per_user: int = 200, seed: int = 0) -> CaseStudy:
    """Group rated ``(u, i, j)`` triplets by rating pair and average their generated weights.

    Positives come from ratings 4 and 5, negatives from 1 to 3. Users with many
    rated items are subsampled to ``max_pairs_per_user`` pairs so no single user
    dominates a cell. Cells without triplets are absent.
    """
    if not store.rating_lookup:
        raise ValueError("case study needs a store that retained explicit ratings")
    by_user: dict[int, dict[int, list[int]]] = {}
    for (u, i), r in store.rating_lookup.items():
        by_user.setdefault(u, {}).setdefault(int(round(r)), []).append(i)
    rng = np.random.default_rng(seed)
    us, is_, js, keys = [], [], [], []
    for u in sorted(by_user):
        grades = by_user[u]
        pairs = [(p, n, i, j) for p in POS_GRADES for n in NEG_GRADES
                 for i in grades.get(p, ()) for j in grades.get(n, ())]
        if not pairs:
            continue
        if len(pairs) > max_pairs_per_user:
            pairs = [pairs[k] for k in np.sort(rng.choice(len(pairs), max_pairs_per_user, replace=False))]
        for p, n, i, j in pairs:
            us.append(u)
            is_.append(i)
            js.append(j)
            keys.append((p, n))
    mean, counts = {}, {}
    if us:
        w = triplet_weights(model, store, us, is_, js, alpha_scale)
        sums: dict[tuple[int, int], float] = {}
        for key, wt in zip(keys, w):
            sums[key] = sums.get(key, 0.0) + float(wt)
            counts[key] = counts.get(key, 0) + 1
        mean = {k: sums[k] / counts[k] for k in sums}
    return CaseStudy(mean, counts, normalize_cells(mean))


@dataclass
class RobustnessReport:
    """Test Recall@k per strategy and noise mode, averaged over seeds."""

    recall: dict[str, dict[str, float]]
    per_seed: dict[str, dict[str, list[float]]]
    fraction: float

    def drop(self, strategy: str, mode: str) -> float:
        clean = self.recall[strategy]["clean"]
        return (clean - self.recall[strategy][mode]) / clean

    def rows(self) -> list[dict]:
        out = []
        for st, by_mode in self.recall.items():
            for mode, r in by_mode.items():
                out.append({"strategy": st, "mode": mode, "fraction": self.fraction if mode != "clean" else 0.0,
                            "recall": r, "drop": self.drop(st, mode)})
        return out


def robustness_report(cfg: TrainConfig, store: InteractionStore, strategies=("baseline_bpr", "til_ui", "til_mi"),
                      modes=("noisy_pos_neg",), fraction: float = 0.5, seeds=(0,), k: int = 20,
                      noise_seed: int = 0, on_run=None) -> RobustnessReport:
    """Train every strategy on the clean store and on each noisy variant; drops are relative to clean."""
    modes = tuple(dict.fromkeys(("clean",) + tuple(modes)))
    for m in modes:
        if m not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {m!r}")
    stores = {"clean": store}
    for m in modes[1:]:
        stores[m] = inject_noise(store, NoiseSpec(m, fraction, noise_seed))
    per_seed: dict[str, dict[str, list[float]]] = {}
    for st in strategies:
        for m in modes:
            for seed in seeds:
                res = train(stores[m], replace(cfg, strategy=st, seed=int(seed)))
                r = res.test_metrics(stores[m], (k,)).recall[k]
                per_seed.setdefault(st, {}).setdefault(m, []).append(r)
                if on_run is not None:
                    on_run(st, m, seed, r)
    recall = {st: {m: float(np.mean(v)) for m, v in by.items()} for st, by in per_seed.items()}
    return RobustnessReport(recall, per_seed, fraction)
