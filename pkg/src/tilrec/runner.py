"""Experiment specs, reproducible outputs, and the work behind each CLI subcommand.

An experiment is described by one INI file::

    [experiment]
    name = demo
    source = synth          ; or "file", which needs dataset = path/to/ratings.tsv
    repetitions = 3
    ks = 20

    [synth]
    n_users = 500

    [noise]
    mode = clean

    [train]
    strategy = til_mi
    lr_inner = 0.001

Dotted overrides (``train.lr_outer=1e-4``) win over file values. Outputs go to
``$TILREC_OUTPUT_ROOT/<name>`` unless an explicit directory is given.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from tilrec import __version__
from tilrec.data import NOISE_MODES, InteractionStore, NoiseSpec, inject_noise, prepare_store, synthesize
from tilrec.errors import ConfigError
from tilrec.evaluation import evaluate
from tilrec.trainer import EpochRecord, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "TILREC_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
SOURCES = ("synth", "file")


@dataclass
class SynthParams:
    """Defaults are the acceptance world: 500 x 1000 with 20% false positives."""

    n_users: int = 500
    n_items: int = 1000
    n_latent_groups: int = 8
    noise_rate: float = 0.2
    seed: int = 0
    density: float = 0.03
    latent_dim: int = 16
    item_spread: float = 0.7
    user_spread: float = 0.7
    max_interests: int = 2


@dataclass
class FileParams:
    rating_threshold: float = 4.0
    min_count: int = 10
    split_seed: int = 0
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    source: str = "synth"
    dataset: str | None = None
    synth: SynthParams = field(default_factory=SynthParams)
    files: FileParams = field(default_factory=FileParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec | None = None
    ks: tuple[int, ...] = (20,)
    out_dir: str | None = None
    repetitions: int = 3
    seeds: tuple[int, ...] | None = None

    def validate(self) -> ExperimentSpec:
        if self.source not in SOURCES:
            raise ConfigError(f"must be one of {SOURCES}, got {self.source!r}", "experiment.source")
        if self.source == "file":
            if not self.dataset:
                raise ConfigError("a dataset path is required when source = file", "experiment.dataset")
            if not Path(self.dataset).is_file():
                raise ConfigError(f"no such file: {self.dataset}", "experiment.dataset")
        if self.repetitions < 1:
            raise ConfigError("must be >= 1", "experiment.repetitions")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("needs at least one k >= 1", "experiment.ks")
        if self.seeds is not None and len(self.seeds) != self.repetitions:
            raise ConfigError(f"{len(self.seeds)} seeds given for {self.repetitions} repetitions", "experiment.seeds")
        try:
            self.train.validate()
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"train.{exc.field}" if exc.field else "train") from exc
        return self

    @property
    def seed_list(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.train.seed + r for r in range(self.repetitions)]

    def output_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / self.name

    def to_dict(self) -> dict:
        return {
            "name": self.name, "source": self.source, "dataset": self.dataset,
            "synth": asdict(self.synth) if self.source == "synth" else None,
            "files": {**asdict(self.files), "ratios": list(self.files.ratios)} if self.source == "file" else None,
            "train": self.train.to_dict(),
            "noise": None if self.noise is None else asdict(self.noise),
            "ks": list(self.ks), "repetitions": self.repetitions, "seeds": self.seed_list,
        }


# -- parsing --------------------------------------------------------------------------------

def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}", key) from None


def _int_list(raw: str, key: str) -> tuple[int, ...]:
    parts = [p for p in raw.replace(",", " ").split() if p]
    return tuple(_parse_value(p, int, key) for p in parts)


def _fill_dataclass(obj, section: dict[str, str], prefix: str):
    """Overwrite dataclass fields from string values, keyed by field name."""
    known = {f.name: f for f in fields(obj)}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {sorted(known)})", f"{prefix}.{key}")
        current = getattr(obj, key)
        if isinstance(current, tuple):
            floats = tuple(_parse_value(p, float, f"{prefix}.{key}") for p in raw.replace(",", " ").split())
            value = floats
        elif isinstance(current, bool):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            value = _parse_value(raw, int, f"{prefix}.{key}")
        elif isinstance(current, float):
            value = _parse_value(raw, float, f"{prefix}.{key}")
        else:
            value = raw.strip()
        setattr(obj, key, value)


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value", "--set")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out.setdefault(section, {})[key.strip()] = value
    return out


def load_spec(path=None, overrides=None) -> ExperimentSpec:
    """Read an INI experiment file (optional) and apply dotted overrides; returns a validated spec."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are field names; keep ``K`` distinct from ``k``
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"no such config file: {path}", "--config")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(str(exc), "--config") from None
    sections = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, values in parse_overrides(overrides).items():
        sections.setdefault(section, {}).update(values)

    spec = ExperimentSpec()
    allowed = {"experiment", "synth", "data", "noise", "train"}
    for section in sections:
        if section not in allowed:
            raise ConfigError(f"unknown section (expected one of {sorted(allowed)})", section)
    exp = sections.get("experiment", {})
    for key, raw in exp.items():
        k = f"experiment.{key}"
        if key in ("name", "source", "dataset", "out_dir"):
            setattr(spec, key, raw.strip() or None)
        elif key == "repetitions":
            spec.repetitions = _parse_value(raw, int, k)
        elif key == "ks":
            spec.ks = _int_list(raw, k)
        elif key == "seeds":
            spec.seeds = _int_list(raw, k)
        else:
            raise ConfigError("unknown key", k)
    if spec.dataset and "source" not in exp:
        spec.source = "file"
    _fill_dataclass(spec.synth, sections.get("synth", {}), "synth")
    _fill_dataclass(spec.files, sections.get("data", {}), "data")
    if "train" in sections:
        try:
            spec.train = TrainConfig.from_dict(sections["train"])
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"train.{exc.field}" if exc.field else "train") from None
    noise = sections.get("noise", {})
    if noise:
        mode = noise.get("mode", "clean").strip()
        try:
            fraction = _parse_value(noise.get("fraction", "0.5"), float, "noise.fraction")
            seed = _parse_value(noise.get("seed", "0"), int, "noise.seed")
            spec.noise = None if mode == "clean" else NoiseSpec(mode, fraction, seed)
        except ValueError as exc:
            raise ConfigError(str(exc), "noise") from None
        extra = set(noise) - {"mode", "fraction", "seed"}
        if extra:
            raise ConfigError("unknown key", f"noise.{sorted(extra)[0]}")
        if mode not in NOISE_MODES:
            raise ConfigError(f"must be one of {NOISE_MODES}", "noise.mode")
    return spec.validate()


# -- datasets and provenance ----------------------------------------------------------------------

def build_store(spec: ExperimentSpec) -> InteractionStore:
    if spec.source == "synth":
        p = spec.synth
        store, _ = synthesize(p.n_users, p.n_items, p.n_latent_groups, p.noise_rate, p.seed,
                              density=p.density, latent_dim=p.latent_dim, item_spread=p.item_spread,
                              user_spread=p.user_spread, max_interests=p.max_interests)
    else:
        f = spec.files
        store = prepare_store(spec.dataset, rating_threshold=f.rating_threshold, min_count=f.min_count,
                              ratios=f.ratios, seed=f.split_seed)
    if spec.noise is not None:
        store = inject_noise(store, spec.noise)
    return store


def store_fingerprint(store: InteractionStore) -> str:
    h = hashlib.sha256()
    h.update(f"{store.n_users},{store.n_items}".encode())
    for part in (store.train_pos, store.val_pos, store.test_pos):
        for arr in part:
            h.update(np.asarray(arr, dtype=np.int64).tobytes())
            h.update(b"|")
    return h.hexdigest()[:16]


def version_string() -> str:
    """``git describe`` of the source checkout when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return "nan" if x != x else repr(float(x))


# -- train ------------------------------------------------------------------------------------

@dataclass
class RunSummary:
    strategy: str
    seeds: list[int]
    per_seed: list[dict]
    mean: dict[str, float]
    std: dict[str, float]
    fingerprint: str

    @classmethod
    def load(cls, path) -> RunSummary:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(blob["config"]["train"]["strategy"], blob["seeds"], blob["per_seed"], blob["mean"],
                   blob["std"], blob["dataset_fingerprint"])


def write_history(path: Path, history: list[EpochRecord]) -> None:
    _write_csv(path, EpochRecord.HEADER,
               [[r.epoch] + [_fmt(v) for v in (r.inner_loss, r.outer_loss, r.kl_loss, r.mean_weight,
                                              r.val_recall, r.val_ndcg)] for r in history])


def run_train(spec: ExperimentSpec, out_dir: Path | None = None, store: InteractionStore | None = None,
              write_checkpoints: bool = True) -> RunSummary:
    """Train ``spec.repetitions`` seeds; write per-seed history, metrics, checkpoint and a summary."""
    out = Path(out_dir) if out_dir is not None else spec.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    store = build_store(spec) if store is None else store
    fp = store_fingerprint(store)
    version = version_string()
    provenance = {"config": spec.to_dict(), "version": version, "dataset_fingerprint": fp}
    per_seed = []
    for seed in spec.seed_list:
        cfg = replace(spec.train, seed=seed)
        log.info("training %s seed %d", cfg.strategy, seed)
        res: TrainResult = train(store, cfg)
        test = res.test_metrics(store, spec.ks).to_dict()
        val = evaluate(res.model.table, store, "val", spec.ks).to_dict()
        write_history(out / f"history_seed{seed}.csv", res.history)
        if write_checkpoints:
            res.model.save(out / f"model_seed{seed}.npz", seed=seed)
        record = {"seed": seed, "best_epoch": res.best_epoch, "stopped_epoch": res.stopped_epoch,
                  "test": test, "val": val}
        _write_json(out / f"metrics_seed{seed}.json", {**provenance, "seed": seed, "train": cfg.to_dict(), **record})
        per_seed.append(record)
    keys = [k for k in per_seed[0]["test"] if k != "n_users_evaluated"]
    mean = {k: float(np.mean([r["test"][k] for r in per_seed])) for k in keys}
    std = {k: float(np.std([r["test"][k] for r in per_seed])) for k in keys}
    _write_json(out / "summary.json", {**provenance, "seeds": spec.seed_list, "per_seed": per_seed,
                                       "mean": mean, "std": std})
    return RunSummary(spec.train.strategy, spec.seed_list, per_seed, mean, std, fp)


# -- compare ----------------------------------------------------------------------------------

def compare_summaries(summaries: list[RunSummary], k: int = 20) -> list[dict]:
    """One row per strategy; improvements are relative to the first summary."""
    if not summaries:
        raise ConfigError("nothing to compare", "compare")
    ref = summaries[0]
    for s in summaries[1:]:
        if s.fingerprint != ref.fingerprint:
            raise ConfigError(f"dataset mismatch: {s.strategy} ran on {s.fingerprint}, "
                              f"{ref.strategy} on {ref.fingerprint}", "compare")
        if sorted(s.seeds) != sorted(ref.seeds):
            raise ConfigError(f"seed mismatch: {s.strategy} used {s.seeds}, {ref.strategy} used {ref.seeds}",
                              "compare")
    rk, nk = f"recall@{k}", f"ndcg@{k}"
    rows = []
    for s in summaries:
        rows.append({
            "strategy": s.strategy,
            rk: s.mean[rk], f"{rk}_std": s.std[rk],
            nk: s.mean[nk], f"{nk}_std": s.std[nk],
            f"{rk}_rel_improvement": (s.mean[rk] - ref.mean[rk]) / ref.mean[rk] if ref.mean[rk] else 0.0,
            f"{nk}_rel_improvement": (s.mean[nk] - ref.mean[nk]) / ref.mean[nk] if ref.mean[nk] else 0.0,
        })
    return rows


def write_rows(path: Path, rows: list[dict]) -> None:
    header = list(rows[0])
    _write_csv(path, header, [[_fmt(r[h]) if isinstance(r[h], float) else r[h] for h in header] for r in rows])
