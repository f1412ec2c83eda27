"""``tilrec`` command line: train, compare, gradcheck, report-case-study, report-robustness.

Exit codes: 0 success, 1 configuration error, 2 numerical fault, 3 acceptance
check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

from tilrec.errors import ConfigError, EmptyDatasetError, NumericalFault, ParseError
from tilrec.gradcheck import run_gradcheck

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("tilrec")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="INI experiment file")
    p.add_argument("-s", "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable; wins over the file)")
    p.add_argument("-o", "--out", help="output directory (default: $TILREC_OUTPUT_ROOT/<name>)")


def _spec(args):
    from tilrec.runner import load_spec
    spec = load_spec(args.config, args.set)
    if args.out:
        spec.out_dir = args.out
    return spec


def _print_rows(rows, out=None) -> None:
    out = sys.stdout if out is None else out
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    out.write(buf.getvalue())


def cmd_train(args) -> int:
    from tilrec.runner import run_train
    spec = _spec(args)
    summary = run_train(spec, write_checkpoints=not args.no_checkpoint)
    for k, v in summary.mean.items():
        print(f"{summary.strategy} {k} = {v:.4f} +- {summary.std[k]:.4f}")
    print(f"outputs in {spec.output_dir()}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from tilrec.runner import (RunSummary, build_store, compare_summaries, run_train, write_rows)
    if args.results:
        summaries = [RunSummary.load(Path(r) / "summary.json" if Path(r).is_dir() else r) for r in args.results]
        out = Path(args.out) if args.out else Path(args.results[0]).parent
        k = args.k
    else:
        spec = _spec(args)
        out = spec.output_dir()
        store = build_store(spec)
        summaries = []
        for st in args.strategies.split(","):
            sub = replace(spec, train=replace(spec.train, strategy=st.strip()))
            sub.validate()
            summaries.append(run_train(sub, out / st.strip(), store=store, write_checkpoints=False))
        k = spec.ks[0] if args.k is None else args.k
    k = 20 if k is None else k
    rows = compare_summaries(summaries, k)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "compare.csv", rows)
    _print_rows(rows)
    if args.check:
        rk = f"recall@{k}"
        by = {r["strategy"]: r[rk] for r in rows}
        ordered = [s for s in ("baseline_bpr", "til_ui", "til_mi") if s in by]
        ok = all(by[a] <= by[b] for a, b in zip(ordered, ordered[1:]))
        if not ok:
            print(f"expected {' <= '.join(ordered)} on {rk}", file=sys.stderr)
            return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.instances, args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<14} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e} "
              f"instances={r.instances} {r.seconds:.2f}s {status}")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error / r.tolerance)
        print(f"gradient check failed: {worst.name} (max relative error {worst.max_rel_error:.3e})", file=sys.stderr)
        return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_case_study(args) -> int:
    from tilrec.reports import case_study
    from tilrec.runner import build_store, write_rows
    from tilrec.trainer import TILModel, train
    spec = _spec(args)
    store = build_store(spec)
    if args.model:
        model = TILModel.load(args.model)
    else:
        if not spec.train.uses_generator:
            raise ConfigError("case study needs a TIL strategy", "train.strategy")
        model = train(store, spec.train).model
    report = case_study(model, store, spec.train.alpha_scale)
    if not report.mean:
        raise ConfigError("no rated triplets; the dataset needs explicit ratings", "experiment.dataset")
    print(report.format())
    out = spec.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "case_study.csv", report.rows())
    top, border = report.cell(5, 1), report.cell(4, 3)
    if args.check and (top is None or border is None or not top > border):
        print(f"expected cell (5,1) > cell (4,3), got {top} vs {border}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_robustness(args) -> int:
    from tilrec.reports import robustness_report
    from tilrec.runner import build_store, write_rows
    spec = _spec(args)
    store = build_store(spec)
    modes = tuple(m.strip() for m in args.modes.split(","))
    strategies = tuple(s.strip() for s in args.strategies.split(","))
    report = robustness_report(spec.train, store, strategies, modes, args.fraction, spec.seed_list,
                               k=spec.ks[0],
                               on_run=lambda st, m, seed, r: log.info("%s %s seed %d recall %.4f", st, m, seed, r))
    rows = report.rows()
    out = spec.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "robustness.csv", rows)
    _print_rows(rows)
    if args.check and "baseline_bpr" in report.recall:
        for m in modes:
            base = report.drop("baseline_bpr", m)
            worse = [s for s in strategies if s != "baseline_bpr" and not report.drop(s, m) < base]
            if worse:
                print(f"{m}: {', '.join(worse)} did not drop less than baseline_bpr", file=sys.stderr)
                return EXIT_ACCEPTANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilrec", description="Triplet importance learning for MF recommenders")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one strategy over the configured seeds")
    _common(p)
    p.add_argument("--no-checkpoint", action="store_true", help="skip writing model snapshots")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="side-by-side metrics for several strategies")
    _common(p)
    p.add_argument("--strategies", default="baseline_bpr,til_ui,til_mi")
    p.add_argument("--results", nargs="+", help="compare existing run directories instead of training")
    p.add_argument("-k", type=int, default=None)
    p.add_argument("--check", action="store_true", help="exit 3 unless recall is ordered BPR <= UI <= MI")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report-case-study", help="mean weight per (positive, negative) rating cell")
    _common(p)
    p.add_argument("--model", help="trained snapshot to analyse instead of training one")
    p.add_argument("--check", action="store_true", help="exit 3 unless cell (5,1) beats cell (4,3)")
    p.set_defaults(func=cmd_case_study)

    p = sub.add_parser("report-robustness", help="recall drop under injected noise")
    _common(p)
    p.add_argument("--strategies", default="baseline_bpr,til_ui,til_mi")
    p.add_argument("--modes", default="noisy_pos_neg")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--check", action="store_true", help="exit 3 unless every TIL variant drops less than BPR")
    p.set_defaults(func=cmd_robustness)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, EmptyDatasetError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
