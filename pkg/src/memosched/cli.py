"""``memosched`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .schedule import ScheduleParams, coteaching_reference, fit_to_reference
from .search import UPDATE_RULES
from .trainer import train


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON); defaults are used for missing keys")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--workers", type=int, help=f"parallel evaluations (default ${harness.WORKERS_ENV} or 1)")
    p.add_argument("--budget", type=int, help="cap on objective evaluations")
    p.add_argument("--out", help="output directory")


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.workers = args.workers if args.workers is not None else (
        cfg.workers if args.config else harness.default_workers())
    if cfg.workers < 1:
        raise harness.HarnessError("workers must be >= 1")
    if args.budget is not None:
        try:
            cfg.search = replace(cfg.search, budget=args.budget)
        except ValueError as exc:
            raise harness.HarnessError(str(exc)) from None
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _load_schedule(path) -> ScheduleParams:
    if path is None:
        return ScheduleParams.constant_one()
    doc = json.loads(Path(path).read_text())
    return ScheduleParams.from_dict(doc.get("schedule", doc))


def cmd_search(args) -> int:
    return harness.run_experiment(_load_config(args))


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = harness._prepare_out(cfg.out)
    text = harness.compare_search_algorithms(cfg, args.rules.split(","), surrogate=args.surrogate)
    harness._write(out / "compare.csv", text)
    harness._write(out / "run_manifest.json", harness.manifest(cfg))
    return 0


def cmd_fit_coteaching(args) -> int:
    out = harness._prepare_out(args.out)
    params, residual = fit_to_reference(coteaching_reference(args.tau, args.c, args.t_k), args.T,
                                        restarts=args.restarts, seed=args.seed)
    harness._write(out / "coteaching_fit.json", json.dumps(
        {"schedule": params.to_dict(), "max_residual": residual,
         "tau": args.tau, "c": args.c, "t_k": args.t_k, "T": args.T}, indent=2) + "\n")
    harness._write(out / "coteaching_fit_curve.csv", harness.emit_schedule_plot_data(params, args.T))
    print(f"max residual {residual:.6g}")
    return 0


def cmd_train_once(args) -> int:
    cfg = _load_config(args)
    out = harness._prepare_out(cfg.out)
    dataset = harness.build_dataset(cfg)
    report = train(dataset, _load_schedule(args.schedule), cfg.resolved_train())
    harness._write(out / "train_report.csv", report.to_csv())
    if args.dump_weights:
        report.model.dump(out / "weights.bin")
    print(f"final test acc {report.final_test_acc:.4f}  final val loss {report.final_val_loss:.6g}")
    return 0


def cmd_emit_plot(args) -> int:
    text = harness.emit_schedule_plot_data(_load_schedule(args.schedule), args.T)
    if args.out:
        out = harness._prepare_out(args.out)
        harness._write(out / "schedule_curve.csv", text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memosched", description="Search keep-rate schedules for training under label noise.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a schedule search and write all artifacts")
    _common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("compare", help="compare update rules at equal budget")
    _common(p)
    p.add_argument("--rules", default=",".join(UPDATE_RULES))
    p.add_argument("--surrogate", action="store_true", help="use the analytic objective instead of training")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fit-coteaching", help="fit the search space to the Co-teaching schedule")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--t-k", dest="t_k", type=float, default=10.0)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--restarts", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_fit_coteaching)

    p = sub.add_parser("train-once", help="train with one schedule and write the per-epoch report")
    _common(p)
    p.add_argument("--schedule", help="schedule JSON (default: keep everything)")
    p.add_argument("--dump-weights", action="store_true")
    p.set_defaults(func=cmd_train_once)

    p = sub.add_parser("emit-plot", help="write (t, R) rows of a schedule")
    p.add_argument("--schedule", help="schedule JSON (default: keep everything)")
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.HarnessError, ValueError, OSError) as exc:
        print(f"memosched: error: {exc}".splitlines()[0], file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
