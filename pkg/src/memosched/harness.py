"""Experiment wiring: data -> noise -> trainer objective -> schedule search -> artifacts.

One experiment seed fans out into independent streams for the data, the
noise, the trainer and the search, so a run manifest (the resolved config)
is enough to regenerate every artifact byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import data as data_mod
from .schedule import ScheduleParams, schedule_csv
from .search import UPDATE_RULES, SearchConfig, ShapeSurrogate, run_search
from .seeding import DATA_STREAM, NOISE_STREAM, SEARCH_STREAM, TRAIN_STREAM, child_seed
from .trainer import TrainConfig, TrainingObjective, train

log = logging.getLogger(__name__)

ARTIFACTS = ("search_trace.csv", "best_schedule.json", "best_schedule_curve.csv",
             "final_report.csv", "run_manifest.json")
WORKERS_ENV = "MEMOSCHED_WORKERS"

DEFAULT_DATASET = {"kind": "gaussian", "classes": 3, "dim": 60, "n_per_class": 1000,
                   "spread": 0.6, "radius": 2.0}
DEFAULT_NOISE = {"type": "symmetric", "rate": 0.4}
DEFAULT_TRAIN = {"epochs": 30, "batch_size": 128, "learning_rate": 0.02, "momentum": 0.9,
                 "selection_mode": "coteaching", "hidden": [64]}


class HarnessError(RuntimeError):
    """Bad configuration or unusable output location."""


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise HarnessError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if workers < 1:
        raise HarnessError(f"{WORKERS_ENV} must be >= 1")
    return workers


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    noise: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DEFAULT_TRAIN))
    search: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict({**DEFAULT_TRAIN, **self.train})
        if isinstance(self.search, dict):
            self.search = SearchConfig.from_dict(self.search)
        self.dataset = {**DEFAULT_DATASET, **self.dataset} if self.dataset.get("kind", "gaussian") == "gaussian" \
            else dict(self.dataset)
        if self.dataset["kind"] not in ("gaussian", "idx"):
            raise HarnessError(f"unknown dataset kind {self.dataset['kind']!r}")
        if self.dataset["kind"] == "idx" and not {"images", "labels"} <= set(self.dataset):
            raise HarnessError("idx dataset needs 'images' and 'labels' paths")
        self.noise = {**DEFAULT_NOISE, **self.noise}
        if self.noise["type"] not in ("symmetric", "pair", "none"):
            raise HarnessError(f"unknown noise type {self.noise['type']!r}")
        if not 0 <= self.noise["rate"] < 1:
            raise HarnessError("noise rate must be in [0, 1)")
        if self.workers < 1:
            raise HarnessError("workers must be >= 1")

    # seeds of the component streams, all derived from the experiment seed
    def seeds(self) -> dict:
        return {"data": child_seed(self.seed, DATA_STREAM),
                "noise": child_seed(self.seed, NOISE_STREAM),
                "train": child_seed(self.seed, TRAIN_STREAM),
                "search": child_seed(self.seed, SEARCH_STREAM)}

    def resolved_train(self) -> TrainConfig:
        return replace(self.train, seed=self.seeds()["train"])

    def resolved_search(self) -> SearchConfig:
        return replace(self.search, seed=self.seeds()["search"], workers=self.workers)

    def to_dict(self) -> dict:
        search = self.search.to_dict()
        search.pop("workers")
        search.pop("seed")
        train = self.train.to_dict()
        train.pop("seed")
        return {"dataset": self.dataset, "noise": self.noise, "train": train, "search": search,
                "seed": self.seed, "out": self.out, "workers": self.workers}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {"dataset", "noise", "train", "search", "seed", "out", "workers"}
        unknown = set(d) - known - {"resolved_seeds"}
        if unknown:
            raise HarnessError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in d.items() if k in known})
        except (TypeError, ValueError) as exc:
            raise HarnessError(f"invalid config: {exc}") from None

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise HarnessError(f"cannot read config {path}: {exc}") from None


def build_dataset(config: ExperimentConfig) -> data_mod.NoisyDataset:
    seeds = config.seeds()
    spec = config.dataset
    if spec["kind"] == "gaussian":
        ds = data_mod.make_gaussian_mixture(spec["classes"], spec["dim"], spec["n_per_class"],
                                            spec["spread"], seeds["data"], radius=spec["radius"])
    else:
        ds = data_mod.load_idx(spec["images"], spec["labels"], n=spec.get("n"), seed=seeds["data"])
    kind, rate = config.noise["type"], config.noise["rate"]
    if kind == "symmetric":
        return data_mod.inject_symmetric_noise(ds, rate, seeds["noise"])
    if kind == "pair":
        return data_mod.inject_pair_noise(ds, rate, seeds["noise"])
    return ds


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise HarnessError(f"output directory {out} is not writable: {exc.strerror or exc}") from None
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


def manifest(config: ExperimentConfig) -> str:
    doc = config.to_dict()
    doc["resolved_seeds"] = config.seeds()
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_experiment(config: ExperimentConfig) -> int:
    """Search a schedule, retrain with it and write the five artifacts; returns 0."""
    out = _prepare_out(config.out)
    dataset = build_dataset(config)
    train_cfg = config.resolved_train()
    search_cfg = config.resolved_search()
    log.info("searching: rule=%s M=%d K=%d workers=%d", search_cfg.update_rule,
             search_cfg.M, search_cfg.K, search_cfg.workers)
    best_x, trace = run_search(search_cfg, TrainingObjective(dataset, train_cfg))
    if best_x is None:
        raise HarnessError("every candidate evaluation failed; no schedule to report")
    report = train(dataset, best_x, train_cfg)

    _write(out / "run_manifest.json", manifest(config))
    _write(out / "search_trace.csv", trace.to_csv())
    _write(out / "best_schedule.json", json.dumps({
        "schedule": best_x.to_dict(),
        "best_f": trace.best_f,
        "calls": trace.calls,
        "final_theta": trace.final_theta.to_dict(),
    }, indent=2) + "\n")
    _write(out / "best_schedule_curve.csv", schedule_csv(best_x, train_cfg.epochs))
    _write(out / "final_report.csv", report.to_csv())
    log.info("best f %.6g after %d calls; final test acc %.4f", trace.best_f, trace.calls,
             report.final_test_acc)
    return 0


def compare_search_algorithms(config: ExperimentConfig, rules, surrogate: bool = False) -> str:
    """Run every rule with the same budget and seed; CSV rows ``rule, iteration, calls, best_f``.

    ``surrogate=True`` swaps the trainer for the analytic shape objective.
    """
    rules = list(rules)
    bad = [r for r in rules if r not in UPDATE_RULES]
    if not rules or bad:
        raise HarnessError(f"rules must be a non-empty subset of {UPDATE_RULES}, got {rules}")
    if surrogate:
        evaluator = ShapeSurrogate()
    else:
        evaluator = TrainingObjective(build_dataset(config), config.resolved_train())
    base = config.resolved_search()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rule", "iteration", "calls", "best_f"])
    for rule in rules:
        _, trace = run_search(replace(base, update_rule=rule), evaluator)
        for r in trace.records:
            w.writerow([rule, r.iteration, r.calls, repr(float(r.best_f))])
    return buf.getvalue()


def emit_schedule_plot_data(x: ScheduleParams, T: int) -> str:
    """``t, R`` rows for t = 0..T."""
    return schedule_csv(x, T)
