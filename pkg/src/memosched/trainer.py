"""Small-loss training of a numpy MLP, single-network and Co-teaching variants.

A schedule ``R`` decides, per epoch, which fraction of every mini-batch is
kept for the update: the ``keep_count(R(t), batch)`` samples with the smallest
current loss.  :class:`TrainingObjective` wraps a full training run into the
black-box ``f(x)`` minimized by the schedule search.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .schedule import ScheduleParams, keep_count, schedule_curve
from .seeding import TRAIN_STREAM, derive_rng

SELECTION_MODES = ("none", "single", "coteaching")
DIVERGENCE_SENTINEL = 1e6


class TrainingDiverged(ArithmeticError):
    pass


# -- model -------------------------------------------------------------------

@dataclass
class MlpModel:
    """Fully connected ReLU network with a softmax output layer."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> MlpModel:
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        weights = [rng.standard_normal((m, n)) * math.sqrt(2.0 / m) for m, n in zip(sizes, sizes[1:])]
        biases = [np.zeros(n) for n in sizes[1:]]
        return cls(sizes, weights, biases)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> MlpModel:
        return MlpModel(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise ValueError(f"features must be (n, {self.sizes[0]}), got {X.shape}")
        return X

    def activations(self, X) -> list[np.ndarray]:
        """Inputs to every layer followed by the output logits."""
        acts = [self._check(X)]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W + b
            acts.append(z if i == last else np.maximum(z, 0.0))
        return acts

    def logits(self, X) -> np.ndarray:
        return self.activations(X)[-1]

    def predict_proba(self, X) -> np.ndarray:
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def dump(self, path) -> None:
        """Flat little-endian float64 weights plus a JSON header with the shapes."""
        path = Path(path)
        np.concatenate([p.ravel() for p in self.params]).astype("<f8").tofile(path)
        header = {"sizes": list(self.sizes), "shapes": [list(p.shape) for p in self.params], "dtype": "<f8"}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(header) + "\n")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(model: MlpModel, X, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (np.shape(X)[0],):
        raise ValueError("need one label per row")
    if y.size and (y.min() < 0 or y.max() >= model.sizes[-1]):
        raise ValueError("label outside the model's classes")
    return y


def forward_loss(model: MlpModel, X, y) -> tuple[np.ndarray, float]:
    """Per-sample softmax cross-entropy and its mean."""
    y = _check_labels(model, X, y)
    logp = _log_softmax(model.logits(X))
    losses = -logp[np.arange(y.size), y]
    return losses, float(losses.mean())


def backward(model: MlpModel, X, y) -> list[np.ndarray]:
    """Gradient of the mean cross-entropy, ordered like ``model.params``."""
    y = _check_labels(model, X, y)
    acts = model.activations(X)
    n = y.size
    delta = np.exp(_log_softmax(acts[-1]))
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for i in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[i].T @ delta)
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return grads[::-1]


class SgdMomentum:
    """``v <- mu v + g``, ``w <- w - lr v``, in place."""

    def __init__(self, model: MlpModel, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in model.params]

    def step(self, model: MlpModel, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(model.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= self.lr * v


def select_small_loss(losses, n_keep: int) -> np.ndarray:
    """Indices of the ``n_keep`` smallest losses, ties to the lower index, sorted."""
    losses = np.asarray(losses, dtype=float)
    if not 0 <= n_keep <= losses.size:
        raise ValueError(f"n_keep={n_keep} outside [0, {losses.size}]")
    return np.sort(np.argsort(losses, kind="stable")[:n_keep])


# -- training loops -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    selection_mode: str = "coteaching"
    seed: int = 0
    hidden: tuple[int, ...] = (32,)
    objective: str = "val_loss"
    objective_epoch: str = "final"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.objective not in ("val_loss", "val_error"):
            raise ValueError("objective must be 'val_loss' or 'val_error'")
        if self.objective_epoch not in ("final", "best"):
            raise ValueError("objective_epoch must be 'final' or 'best'")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


@dataclass
class TrainReport:
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    label_precision: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    peer_test_acc: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    model: MlpModel | None = field(default=None, repr=False)
    peer: MlpModel | None = field(default=None, repr=False)

    @property
    def final_val_loss(self) -> float:
        return self.val_loss[-1]

    @property
    def final_test_acc(self) -> float:
        return self.test_acc[-1]

    def objective(self, kind: str = "val_loss", epoch: str = "final") -> float:
        curve = self.val_loss if kind == "val_loss" else [1.0 - a for a in self.val_acc]
        return curve[-1] if epoch == "final" else min(curve)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_acc", "val_acc", "test_acc", "label_precision"])
        for t, row in enumerate(zip(self.train_acc, self.val_acc, self.test_acc, self.label_precision)):
            w.writerow([t] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _keep_rates(schedule: ScheduleParams, epochs: int) -> np.ndarray:
    return schedule_curve(schedule, epochs, t=np.arange(epochs, dtype=float))


def _accuracy(model: MlpModel, X, y) -> float:
    return float(np.mean(model.predict(X) == y))


def _record_epoch(report: TrainReport, model: MlpModel, dataset, precisions) -> None:
    X_tr, y_tr = dataset.train_view()
    X_va, y_va = dataset.eval_view(data_mod.VAL)
    X_te, y_te = dataset.eval_view(data_mod.TEST)
    _, val_loss = forward_loss(model, X_va, y_va)
    if not np.isfinite(val_loss):
        raise TrainingDiverged("validation loss is not finite")
    report.train_acc.append(_accuracy(model, X_tr, y_tr))
    report.val_acc.append(_accuracy(model, X_va, y_va))
    report.test_acc.append(_accuracy(model, X_te, y_te))
    report.label_precision.append(float(np.mean(precisions)))
    report.val_loss.append(val_loss)


def _init_model(dataset, config: TrainConfig, which: int) -> MlpModel:
    sizes = (dataset.dim,) + config.hidden + (dataset.num_classes,)
    return MlpModel.init(sizes, derive_rng(config.seed, TRAIN_STREAM, which))


def _batches(n: int, config: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]


def _train_step(model, opt, X, y):
    grads = backward(model, X, y)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged("non-finite gradient")
    opt.step(model, grads)


def train_single(dataset, schedule: ScheduleParams, config: TrainConfig) -> TrainReport:
    """One network trained on its own small-loss selection (or everything, mode ``none``)."""
    if config.selection_mode == "coteaching":
        raise ValueError("use train_coteaching for selection_mode='coteaching'")
    start = time.perf_counter()
    X, y = dataset.train_view()
    clean = dataset.train_clean_mask()
    model = _init_model(dataset, config, 0)
    opt = SgdMomentum(model, config.learning_rate, config.momentum)
    shuffle = derive_rng(config.seed, TRAIN_STREAM, 2)
    rates = _keep_rates(schedule, config.epochs)
    report = TrainReport()
    for t in range(config.epochs):
        precisions = []
        for batch in _batches(y.size, config, shuffle):
            Xb, yb = X[batch], y[batch]
            if config.selection_mode == "none":
                keep = np.arange(batch.size)
            else:
                losses, _ = forward_loss(model, Xb, yb)
                keep = select_small_loss(losses, keep_count(rates[t], batch.size))
            precisions.append(data_mod.label_precision(keep, clean[batch]))
            _train_step(model, opt, Xb[keep], yb[keep])
        _record_epoch(report, model, dataset, precisions)
    report.model = model
    report.wall_time = time.perf_counter() - start
    return report


def train_coteaching(dataset, schedule: ScheduleParams, config: TrainConfig,
                     same_init: bool = False) -> TrainReport:
    """Two peers; each updates on the small-loss samples picked by the other.

    The report follows network A (its accuracy and the precision of its
    selection); network B's test accuracy is kept in ``peer_test_acc``.
    """
    start = time.perf_counter()
    X, y = dataset.train_view()
    clean = dataset.train_clean_mask()
    net_a = _init_model(dataset, config, 0)
    net_b = net_a.copy() if same_init else _init_model(dataset, config, 1)
    opt_a = SgdMomentum(net_a, config.learning_rate, config.momentum)
    opt_b = SgdMomentum(net_b, config.learning_rate, config.momentum)
    shuffle = derive_rng(config.seed, TRAIN_STREAM, 2)
    rates = _keep_rates(schedule, config.epochs)
    X_te, y_te = dataset.eval_view(data_mod.TEST)
    report = TrainReport()
    for t in range(config.epochs):
        precisions = []
        for batch in _batches(y.size, config, shuffle):
            Xb, yb = X[batch], y[batch]
            n_keep = keep_count(rates[t], batch.size)
            loss_a, _ = forward_loss(net_a, Xb, yb)
            loss_b, _ = forward_loss(net_b, Xb, yb)
            pick_a = select_small_loss(loss_a, n_keep)
            pick_b = select_small_loss(loss_b, n_keep)
            precisions.append(data_mod.label_precision(pick_a, clean[batch]))
            _train_step(net_a, opt_a, Xb[pick_b], yb[pick_b])
            _train_step(net_b, opt_b, Xb[pick_a], yb[pick_a])
        _record_epoch(report, net_a, dataset, precisions)
        report.peer_test_acc.append(_accuracy(net_b, X_te, y_te))
    report.model, report.peer = net_a, net_b
    report.wall_time = time.perf_counter() - start
    return report


def train(dataset, schedule: ScheduleParams, config: TrainConfig) -> TrainReport:
    if config.selection_mode == "coteaching":
        return train_coteaching(dataset, schedule, config)
    return train_single(dataset, schedule, config)


@dataclass(frozen=True)
class TrainingObjective:
    """Picklable ``f(x)``: train with schedule ``x`` and read the validation objective."""

    dataset: data_mod.NoisyDataset
    config: TrainConfig

    def __call__(self, x: ScheduleParams) -> float:
        return evaluate_objective(x, self.dataset, self.config)


def evaluate_objective(x: ScheduleParams, dataset, config: TrainConfig) -> float:
    """Validation objective of one training run; ``1e6`` if training diverges."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            report = train(dataset, x, config)
    except (TrainingDiverged, FloatingPointError):
        return DIVERGENCE_SENTINEL
    value = report.objective(config.objective, config.objective_epoch)
    return value if np.isfinite(value) else DIVERGENCE_SENTINEL
