"""Datasets with injected label noise and the bookkeeping for label precision.

Only training-split labels are ever corrupted; validation and test labels stay
clean.  The trainer sees ``y_noisy`` through :meth:`NoisyDataset.train_view`;
``y_clean`` is reachable only through the metric helpers.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .seeding import derive_rng

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class NoisyDataset:
    features: np.ndarray
    y_noisy: np.ndarray
    y_clean: np.ndarray = field(repr=False)
    split: np.ndarray = field(repr=False)
    num_classes: int = 0
    noise: dict = field(default_factory=lambda: {"type": "none", "rate": 0.0, "seed": None})

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        n = X.shape[0]
        y_noisy = np.asarray(self.y_noisy, dtype=np.int64)
        y_clean = np.asarray(self.y_clean, dtype=np.int64)
        split = np.asarray(self.split, dtype=np.int8)
        if not (y_noisy.shape == y_clean.shape == split.shape == (n,)):
            raise ValueError("labels and split must have one entry per row")
        if not np.all(np.isin(split, (TRAIN, VAL, TEST))):
            raise ValueError("split codes must be 0 (train), 1 (val) or 2 (test)")
        if np.any(y_noisy[split != TRAIN] != y_clean[split != TRAIN]):
            raise ValueError("validation and test labels must be clean")
        num_classes = self.num_classes or int(y_clean.max()) + 1
        for arr in (X, y_noisy, y_clean, split):
            arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "y_noisy", y_noisy)
        object.__setattr__(self, "y_clean", y_clean)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "num_classes", num_classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def mask(self, which: int) -> np.ndarray:
        return self.split == which

    def train_view(self) -> tuple[np.ndarray, np.ndarray]:
        """Training features with the labels a learner is allowed to see."""
        m = self.mask(TRAIN)
        return self.features[m], self.y_noisy[m]

    def eval_view(self, which: int) -> tuple[np.ndarray, np.ndarray]:
        if which == TRAIN:
            raise ValueError("use train_view for the training split")
        m = self.mask(which)
        return self.features[m], self.y_clean[m]

    def train_clean_mask(self) -> np.ndarray:
        """Per training row: is its visible label the true one (metrics only)."""
        m = self.mask(TRAIN)
        return self.y_noisy[m] == self.y_clean[m]

    def flip_fraction(self) -> float:
        return float(np.mean(~self.train_clean_mask()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(self.dim)] + ["y_noisy", "y_clean", "split"])
        for i in range(self.n):
            w.writerow([repr(float(v)) for v in self.features[i]]
                       + [int(self.y_noisy[i]), int(self.y_clean[i]), SPLIT_NAMES[int(self.split[i])]])
        return buf.getvalue()


def assign_splits(n: int, rng: np.random.Generator, val_frac: float = 0.1,
                  test_frac: float = 0.2) -> np.ndarray:
    if not (0 < val_frac and 0 < test_frac and val_frac + test_frac < 1):
        raise ValueError("split fractions must be positive and leave room for training")
    n_val = int(round(val_frac * n))
    n_test = int(round(test_frac * n))
    split = np.full(n, TRAIN, dtype=np.int8)
    order = rng.permutation(n)
    split[order[:n_val]] = VAL
    split[order[n_val:n_val + n_test]] = TEST
    return split


def simplex_means(classes: int, dim: int, radius: float = 2.0) -> np.ndarray:
    """Vertices of a regular simplex at distance ``radius`` from the origin.

    Occupies the first ``classes - 1`` coordinates; the remaining ones are
    zero, so extra dimensions carry no class signal.  When ``dim`` is too
    small for a simplex the means form a regular polygon in the first two
    coordinates instead.
    """
    means = np.zeros((classes, dim))
    if dim < classes - 1:
        angle = 2.0 * np.pi * np.arange(classes) / classes
        means[:, 0] = radius * np.cos(angle)
        means[:, 1] = radius * np.sin(angle)
        return means
    centered = np.eye(classes) - 1.0 / classes
    # orthonormal basis of the sum-zero subspace
    q, _ = np.linalg.qr(centered.T)
    coords = centered @ q[:, :classes - 1]
    coords *= radius / np.linalg.norm(coords[0])
    means[:, :classes - 1] = coords
    return means


def make_gaussian_mixture(classes: int, dim: int, n_per_class: int, spread: float,
                          seed: int, radius: float = 2.0, val_frac: float = 0.1,
                          test_frac: float = 0.2) -> NoisyDataset:
    """Isotropic Gaussian classes around simplex vertices.

    With ``dim >= C - 1`` the pairwise mean distance is
    ``radius * sqrt(2C / (C - 1))``; classes are essentially separable while
    ``spread`` is well below half of it (``spread < radius / 4`` keeps the
    Bayes error under 0.1% for C = 3).
    """
    if classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    rng = derive_rng(seed, 0)
    means = simplex_means(classes, dim, radius)
    y = np.repeat(np.arange(classes), n_per_class)
    X = means[y] + spread * rng.standard_normal((y.size, dim))
    order = rng.permutation(y.size)
    X, y = X[order], y[order]
    split = assign_splits(y.size, rng, val_frac, test_frac)
    return NoisyDataset(X, y, y.copy(), split, classes)


def _read_header(buf: bytes, n_ints: int, path) -> tuple[int, ...]:
    need = 4 * n_ints
    if len(buf) < need:
        raise IdxFormatError(f"{path}: truncated header, file ends at offset {len(buf)} (need {need})")
    return struct.unpack(f">{n_ints}I", buf[:need])


def load_idx(images_path, labels_path, n: int | None = None, seed: int = 0,
             val_frac: float = 0.1, test_frac: float = 0.2) -> NoisyDataset:
    """Read an IDX image/label pair (MNIST layout) into a noise-free dataset.

    Pixels are scaled to [0, 1]; ``n`` keeps only the first ``n`` rows.
    """
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()

    magic, = _read_header(img, 1, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}")
    _, count, rows, cols = _read_header(img, 4, images_path)
    magic, = _read_header(lab, 1, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}")
    _, label_count = _read_header(lab, 2, labels_path)
    if label_count != count:
        raise IdxFormatError(f"{labels_path}: {label_count} labels at offset 4 but {count} images")

    take = count if n is None else min(int(n), count)
    pixels = rows * cols
    need = 16 + take * pixels
    if len(img) < need:
        raise IdxFormatError(f"{images_path}: truncated pixel data, file ends at offset {len(img)} (need {need})")
    if len(lab) < 8 + take:
        raise IdxFormatError(f"{labels_path}: truncated labels, file ends at offset {len(lab)} (need {8 + take})")
    X = np.frombuffer(img, dtype=np.uint8, count=take * pixels, offset=16).reshape(take, pixels)
    y = np.frombuffer(lab, dtype=np.uint8, count=take, offset=8).astype(np.int64)
    bad = np.flatnonzero(y > 9)
    if bad.size:
        raise IdxFormatError(f"{labels_path}: label {y[bad[0]]} outside 0..9 at offset {8 + bad[0]}")
    X = X.astype(np.float64) / 255.0
    split = assign_splits(take, derive_rng(seed, 0), val_frac, test_frac)
    return NoisyDataset(X, y, y.copy(), split, 10)


def _with_train_labels(ds: NoisyDataset, new_train: np.ndarray, meta: dict) -> NoisyDataset:
    y = ds.y_clean.copy()
    y[ds.mask(TRAIN)] = new_train
    return replace(ds, y_noisy=y, noise=meta)


def inject_symmetric_noise(ds: NoisyDataset, rate: float, seed: int) -> NoisyDataset:
    """Flip each training label with probability ``rate`` to a uniformly chosen wrong class."""
    if not 0 <= rate < 1:
        raise ValueError("noise rate must be in [0, 1)")
    rng = derive_rng(seed, 0)
    y = ds.y_clean[ds.mask(TRAIN)]
    flip = rng.random(y.size) < rate
    offset = rng.integers(1, ds.num_classes, size=y.size)
    noisy = np.where(flip, (y + offset) % ds.num_classes, y)
    return _with_train_labels(ds, noisy, {"type": "symmetric", "rate": rate, "seed": seed})


def inject_pair_noise(ds: NoisyDataset, rate: float, seed: int) -> NoisyDataset:
    """Flip each training label with probability ``rate`` to the next class (cyclically)."""
    if not 0 <= rate < 1:
        raise ValueError("noise rate must be in [0, 1)")
    rng = derive_rng(seed, 0)
    y = ds.y_clean[ds.mask(TRAIN)]
    flip = rng.random(y.size) < rate
    noisy = np.where(flip, (y + 1) % ds.num_classes, y)
    return _with_train_labels(ds, noisy, {"type": "pair", "rate": rate, "seed": seed})


def label_precision(selected_indices, batch_clean_mask) -> float:
    """Fraction of selected batch positions whose labels are clean."""
    selected = np.asarray(selected_indices, dtype=np.int64)
    if selected.size == 0:
        raise UndefinedMetricError("label precision is undefined for an empty selection")
    return float(np.mean(np.asarray(batch_clean_mask, dtype=bool)[selected]))
