"""Keep-rate schedules R(t) built from a mixture of decaying basis curves.

A schedule is ``R(t) = clamp(sum_i alpha_i * f_i(t; a_i), 0, 1)`` where the
mixture weights ``alpha`` live on the simplex and every basis ``f_i`` has four
shape parameters ``a = (a1, a2, a3, a4)``.  Shape parameters are stored raw in
``[0, 1]`` and mapped to their effective range by a :class:`ShapeMap`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NUM_BASIS = 4
NUM_SHAPE = 4
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class ShapeMap:
    """Affine map from raw unit-interval shape values to effective values."""

    lo: tuple[float, ...] = (0.5, 0.0, 0.0, 0.5)
    hi: tuple[float, ...] = (2.0, 1.0, 1.0, 2.0)

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("ShapeMap lo/hi length mismatch")
        for lo, hi in zip(self.lo, self.hi):
            if not lo < hi:
                raise ValueError(f"ShapeMap slot needs lo < hi, got [{lo}, {hi}]")

    def __call__(self, raw):
        raw = np.asarray(raw, dtype=float)
        lo = np.asarray(self.lo)
        return lo + (np.asarray(self.hi) - lo) * raw

    def inverse(self, effective):
        effective = np.asarray(effective, dtype=float)
        lo = np.asarray(self.lo)
        return (effective - lo) / (np.asarray(self.hi) - lo)


DEFAULT_SHAPE_MAP = ShapeMap()


@dataclass(frozen=True)
class ScheduleParams:
    """A point of the search space: simplex weights plus raw shape rows."""

    alpha: np.ndarray
    beta: np.ndarray = field(repr=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        beta = np.array(self.beta, dtype=float)
        if alpha.ndim != 1 or alpha.shape[0] != NUM_BASIS:
            raise ValueError(f"alpha must have {NUM_BASIS} entries, got shape {alpha.shape}")
        if beta.shape != (NUM_BASIS, NUM_SHAPE):
            raise ValueError(f"beta must be {NUM_BASIS}x{NUM_SHAPE}, got {beta.shape}")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"alpha must lie on the simplex, got {alpha}")
        if np.any(beta < 0) or np.any(beta > 1) or not np.all(np.isfinite(beta)):
            raise ValueError("beta components must lie in [0, 1]")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def constant_one(cls) -> ScheduleParams:
        """Schedule identically equal to 1 (no decay, no additive term)."""
        beta = np.zeros((NUM_BASIS, NUM_SHAPE))
        return cls(np.full(NUM_BASIS, 1.0 / NUM_BASIS), beta)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ScheduleParams:
        return cls(np.asarray(d["alpha"], dtype=float), np.asarray(d["beta"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> ScheduleParams:
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, ScheduleParams):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and np.array_equal(self.beta, other.beta)

    __hash__ = None


def _basis_curve(i: int, t: np.ndarray, T: float, a: np.ndarray) -> np.ndarray:
    a1, a2, a3, a4 = a
    if i in (1, 2):
        decay = np.exp(-a2 * t**a1)
    else:
        decay = (1.0 + a2 * t) ** (-a1)
    if i in (1, 3):
        growth = (t / T) ** a4
    else:
        growth = np.log1p(t**a4) / math.log1p(T**a4)
    return decay + a3 * growth


def _check_horizon(T):
    if not T >= 1:
        raise ValueError(f"horizon T must be >= 1, got {T}")


def eval_basis(i: int, t: float, T: float, beta_i: Sequence[float],
               shape_map: ShapeMap = DEFAULT_SHAPE_MAP) -> float:
    """Value of basis curve ``f_i`` (1-based, ``i`` in 1..4) at epoch ``t``.

    ``beta_i`` holds the raw shape row; ``shape_map`` turns it into
    ``(a1, a2, a3, a4)``.  Every basis equals 1 at ``t = 0``.
    """
    if not 1 <= i <= NUM_BASIS:
        raise ValueError(f"basis index must be in 1..{NUM_BASIS}, got {i}")
    _check_horizon(T)
    if not 0 <= t <= T:
        raise ValueError(f"epoch t={t} outside [0, {T}]")
    raw = np.asarray(beta_i, dtype=float)
    if raw.shape != (NUM_SHAPE,) or np.any(raw < 0) or np.any(raw > 1):
        raise ValueError(f"shape row must be {NUM_SHAPE} values in [0, 1], got {beta_i}")
    return float(_basis_curve(i, np.float64(t), float(T), shape_map(raw)))


def basis_matrix(params: ScheduleParams, t, T: float,
                 shape_map: ShapeMap = DEFAULT_SHAPE_MAP) -> np.ndarray:
    """Basis values with shape ``(NUM_BASIS, len(t))``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    eff = shape_map(params.beta)
    return np.stack([_basis_curve(i + 1, t, float(T), eff[i]) for i in range(NUM_BASIS)])


def schedule_curve(params: ScheduleParams, T: int,
                   shape_map: ShapeMap = DEFAULT_SHAPE_MAP, t=None) -> np.ndarray:
    """R(t) on ``t`` (default: the integer grid 0..T), clamped to [0, 1]."""
    _check_horizon(T)
    if t is None:
        t = np.arange(T + 1, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"epochs must lie in [0, {T}]")
    # explicit weighted sum rather than a BLAS product: the reduction order
    # then does not depend on how many epochs are evaluated at once
    mix = (params.alpha[:, None] * basis_matrix(params, t, T, shape_map)).sum(axis=0)
    values = np.clip(mix, 0.0, 1.0)
    # the weights sum to 1 only up to rounding; R(0) = 1 is required exactly
    values[t == 0] = 1.0
    return values


def eval_schedule(params: ScheduleParams, t: float, T: float,
                  shape_map: ShapeMap = DEFAULT_SHAPE_MAP) -> float:
    if not 0 <= t <= T:
        raise ValueError(f"epoch t={t} outside [0, {T}]")
    return float(schedule_curve(params, T, shape_map, t=[t])[0])


def keep_count(R: float, batch_size: int) -> int:
    """Number of small-loss samples kept from a batch; at least one."""
    n = int(math.floor(R * batch_size + 0.5))
    return min(batch_size, max(1, n))


def coteaching_schedule(tau: float, c: float, t_k: float, t: float) -> float:
    return 1.0 - tau * min((t / t_k) ** c, 1.0)


def coteaching_reference(tau: float, c: float = 1.0, t_k: float = 10.0) -> Callable[[float], float]:
    return lambda t: coteaching_schedule(tau, c, t_k, t)


def schedule_csv(params: ScheduleParams, T: int,
                 shape_map: ShapeMap = DEFAULT_SHAPE_MAP) -> str:
    """CSV text with header ``t,R`` and one row per epoch 0..T."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "R"])
    for t, r in enumerate(schedule_curve(params, T, shape_map)):
        writer.writerow([t, repr(float(r))])
    return buf.getvalue()


# -- fitting -----------------------------------------------------------------

class _CurveFitter:
    """Direct search over the packed vector ``z = (w, raw beta)`` in [0,1]^20.

    Mixture weights are ``w / sum(w)``.  Basis rows are cached so a move of a
    single coordinate recomputes at most one row.
    """

    def __init__(self, target: np.ndarray, T: int, shape_map: ShapeMap):
        self.target = target
        self.T = T
        self.t = np.arange(T + 1, dtype=float)
        self.shape_map = shape_map

    def rows(self, z):
        eff = self.shape_map(z[NUM_BASIS:].reshape(NUM_BASIS, NUM_SHAPE))
        return np.stack([_basis_curve(i + 1, self.t, self.T, eff[i]) for i in range(NUM_BASIS)])

    def row(self, z, i):
        eff = self.shape_map(z[NUM_BASIS + i * NUM_SHAPE:NUM_BASIS + (i + 1) * NUM_SHAPE])
        return _basis_curve(i + 1, self.t, self.T, eff)

    @staticmethod
    def weights(z):
        w = z[:NUM_BASIS]
        s = w.sum()
        return w / s if s > 0 else np.full(NUM_BASIS, 1.0 / NUM_BASIS)

    def residual(self, z, rows, order):
        r = np.clip(self.weights(z) @ rows, 0.0, 1.0)
        r[0] = 1.0
        diff = np.abs(r - self.target)
        if math.isinf(order):
            return float(diff.max())
        scale = diff.max()
        if scale == 0.0:
            return 0.0
        return float(scale * np.mean((diff / scale) ** order) ** (1.0 / order))

    def descend(self, z, order, step=0.25, tol=1e-8, max_sweeps=200):
        # per-coordinate step: doubled after a successful move, halved otherwise
        rows = self.rows(z)
        best = self.residual(z, rows, order)
        steps = np.full(z.size, step)
        signs = np.ones(z.size)
        for _ in range(max_sweeps):
            if steps.max() < tol:
                break
            start = z
            for j in range(z.size):
                if steps[j] < tol:
                    continue
                basis = None if j < NUM_BASIS else (j - NUM_BASIS) // NUM_SHAPE
                moved = False
                for direction in (signs[j], -signs[j]):
                    cand = z.copy()
                    cand[j] = min(1.0, max(0.0, z[j] + direction * steps[j]))
                    if cand[j] == z[j]:
                        continue
                    cand_rows = rows
                    if basis is not None:
                        cand_rows = rows.copy()
                        cand_rows[basis] = self.row(cand, basis)
                    val = self.residual(cand, cand_rows, order)
                    if val < best:
                        z, rows, best = cand, cand_rows, val
                        signs[j] = direction
                        moved = True
                        break
                steps[j] = min(0.5, steps[j] * 2.0) if moved else steps[j] * 0.5
            # pattern move along the sweep's net displacement
            shift = z - start
            while np.any(shift):
                cand = np.clip(z + shift, 0.0, 1.0)
                cand_rows = self.rows(cand)
                val = self.residual(cand, cand_rows, order)
                if not val < best:
                    break
                z, rows, best = cand, cand_rows, val
                shift = 2.0 * shift
        return z, best


def fit_to_reference(ref: Callable[[float], float], T: int,
                     shape_map: ShapeMap = DEFAULT_SHAPE_MAP, restarts: int = 50,
                     seed: int = 0) -> tuple[ScheduleParams, float]:
    """Fit a mixture schedule to ``ref`` in the max-deviation sense on 0..T.

    Multi-start coordinate descent with pattern moves.  Each restart descends
    the RMS error first, then the 16-norm, then the max deviation itself; the
    smoother norms keep coordinate moves from stalling on the kinks of the
    max.  Returns the best parameters and their max deviation.
    """
    _check_horizon(T)
    T = int(T)
    target = np.array([ref(float(t)) for t in range(T + 1)], dtype=float)
    fitter = _CurveFitter(target, T, shape_map)
    rng = np.random.default_rng(seed)
    best_z, best_res = None, math.inf
    for _ in range(max(1, restarts)):
        z = rng.random(NUM_BASIS + NUM_BASIS * NUM_SHAPE)
        z, _ = fitter.descend(z, 2)
        z, _ = fitter.descend(z, 16, step=0.05)
        z, res = fitter.descend(z, math.inf, step=0.01)
        if res < best_res:
            best_z, best_res = z, res
    alpha = fitter.weights(best_z)
    alpha = alpha / alpha.sum()
    params = ScheduleParams(alpha, best_z[NUM_BASIS:].reshape(NUM_BASIS, NUM_SHAPE))
    residual = float(np.max(np.abs(schedule_curve(params, T, shape_map) - target)))
    return params, residual
