"""Dirichlet-over-alpha, Beta-over-beta relaxation p_theta(x).

The flat parameter vector is laid out as ``[c_1..c_k, a_11, b_11, a_12, ...]``:
``k`` Dirichlet concentrations followed by one ``(a, b)`` Beta pair per shape
component, row-major over (basis, component).  All gradients and Hessians in
this module are with respect to that vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .schedule import NUM_BASIS, NUM_SHAPE, ScheduleParams
from .special import digamma, trigamma

THETA_MIN = 1e-3
THETA_MAX = 1e3
BOUNDARY_EPS = 1e-12


class BoundaryPointError(ValueError):
    """Density, score or Hessian requested at a point on the simplex/box boundary."""


@dataclass(frozen=True)
class ThetaParams:
    dirichlet_conc: np.ndarray
    beta_shapes: np.ndarray
    theta_min: float = THETA_MIN
    theta_max: float = THETA_MAX

    def __post_init__(self):
        conc = np.array(self.dirichlet_conc, dtype=float)
        shapes = np.array(self.beta_shapes, dtype=float)
        if conc.ndim != 1:
            raise ValueError("dirichlet_conc must be a vector")
        if shapes.ndim != 3 or shapes.shape[0] != conc.size or shapes.shape[2] != 2:
            raise ValueError(f"beta_shapes must be (k, p, 2) with k={conc.size}, got {shapes.shape}")
        for arr in (conc, shapes):
            if not np.all(np.isfinite(arr)) or np.any(arr < self.theta_min) or np.any(arr > self.theta_max):
                raise ValueError(f"theta entries must lie in [{self.theta_min}, {self.theta_max}]")
            arr.setflags(write=False)
        object.__setattr__(self, "dirichlet_conc", conc)
        object.__setattr__(self, "beta_shapes", shapes)

    @classmethod
    def uniform(cls, k: int = NUM_BASIS, p: int = NUM_SHAPE, **box) -> ThetaParams:
        """All-ones parameters: uniform on the simplex and on every shape component."""
        return cls(np.ones(k), np.ones((k, p, 2)), **box)

    @property
    def k(self) -> int:
        return self.dirichlet_conc.size

    @property
    def p(self) -> int:
        return self.beta_shapes.shape[1]

    @property
    def dim(self) -> int:
        return self.k + 2 * self.k * self.p

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.dirichlet_conc, self.beta_shapes.ravel()])

    def with_vector(self, v) -> ThetaParams:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {v.shape}")
        return ThetaParams(v[:self.k], v[self.k:].reshape(self.k, self.p, 2),
                           self.theta_min, self.theta_max)

    def project(self, v) -> ThetaParams:
        """Clip a raw parameter vector into the box and wrap it."""
        return self.with_vector(np.clip(v, self.theta_min, self.theta_max))

    def to_dict(self) -> dict:
        return {"dirichlet": self.dirichlet_conc.tolist(),
                "beta": self.beta_shapes.reshape(-1, 2).tolist()}

    @classmethod
    def from_dict(cls, d: dict, p: int = NUM_SHAPE, **box) -> ThetaParams:
        conc = np.asarray(d["dirichlet"], dtype=float)
        pairs = np.asarray(d["beta"], dtype=float)
        return cls(conc, pairs.reshape(conc.size, p, 2), **box)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def __eq__(self, other):
        if not isinstance(other, ThetaParams):
            return NotImplemented
        return (np.array_equal(self.dirichlet_conc, other.dirichlet_conc)
                and np.array_equal(self.beta_shapes, other.beta_shapes))

    __hash__ = None


# -- sampling ----------------------------------------------------------------

def log_gamma_variates(shape, rng: np.random.Generator) -> np.ndarray:
    """Logarithms of Gamma(shape, 1) draws, one per entry of ``shape``.

    Marsaglia-Tsang squeeze/rejection for shape >= 1.  Shapes below one use
    ``G(a) = G(a + 1) * U**(1/a)``, kept in log space so tiny shapes do not
    underflow to zero.
    """
    shape = np.asarray(shape, dtype=float)
    flat = shape.ravel()
    boosted = flat < 1.0
    a = np.where(boosted, flat + 1.0, flat)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(flat)
    pending = np.arange(flat.size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        v = (1.0 + c[pending] * x) ** 3
        ok = v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.where(ok, np.log(np.where(ok, v, 1.0)), 0.0)
            accept = ok & ((u < 1.0 - 0.0331 * x**4)
                           | (np.log(u) < 0.5 * x * x + d[pending] * (1.0 - v + logv)))
        idx = pending[accept]
        out[idx] = np.log(d[idx]) + logv[accept]
        pending = pending[~accept]
    if np.any(boosted):
        idx = np.flatnonzero(boosted)
        u = rng.random(idx.size)
        out[idx] += np.log(u) / flat[idx]
    return out.reshape(shape.shape)


def sample_arrays(theta: ThetaParams, rng: np.random.Generator, n: int):
    """Draw ``n`` points as arrays ``alpha (n, k)`` and ``beta (n, k, p)``.

    Components are nudged ``BOUNDARY_EPS`` inside the boundary so density and
    score are finite.
    """
    log_g = log_gamma_variates(np.broadcast_to(theta.dirichlet_conc, (n, theta.k)), rng)
    log_g -= log_g.max(axis=1, keepdims=True)
    alpha = np.exp(log_g)
    alpha /= alpha.sum(axis=1, keepdims=True)
    alpha = np.maximum(alpha, BOUNDARY_EPS)
    alpha /= alpha.sum(axis=1, keepdims=True)

    log_ab = log_gamma_variates(np.broadcast_to(theta.beta_shapes, (n,) + theta.beta_shapes.shape), rng)
    with np.errstate(over="ignore"):
        beta = 1.0 / (1.0 + np.exp(log_ab[..., 1] - log_ab[..., 0]))
    beta = np.clip(beta, BOUNDARY_EPS, 1.0 - BOUNDARY_EPS)
    return alpha, beta


def sample(theta: ThetaParams, rng: np.random.Generator) -> ScheduleParams:
    alpha, beta = sample_arrays(theta, rng, 1)
    return ScheduleParams(alpha[0], beta[0])


def sample_many(theta: ThetaParams, rng: np.random.Generator, n: int) -> list[ScheduleParams]:
    alpha, beta = sample_arrays(theta, rng, n)
    return [ScheduleParams(a, b) for a, b in zip(alpha, beta)]


# -- density calculus ----------------------------------------------------------

def _stack_points(xs):
    if isinstance(xs, ScheduleParams):
        xs = [xs]
    alpha = np.stack([x.alpha for x in xs])
    beta = np.stack([x.beta for x in xs])
    return alpha, beta


def _check_interior(alpha, beta):
    if np.any(alpha <= 0) or np.any(beta <= 0) or np.any(beta >= 1):
        raise BoundaryPointError("log-density undefined on the boundary; nudge the point inward")


def log_density_arrays(theta: ThetaParams, alpha, beta) -> np.ndarray:
    alpha = np.atleast_2d(alpha)
    beta = np.asarray(beta).reshape((alpha.shape[0],) + theta.beta_shapes.shape[:2])
    _check_interior(alpha, beta)
    conc = theta.dirichlet_conc
    dir_part = (gammaln(conc.sum()) - gammaln(conc).sum()
                + np.log(alpha) @ (conc - 1.0))
    a = theta.beta_shapes[..., 0]
    b = theta.beta_shapes[..., 1]
    log_norm = (gammaln(a + b) - gammaln(a) - gammaln(b)).sum()
    beta_part = log_norm + ((a - 1.0) * np.log(beta) + (b - 1.0) * np.log1p(-beta)).sum(axis=(1, 2))
    return dir_part + beta_part


def log_density(theta: ThetaParams, x: ScheduleParams) -> float:
    return float(log_density_arrays(theta, *_stack_points(x))[0])


def score_arrays(theta: ThetaParams, alpha, beta) -> np.ndarray:
    """Gradient of log p_theta at each point, shape ``(n, D)``."""
    alpha = np.atleast_2d(alpha)
    n = alpha.shape[0]
    beta = np.asarray(beta).reshape((n,) + theta.beta_shapes.shape[:2])
    _check_interior(alpha, beta)
    conc = theta.dirichlet_conc
    dir_block = digamma(conc.sum()) - digamma(conc) + np.log(alpha)
    a = theta.beta_shapes[..., 0]
    b = theta.beta_shapes[..., 1]
    psi_ab = digamma(a + b)
    da = psi_ab - digamma(a) + np.log(beta)
    db = psi_ab - digamma(b) + np.log1p(-beta)
    beta_block = np.stack([da, db], axis=-1).reshape(n, -1)
    return np.concatenate([dir_block, beta_block], axis=1)


def score(theta: ThetaParams, x: ScheduleParams) -> np.ndarray:
    return score_arrays(theta, *_stack_points(x))[0]


def log_density_hessian(theta: ThetaParams, x: ScheduleParams | None = None) -> np.ndarray:
    """Hessian of log p_theta(x) in theta; block diagonal and independent of x."""
    if x is not None:
        _check_interior(*_stack_points(x))
    k = theta.k
    conc = theta.dirichlet_conc
    H = np.zeros((theta.dim, theta.dim))
    H[:k, :k] = trigamma(conc.sum())
    H[np.arange(k), np.arange(k)] -= trigamma(conc)
    a = theta.beta_shapes[..., 0].ravel()
    b = theta.beta_shapes[..., 1].ravel()
    t_ab = trigamma(a + b)
    ia = k + 2 * np.arange(a.size)
    H[ia, ia] = t_ab - trigamma(a)
    H[ia + 1, ia + 1] = t_ab - trigamma(b)
    H[ia, ia + 1] = t_ab
    H[ia + 1, ia] = t_ab
    return H


def fisher_estimate(scores: np.ndarray) -> np.ndarray:
    """Sample average of score outer products."""
    scores = np.asarray(scores, dtype=float)
    return scores.T @ scores / scores.shape[0]


# -- one-dimensional Beta family ------------------------------------------------
# Used for analytic checks of the estimators; parameter vector is (a, b).

def beta_log_density(a: float, b: float, x):
    x = np.asarray(x, dtype=float)
    return gammaln(a + b) - gammaln(a) - gammaln(b) + (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x)


def beta_score(a: float, b: float, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    psi_ab = digamma(a + b)
    return np.stack([psi_ab - digamma(a) + np.log(x), psi_ab - digamma(b) + np.log1p(-x)], axis=-1)


def beta_log_density_hessian(a: float, b: float) -> np.ndarray:
    t_ab = trigamma(a + b)
    return np.array([[t_ab - trigamma(a), t_ab], [t_ab, t_ab - trigamma(b)]])


def beta_sample(a: float, b: float, rng: np.random.Generator, n: int) -> np.ndarray:
    log_ab = log_gamma_variates(np.broadcast_to([a, b], (n, 2)), rng)
    with np.errstate(over="ignore"):
        x = 1.0 / (1.0 + np.exp(log_ab[:, 1] - log_ab[:, 0]))
    return np.clip(x, BOUNDARY_EPS, 1.0 - BOUNDARY_EPS)
