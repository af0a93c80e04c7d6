"""Stochastic-relaxation search over schedules.

The outer problem ``min_x f(x)`` is replaced by ``min_theta J(theta) =
E_{x ~ p_theta}[f(x)]``.  Each iteration draws K candidates, evaluates the
black-box objective on them, and forms Monte-Carlo estimates of the gradient
``E[f * score]`` and of the Hessian ``E[f * (hess log p + score score^T)]``.
The update is ``theta - rho * H^{-1} g`` with H the clamped Hessian (newton),
the clamped Fisher matrix (ng) or the identity (gd), projected into the box.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import distributions as dist
from .schedule import ScheduleParams
from .seeding import SEARCH_STREAM, derive_rng

log = logging.getLogger(__name__)

UPDATE_RULES = ("newton", "gd", "ng", "random")
_DEFAULT_RHO = {"newton": 1.0, "gd": 0.05, "ng": 0.05, "random": 1.0}


@dataclass
class EstimatorBatch:
    """K evaluated samples with their scores.

    ``logp_hessians`` is either one ``(D, D)`` matrix shared by all samples
    (the Dirichlet/Beta Hessian does not depend on x) or a ``(K, D, D)``
    stack.
    """

    f_values: np.ndarray
    scores: np.ndarray
    logp_hessians: np.ndarray
    samples: list | None = None

    def __post_init__(self):
        self.f_values = np.asarray(self.f_values, dtype=float)
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        self.logp_hessians = np.asarray(self.logp_hessians, dtype=float)
        K = self.f_values.shape[0]
        if K < 2:
            raise ValueError("an estimator batch needs at least 2 samples")
        if not np.all(np.isfinite(self.f_values)):
            raise ValueError("objective values must be finite")
        if self.scores.shape[0] != K:
            raise ValueError("one score row per objective value required")
        D = self.scores.shape[1]
        if self.logp_hessians.shape not in ((D, D), (K, D, D)):
            raise ValueError(f"log-density Hessian must be ({D},{D}) or ({K},{D},{D})")

    @property
    def K(self) -> int:
        return self.f_values.shape[0]


def estimate_gradient(batch: EstimatorBatch, baseline_enabled: bool = True) -> np.ndarray:
    f = batch.f_values
    if baseline_enabled:
        f = f - f.mean()
    return f @ batch.scores / batch.K


def estimate_hessian(batch: EstimatorBatch, baseline_enabled: bool = False) -> np.ndarray:
    f = batch.f_values
    if baseline_enabled:
        # unbiased: E[hess log p + score score^T] = 0
        f = f - f.mean()
    S = batch.scores
    outer = (S * f[:, None]).T @ S / batch.K
    if batch.logp_hessians.ndim == 2:
        curv = f.mean() * batch.logp_hessians
    else:
        curv = np.tensordot(f, batch.logp_hessians, axes=1) / batch.K
    H = curv + outer
    return 0.5 * (H + H.T)


def clamp_hessian(H: np.ndarray, eta: float, L_clamp: float) -> np.ndarray:
    """Map every eigenvalue to ``min(max(|lam|, eta), L_clamp)``.

    Negative curvature is flipped rather than zeroed, so the result is always
    positive definite with spectrum in ``[eta, L_clamp]``.  Falls back to
    ``eta * I`` when the eigensolver fails.
    """
    if not 0 < eta <= L_clamp:
        raise ValueError(f"need 0 < eta <= L_clamp, got eta={eta}, L_clamp={L_clamp}")
    H = np.asarray(H, dtype=float)
    try:
        if not np.all(np.isfinite(H)):
            raise np.linalg.LinAlgError("non-finite Hessian estimate")
        lam, V = np.linalg.eigh(0.5 * (H + H.T))
    except np.linalg.LinAlgError:
        log.warning("eigendecomposition failed; using eta * I")
        return eta * np.eye(H.shape[0])
    lam = np.clip(np.abs(lam), eta, L_clamp)
    out = (V * lam) @ V.T
    return 0.5 * (out + out.T)


def update_theta(theta: dist.ThetaParams, g: np.ndarray, Delta: np.ndarray | None,
                 rho: float, rule: str, fisher: np.ndarray | None = None,
                 eta: float = 0.1, L_clamp: float = 100.0) -> dist.ThetaParams:
    """One projected step ``theta - rho * H^{-1} g``.

    ``Delta`` is the (already clamped) Hessian used by ``newton``; ``ng``
    clamps ``fisher`` itself; ``gd`` uses the identity.
    """
    g = np.asarray(g, dtype=float)
    if rule == "random":
        raise ValueError("random search keeps theta fixed; there is no update to apply")
    if rule == "newton":
        if Delta is None:
            raise ValueError("newton update needs the clamped Hessian")
        direction = np.linalg.solve(Delta, g)
    elif rule == "ng":
        if fisher is None:
            raise ValueError("natural-gradient update needs the Fisher estimate")
        direction = np.linalg.solve(clamp_hessian(fisher, eta, L_clamp), g)
    elif rule == "gd":
        direction = g
    else:
        raise ValueError(f"unknown update rule {rule!r}")
    return theta.project(theta.to_vector() - rho * direction)


# -- configuration and trace -----------------------------------------------------

@dataclass
class SearchConfig:
    M: int = 20
    K: int = 8
    rho: float | None = None
    eta: float = 0.1
    L_clamp: float = 100.0
    update_rule: str = "newton"
    baseline_enabled: bool = True
    hessian_baseline: bool = False
    seed: int = 0
    budget: int | None = None
    workers: int = 1
    theta_min: float = dist.THETA_MIN
    theta_max: float = dist.THETA_MAX

    def __post_init__(self):
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")
        if self.M < 1 or self.K < 2:
            raise ValueError("need M >= 1 and K >= 2")
        if not self.step_size > 0:
            raise ValueError("rho must be positive")
        if not 0 < self.eta <= self.L_clamp:
            raise ValueError("need 0 < eta <= L_clamp")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 < self.theta_min <= 1.0 <= self.theta_max:
            raise ValueError("theta box must contain the uniform start theta = 1")

    @property
    def step_size(self) -> float:
        """``rho``, or the per-rule default when it was left unset."""
        return _DEFAULT_RHO[self.update_rule] if self.rho is None else self.rho

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> SearchConfig:
        return cls(**d)


@dataclass
class IterationRecord:
    iteration: int
    theta: dist.ThetaParams
    samples: list
    f_values: list
    grad_norm: float
    step_norm: float
    best_f: float
    best_x: ScheduleParams | None
    calls: int


@dataclass
class SearchTrace:
    rule: str
    records: list = field(default_factory=list)
    final_theta: dist.ThetaParams | None = None

    @property
    def calls(self) -> int:
        return self.records[-1].calls if self.records else 0

    @property
    def best_f(self) -> float:
        return self.records[-1].best_f if self.records else math.inf

    def best_curve(self) -> list[tuple[int, float]]:
        return [(r.calls, r.best_f) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "calls", "best_f", "grad_norm", "step_norm"])
        for r in self.records:
            w.writerow([r.iteration, r.calls, repr(float(r.best_f)),
                        repr(float(r.grad_norm)), repr(float(r.step_norm))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "rule": self.rule,
            "iterations": [{
                "iteration": r.iteration,
                "calls": r.calls,
                "theta": r.theta.to_dict(),
                "f_values": [None if v is None else float(v) for v in r.f_values],
                "grad_norm": _json_float(r.grad_norm),
                "step_norm": _json_float(r.step_norm),
                "best_f": _json_float(r.best_f),
            } for r in self.records],
            "final_theta": self.final_theta.to_dict() if self.final_theta else None,
        })


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


# -- the loop ------------------------------------------------------------------------

def _safe_call(evaluator, x):
    try:
        v = float(evaluator(x))
    except Exception as exc:  # a bad candidate must not end the search
        log.warning("evaluator failed on a candidate: %s", exc)
        return None
    return v if math.isfinite(v) else None


class _Evaluations:
    """Runs candidate evaluations serially or on a process pool.

    Results come back in sample order whatever the completion order.
    """

    def __init__(self, evaluator, workers: int):
        self.evaluator = evaluator
        self.pool = ProcessPoolExecutor(workers) if workers > 1 else None

    def __call__(self, xs):
        if self.pool is None:
            return [_safe_call(self.evaluator, x) for x in xs]
        return list(self.pool.map(_safe_call, [self.evaluator] * len(xs), xs))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def run_search(config: SearchConfig, evaluator: Callable[[ScheduleParams], float],
               theta0: dist.ThetaParams | None = None) -> tuple[ScheduleParams, SearchTrace]:
    """Run M iterations of the relaxed search and return the best sample seen.

    ``theta0`` defaults to all ones (uniform over the search space).  With
    ``update_rule="random"`` theta never moves, which is plain random search.
    The evaluator is called exactly ``M * K`` times unless ``config.budget``
    truncates the run.
    """
    if theta0 is None:
        theta0 = dist.ThetaParams.uniform(theta_min=config.theta_min, theta_max=config.theta_max)
    theta = theta0
    rng = derive_rng(config.seed, SEARCH_STREAM)
    trace = SearchTrace(rule=config.update_rule)
    budget = config.M * config.K if config.budget is None else min(config.budget, config.M * config.K)
    best_f, best_x = math.inf, None
    calls = 0
    runner = _Evaluations(evaluator, config.workers)
    try:
        for m in range(config.M):
            n = min(config.K, budget - calls)
            if n <= 0:
                break
            alpha, beta = dist.sample_arrays(theta, rng, n)
            xs = [ScheduleParams(a, b) for a, b in zip(alpha, beta)]
            values = runner(xs)
            calls += n
            for x, v in zip(xs, values):
                if v is not None and v < best_f:
                    best_f, best_x = v, x

            keep = [i for i, v in enumerate(values) if v is not None]
            grad_norm = step_norm = math.nan
            theta_before = theta
            if len(keep) >= 2:
                batch = EstimatorBatch(
                    f_values=np.array([values[i] for i in keep]),
                    scores=dist.score_arrays(theta, alpha[keep], beta[keep]),
                    logp_hessians=dist.log_density_hessian(theta),
                    samples=[xs[i] for i in keep],
                )
                g = estimate_gradient(batch, config.baseline_enabled)
                grad_norm = float(np.linalg.norm(g))
                if config.update_rule != "random":
                    Delta = fisher = None
                    if config.update_rule == "newton":
                        Delta = clamp_hessian(estimate_hessian(batch, config.hessian_baseline),
                                              config.eta, config.L_clamp)
                    elif config.update_rule == "ng":
                        fisher = dist.fisher_estimate(batch.scores)
                    theta = update_theta(theta, g, Delta, config.step_size, config.update_rule,
                                         fisher=fisher, eta=config.eta, L_clamp=config.L_clamp)
                step_norm = float(np.linalg.norm(theta.to_vector() - theta_before.to_vector()))
            else:
                log.warning("iteration %d: fewer than 2 candidates survived, theta unchanged", m)

            trace.records.append(IterationRecord(
                iteration=m, theta=theta_before, samples=xs, f_values=values,
                grad_norm=grad_norm, step_norm=step_norm, best_f=best_f, best_x=best_x,
                calls=calls))
            log.debug("iter %d calls %d best %.6g |g| %.3g", m, calls, best_f, grad_norm)
    finally:
        runner.close()
    trace.final_theta = theta
    return best_x, trace


def random_search(config: SearchConfig, evaluator: Callable[[ScheduleParams], float]):
    """Best of ``M * K`` draws from the fixed uniform distribution."""
    return run_search(replace(config, update_rule="random"), evaluator)


# -- analytic surrogate ------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSurrogate:
    """Cheap stand-in objective ``(beta[basis, component] - target)**2``."""

    target: float = 0.8
    basis: int = 0
    component: int = 0

    def __call__(self, x: ScheduleParams) -> float:
        return float((x.beta[self.basis, self.component] - self.target) ** 2)

    def relaxed(self, a: float, b: float) -> float:
        """Closed-form J for a Beta(a, b) on the selected component."""
        mean = a / (a + b)
        var = a * b / ((a + b) ** 2 * (a + b + 1.0))
        return var + (mean - self.target) ** 2
