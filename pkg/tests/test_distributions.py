from __future__ import annotations

import json

import numpy as np
import pytest
from scipy import integrate, stats

from memosched import distributions as dist
from memosched.schedule import ScheduleParams

LOG_6 = 1.7917594692280550008
ONE_MINUS_LOG2 = 0.30685281944005469058
TRIGAMMA_4 = 0.28382295573711532536
TRIGAMMA_4_MINUS_1 = -1.3611111111111111111


def random_theta(rng, lo=0.3, hi=8.0):
    return dist.ThetaParams(rng.uniform(lo, hi, 4), rng.uniform(lo, hi, (4, 4, 2)))


def random_point(rng):
    alpha = rng.dirichlet(np.full(4, 2.0))
    alpha = np.maximum(alpha, 1e-6)
    return ScheduleParams(alpha / alpha.sum(), rng.uniform(0.02, 0.98, (4, 4)))


# -- parameters --------------------------------------------------------------------

def test_theta_layout_and_json():
    theta = dist.ThetaParams.uniform()
    assert theta.dim == 36
    v = np.arange(1, 37, dtype=float)
    t2 = theta.with_vector(v)
    assert np.array_equal(t2.to_vector(), v)
    assert t2.beta_shapes[0, 0].tolist() == [5.0, 6.0]
    doc = json.loads(t2.to_json())
    assert set(doc) == {"dirichlet", "beta"} and len(doc["beta"]) == 16
    assert dist.ThetaParams.from_dict(doc) == t2


def test_theta_box_enforced():
    with pytest.raises(ValueError):
        dist.ThetaParams(np.ones(4), np.ones((4, 4, 2)) * 2e3)
    with pytest.raises(ValueError):
        dist.ThetaParams(np.zeros(4), np.ones((4, 4, 2)))
    projected = dist.ThetaParams.uniform().project(np.full(36, -5.0))
    assert np.all(projected.to_vector() == dist.THETA_MIN)


# -- sampling ------------------------------------------------------------------------

def test_uniform_dirichlet_mean():
    rng = np.random.default_rng(0)
    alpha, beta = dist.sample_arrays(dist.ThetaParams.uniform(), rng, 100_000)
    se = alpha.std(axis=0, ddof=1) / np.sqrt(alpha.shape[0])
    assert np.all(np.abs(alpha.mean(axis=0) - 0.25) < 3 * se)
    b = beta[:, 0, 0]
    assert abs(b.mean() - 0.5) < 3 * b.std(ddof=1) / np.sqrt(b.size)


@pytest.mark.parametrize("a,b", [(0.3, 0.5), (0.7, 2.5), (4.0, 4.0), (30.0, 2.0)])
def test_beta_sampler_matches_distribution(a, b):
    x = dist.beta_sample(a, b, np.random.default_rng(1), 20_000)
    assert stats.kstest(x, stats.beta(a, b).cdf).pvalue > 1e-3


def test_tiny_shapes_pile_up_at_the_nudged_boundary():
    # Beta(0.05, 0.3) puts a large share of its mass below 1e-12; those draws
    # are clipped to the boundary nudge, the rest follow the distribution.
    a, b = 0.05, 0.3
    x = dist.beta_sample(a, b, np.random.default_rng(1), 20_000)
    at_floor = np.mean(x == dist.BOUNDARY_EPS)
    p = stats.beta(a, b).cdf(dist.BOUNDARY_EPS)
    assert abs(at_floor - p) < 3 * np.sqrt(p * (1 - p) / x.size)
    inner = x[x > dist.BOUNDARY_EPS]
    cond = stats.beta(a, b)
    cdf = lambda v: (cond.cdf(v) - p) / (1 - p)
    assert stats.kstest(inner, cdf).pvalue > 1e-3


@pytest.mark.parametrize("shape", [0.01, 0.5, 1.0, 3.7, 200.0])
def test_log_gamma_matches_gamma(shape):
    logs = dist.log_gamma_variates(np.full(20_000, shape), np.random.default_rng(2))
    assert np.all(np.isfinite(logs))
    assert stats.kstest(np.exp(logs), stats.gamma(shape).cdf).pvalue > 1e-3


def test_samples_are_valid_and_deterministic():
    theta = dist.ThetaParams(np.full(4, 1e-3), np.full((4, 4, 2), 1e-3))
    xs = dist.sample_many(theta, np.random.default_rng(5), 200)
    ys = dist.sample_many(theta, np.random.default_rng(5), 200)
    assert xs == ys
    for x in xs:
        assert np.all(x.alpha > 0) and np.all((x.beta > 0) & (x.beta < 1))
        assert np.isfinite(dist.log_density(theta, x))


# -- density ---------------------------------------------------------------------------

def test_uniform_log_density_is_log_6():
    rng = np.random.default_rng(3)
    theta = dist.ThetaParams.uniform()
    for _ in range(10):
        assert dist.log_density(theta, random_point(rng)) == pytest.approx(LOG_6, abs=1e-12)


def test_log_density_matches_scipy():
    rng = np.random.default_rng(4)
    theta = random_theta(rng)
    x = random_point(rng)
    ref = stats.dirichlet(theta.dirichlet_conc).logpdf(x.alpha)
    ref += stats.beta(theta.beta_shapes[..., 0], theta.beta_shapes[..., 1]).logpdf(x.beta).sum()
    assert dist.log_density(theta, x) == pytest.approx(ref, rel=1e-10)


def test_two_component_dirichlet_uniform_density_is_zero():
    theta = dist.ThetaParams(np.ones(2), np.ones((2, 1, 2)))
    assert dist.log_density_arrays(theta, [[0.3, 0.7]], [[[0.5], [0.5]]])[0] == pytest.approx(0.0, abs=1e-14)


def test_beta_density_integrates_to_one():
    value, _ = integrate.quad(lambda x: np.exp(dist.beta_log_density(2.0, 3.0, x)), 0, 1)
    grid = np.linspace(0.0005, 0.9995, 1000)
    coarse = np.exp(dist.beta_log_density(2.0, 3.0, grid)).sum() * 0.001
    assert value == pytest.approx(1.0, rel=1e-10)
    assert coarse == pytest.approx(1.0, rel=0.01)


def test_boundary_point_rejected():
    theta = dist.ThetaParams.uniform()
    x = ScheduleParams([1.0, 0.0, 0.0, 0.0], np.full((4, 4), 0.5))
    with pytest.raises(dist.BoundaryPointError):
        dist.log_density(theta, x)
    with pytest.raises(dist.BoundaryPointError):
        dist.score(theta, ScheduleParams.constant_one())


# -- score and Hessian ----------------------------------------------------------------------

def test_score_known_value():
    s = dist.beta_score(1.0, 1.0, 0.5)
    assert s[0] == pytest.approx(ONE_MINUS_LOG2, abs=1e-12)


def _fd_score(theta, x, h=1e-5):
    v = theta.to_vector()
    out = np.empty_like(v)
    for j in range(v.size):
        up, dn = v.copy(), v.copy()
        up[j] += h
        dn[j] -= h
        out[j] = (dist.log_density(theta.with_vector(up), x)
                  - dist.log_density(theta.with_vector(dn), x)) / (2 * h)
    return out


def _fd_hessian(theta, x, h=1e-5):
    v = theta.to_vector()
    cols = []
    for j in range(v.size):
        up, dn = v.copy(), v.copy()
        up[j] += h
        dn[j] -= h
        cols.append((dist.score(theta.with_vector(up), x) - dist.score(theta.with_vector(dn), x)) / (2 * h))
    return np.stack(cols, axis=1)


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_score_and_hessian_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    theta, x = random_theta(rng), random_point(rng)
    assert _rel_err(dist.score(theta, x), _fd_score(theta, x)) < 1e-5
    H = dist.log_density_hessian(theta, x)
    assert _rel_err(H, _fd_hessian(theta, x)) < 1e-4
    assert np.array_equal(H, H.T)


def test_uniform_dirichlet_hessian_block():
    H = dist.log_density_hessian(dist.ThetaParams.uniform())
    block = H[:4, :4]
    assert np.allclose(np.diag(block), TRIGAMMA_4_MINUS_1, atol=1e-11)
    assert np.allclose(block[~np.eye(4, dtype=bool)], TRIGAMMA_4, atol=1e-11)
    assert np.all(H[:4, 4:] == 0)


def test_score_identity_and_information_identity():
    rng = np.random.default_rng(7)
    theta = random_theta(rng, 0.5, 5.0)
    alpha, beta = dist.sample_arrays(theta, rng, 100_000)
    s = dist.score_arrays(theta, alpha, beta)
    se = s.std(axis=0, ddof=1) / np.sqrt(s.shape[0])
    assert np.all(np.abs(s.mean(axis=0)) < 3 * se)

    fisher = dist.fisher_estimate(s)
    assert np.linalg.eigvalsh(fisher).min() > -1e-8
    outer = s[:, :, None] * s[:, None, :]
    outer_se = outer.std(axis=0, ddof=1) / np.sqrt(s.shape[0])
    neg_h = -dist.log_density_hessian(theta)
    # within 3 SE per entry; the 4-sigma slack covers 666 simultaneous entries
    assert np.all(np.abs(fisher - neg_h) <= 4 * outer_se + 1e-12)
