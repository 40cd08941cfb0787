import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from spillcount.diagnostics import effective_sample_size
from spillcount.sampler import (
    InitializationError,
    SamplerConfig,
    kinetic_energy,
    leapfrog,
    sample,
    warmup_windows,
)


def std_normal(theta):
    return -0.5 * float(theta @ theta), -theta


def gaussian(cov):
    prec = np.linalg.inv(cov)

    def f(theta):
        g = -prec @ theta
        return 0.5 * float(theta @ g), g

    return f


def beta_logit(a, b):
    """Beta(a, b) on the logit scale, Jacobian included."""

    def f(s):
        x = s[0]
        lx = -np.logaddexp(0.0, -x)
        l1x = -np.logaddexp(0.0, x)
        p = expit(x)
        return a * lx + b * l1x, np.array([a * (1 - p) - b * p])

    return f


def test_standard_normal_5d():
    cfg = SamplerConfig(num_warmup=500, num_samples=2000, seed=1)
    draws, diag = sample(std_normal, np.zeros(5), cfg)
    assert draws.shape == (1, 2000, 5)
    x = draws[0]
    ess = effective_sample_size(draws)
    assert np.all(np.abs(x.mean(axis=0)) < 4.0 / np.sqrt(ess))
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 0.1)
    assert diag.divergences == 0


def test_correlated_gaussian_rhat_four_chains():
    cov = np.array([[1.0, 0.8, 0.0], [0.8, 1.0, 0.3], [0.0, 0.3, 2.0]])
    cfg = SamplerConfig(num_warmup=500, num_samples=1000, num_chains=4, seed=2)
    init = np.random.default_rng(0).normal(size=(4, 3))
    draws, diag = sample(gaussian(cov), init, cfg)
    assert np.max(diag.split_rhat) < 1.01
    flat = draws.reshape(-1, 3)
    ess = effective_sample_size(draws)
    var = flat.var(axis=0)
    assert np.all(np.abs(var - np.diag(cov)) < 4 * np.diag(cov) * np.sqrt(2.0 / ess))


def test_beta_posterior():
    # Bernoulli data: 7 successes of 20 with a Beta(1, 1) prior
    a, b = 1 + 7, 1 + 13
    cfg = SamplerConfig(num_warmup=500, num_samples=4000, seed=3)
    draws, _ = sample(beta_logit(a, b), np.zeros(1), cfg)
    p = expit(draws[0, :, 0])
    ess = effective_sample_size(p[None, :])
    mean, var = a / (a + b), a * b / ((a + b) ** 2 * (a + b + 1))
    assert abs(p.mean() - mean) < 4 * math.sqrt(var / ess)
    # standard error of the sample variance from the fourth central moment
    m4 = stats.beta(a, b).moment(4) - 4 * mean * stats.beta(a, b).moment(3) + 6 * mean**2 * stats.beta(a, b).moment(2) - 3 * mean**4
    assert abs(p.var() - var) < 4 * math.sqrt((m4 - var**2) / ess)


def test_deterministic():
    cfg = SamplerConfig(num_warmup=100, num_samples=200, num_chains=2, seed=9)
    a, _ = sample(std_normal, np.zeros(3), cfg)
    b, _ = sample(std_normal, np.zeros(3), cfg)
    assert np.array_equal(a, b)


def test_chain_streams_independent_of_chain_count():
    one, _ = sample(std_normal, np.zeros(2), SamplerConfig(num_warmup=50, num_samples=100, num_chains=1, seed=4))
    two, _ = sample(std_normal, np.zeros(2), SamplerConfig(num_warmup=50, num_samples=100, num_chains=2, seed=4))
    assert np.array_equal(one[0], two[0])


def test_seed_changes_draws():
    a, _ = sample(std_normal, np.zeros(2), SamplerConfig(num_warmup=50, num_samples=50, seed=1))
    b, _ = sample(std_normal, np.zeros(2), SamplerConfig(num_warmup=50, num_samples=50, seed=2))
    assert not np.array_equal(a, b)


def test_leapfrog_reversible():
    rng = np.random.default_rng(5)
    f = gaussian(np.diag([1.0, 4.0, 0.25, 9.0]))
    inv_mass = np.array([1.0, 2.0, 0.5, 1.0])
    for _ in range(20):
        theta0 = rng.normal(size=4)
        p0 = rng.normal(size=4)
        _, g = f(theta0)
        theta, p = theta0, p0
        for _ in range(50):
            theta, p, _, g = leapfrog(f, theta, p, g, 0.05, inv_mass)
        p = -p
        for _ in range(50):
            theta, p, _, g = leapfrog(f, theta, p, g, 0.05, inv_mass)
        assert np.max(np.abs(theta - theta0)) < 1e-8
        assert np.max(np.abs(-p - p0)) < 1e-8


def _energy_setup():
    f = gaussian(np.diag([1.0, 2.0]))
    inv_mass = np.ones(2)
    theta0 = np.array([0.7, -1.2])
    p0 = np.array([0.3, 0.9])
    lp0, g0 = f(theta0)
    return f, inv_mass, theta0, p0, g0, -lp0 + kinetic_energy(p0, inv_mass)


def test_energy_error_fixed_time_second_order():
    f, inv_mass, theta0, p0, g0, h0 = _energy_setup()

    def err(eps, t_end=1.0):
        theta, p, g = theta0, p0, g0
        for _ in range(int(round(t_end / eps))):
            theta, p, lp, g = leapfrog(f, theta, p, g, eps, inv_mass)
        return abs(-lp + kinetic_energy(p, inv_mass) - h0)

    for e in (0.1, 0.05, 0.025):
        assert 3.5 < err(e) / err(e / 2) < 4.5


def test_energy_error_single_step_third_order():
    # one step carries a local error of order eps^3
    f, inv_mass, theta0, p0, g0, h0 = _energy_setup()

    def err(eps):
        _, p, lp, _ = leapfrog(f, theta0, p0, g0, eps, inv_mass)
        return abs(-lp + kinetic_energy(p, inv_mass) - h0)

    for e in (0.05, 0.025, 0.0125):
        assert 7.0 < err(e) / err(e / 2) < 9.0


def test_ks_standard_normal():
    passed = 0
    for seed in range(10):
        draws, _ = sample(std_normal, np.zeros(1), SamplerConfig(num_warmup=300, num_samples=1000, seed=seed))
        if stats.kstest(draws[0, :, 0], "norm").pvalue > 0.01:
            passed += 1
    assert passed >= 9


def test_warmup_excluded():
    calls = []

    def f(theta):
        calls.append(1)
        return std_normal(theta)

    draws, diag = sample(f, np.zeros(2), SamplerConfig(num_warmup=30, num_samples=20, seed=0))
    assert draws.shape == (1, 20, 2)
    assert diag.n_draws == 20


def test_warmup_windows_cover_middle():
    w = warmup_windows(1000)
    assert w[0][0] == 75 and w[-1][1] == 950
    assert all(a[1] == b[0] for a, b in zip(w, w[1:]))


def test_bad_init():
    with pytest.raises(InitializationError):
        sample(lambda t: (-np.inf, np.zeros_like(t)), np.zeros(2), SamplerConfig(num_warmup=5, num_samples=5))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(num_samples=0)
