import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import expit

from spillcount.prior import (
    InvalidStateError,
    ParamLayout,
    PriorConfig,
    TpbnState,
    log_alpha_logpdf,
    log_prior,
    log_prior_and_grad,
    log_tau_logpdf,
    logit_xi_logpdf,
    normal_logpdf,
    tpbn_coefficients,
    tpbn_pullback,
    tpbn_reconstruct,
    unpack,
)

from conftest import central_diff, rel_err

CFG = PriorConfig()


def test_reconstruct_zero_z():
    s = TpbnState(xi=np.full(4, 0.3), z=np.zeros(4), tau=0.7)
    np.testing.assert_array_equal(tpbn_reconstruct(s), np.zeros(4))


def test_reconstruct_xi_near_one():
    g = tpbn_reconstruct(TpbnState(xi=np.array([1.0 - 1e-12]), z=np.array([2.0]), tau=1.0))
    assert abs(g[0]) < 1e-5


def test_reconstruct_closed_form():
    g = tpbn_reconstruct(TpbnState(xi=np.array([0.5]), z=np.array([1.0]), tau=0.5))
    assert g[0] == pytest.approx(0.5 * math.sqrt(0.5 / 0.50001), rel=1e-14)


def test_reconstruct_invalid():
    with pytest.raises(InvalidStateError):
        tpbn_reconstruct(TpbnState(xi=np.array([0.0]), z=np.array([1.0]), tau=1.0))
    with pytest.raises(InvalidStateError):
        tpbn_reconstruct(TpbnState(xi=np.array([0.5]), z=np.array([1.0]), tau=0.0))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-4, 2), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_unconstrained_coefficients_match_state(s, log_tau, seed):
    s = np.array(s)
    z = np.random.default_rng(seed).normal(size=s.size)
    g = tpbn_coefficients(z, s, log_tau)
    ref = tpbn_reconstruct(TpbnState(expit(s), z, math.exp(log_tau))) if np.all((expit(s) > 0) & (expit(s) < 1)) else g
    np.testing.assert_allclose(g, ref, rtol=1e-12, atol=1e-300)


def test_fixed_effect_at_zero():
    v, _ = normal_logpdf(0.0, CFG.sigma_fixed)
    assert v == pytest.approx(-math.log(100.0 * math.sqrt(2.0 * math.pi)), abs=1e-14)


def test_half_cauchy_density_against_quadrature():
    tau0 = 0.5
    raw = lambda t: 1.0 / (1.0 + (t / tau0) ** 2)
    norm, _ = integrate.quad(raw, 0.0, np.inf)
    expected = raw(0.5) / norm
    v, _ = log_tau_logpdf(math.log(0.5), tau0)
    # remove the log-scale Jacobian to get the density of tau itself
    assert math.exp(v - math.log(0.5)) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(2.0 / math.pi, rel=1e-9)


def test_beta_half_half_density():
    v, _ = logit_xi_logpdf(0.0, 0.5, 0.5)
    # Jacobian at xi = 0.5 is 0.25
    log_density = float(v) - math.log(0.25)
    assert log_density == pytest.approx(stats.beta(0.5, 0.5).logpdf(0.5), abs=1e-13)
    assert log_density == pytest.approx(math.log(2.0 / math.pi), abs=1e-13)


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: normal_logpdf(x, 100.0)[0],
        lambda x: normal_logpdf(x, 1.0)[0],
        lambda x: logit_xi_logpdf(x, 0.5, 0.5)[0],
        lambda x: logit_xi_logpdf(x, 2.0, 3.0)[0],
        lambda x: log_tau_logpdf(x, 0.5)[0],
        lambda x: log_alpha_logpdf(x, 1.0, 10.0)[0],
        lambda x: log_alpha_logpdf(x, 2.5, 0.3)[0],
    ],
)
def test_component_densities_normalize(fn):
    with np.errstate(over="ignore"):
        total, _ = integrate.quad(lambda x: math.exp(fn(x)), -np.inf, np.inf, limit=500, epsabs=1e-12)
    assert abs(total - 1.0) < 1e-6


def test_prior_draws_heavy_tailed():
    rng = np.random.default_rng(11)
    n = 1_000_000
    tau = np.abs(stats.cauchy.rvs(scale=0.5, size=n, random_state=rng))
    xi = rng.beta(0.5, 0.5, size=n)
    z = rng.normal(size=n)
    g = tau * np.sqrt((1 - xi) / (xi + 1e-5)) * z
    assert stats.kurtosis(g) > 0


@pytest.mark.parametrize("layout", [ParamLayout(3, 5, False), ParamLayout(3, 5, True), ParamLayout(4, 0, True)])
def test_log_prior_gradient(layout, rng):
    cfg = PriorConfig(sigma_fixed=3.0, tpbn_u=0.7, tpbn_a=1.3)
    for _ in range(100):
        theta = rng.normal(scale=1.5, size=layout.size)
        _, g = log_prior_and_grad(theta, layout, cfg)
        fd = central_diff(lambda t: log_prior(t, layout, cfg), theta)
        assert rel_err(g, fd) < 1e-5


def test_tpbn_pullback_matches_fd(rng):
    for _ in range(50):
        z, s = rng.normal(size=6), rng.normal(scale=2, size=6)
        lt = rng.normal()
        w = rng.normal(size=6)
        f = lambda v: float(w @ tpbn_coefficients(v[:6], v[6:12], v[12]))
        x = np.concatenate([z, s, [lt]])
        d_z, d_s, d_lt = tpbn_pullback(w, tpbn_coefficients(z, s, lt), z, s, lt)
        assert rel_err(np.concatenate([d_z, d_s, [d_lt]]), central_diff(f, x)) < 1e-5


def test_layout_and_unpack():
    layout = ParamLayout(3, 2, True)
    assert layout.size == 2 * (3 + 5) + 1
    names = layout.names()
    assert names[0] == "beta[0]" and names[-1] == "log_alpha" and "log_tau_gate" in names
    theta = np.arange(layout.size, dtype=float) * 0.1
    out = unpack(theta, layout)
    assert out["alpha"] == pytest.approx(math.exp(theta[-1]))
    np.testing.assert_allclose(out["beta_gate"], theta[8:11])


def test_prior_config_validation():
    with pytest.raises(ValueError):
        PriorConfig(tau0=0.0)


def test_prior_shape_check():
    with pytest.raises(ValueError):
        log_prior_and_grad(np.zeros(3), ParamLayout(3, 1), CFG)
