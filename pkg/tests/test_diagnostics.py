import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spillcount.diagnostics import effective_sample_size, split_rhat


def ar1(rng, rho, n, chains=1):
    x = np.empty((chains, n))
    x[:, 0] = rng.normal(size=chains) / np.sqrt(1 - rho**2)
    eps = rng.normal(size=(chains, n))
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + eps[:, t]
    return x


def test_rhat_identical_constant_chains():
    assert split_rhat(np.full((4, 100), 2.5)) == 1.0


def test_rhat_disagreeing_chains():
    x = np.concatenate([np.zeros((1, 100)), np.ones((1, 100))]) + np.random.default_rng(0).normal(0, 0.1, (2, 100))
    assert split_rhat(x) > 1.5


def test_rhat_iid(rng):
    vals = [split_rhat(rng.normal(size=(4, 1000))) for _ in range(20)]
    assert all(1.0 - 5e-3 <= v <= 1.02 for v in vals)
    assert np.median(vals) >= 1.0 - 1e-3


def test_rhat_vectorized(rng):
    x = rng.normal(size=(4, 500, 3))
    out = split_rhat(x)
    assert out.shape == (3,)
    assert out[1] == pytest.approx(split_rhat(x[:, :, 1]))


def test_ess_iid(rng):
    n = 4000
    ess = [effective_sample_size(rng.normal(size=(1, n)), cap=False) for _ in range(10)]
    assert abs(np.mean(ess) / n - 1.0) < 0.15


def test_ess_ar1(rng):
    rho, n = 0.9, 20000
    expected = n * (1 - rho) / (1 + rho)
    ess = effective_sample_size(ar1(rng, rho, n))
    assert abs(ess / expected - 1.0) < 0.25


def test_ess_constant_chain():
    assert effective_sample_size(np.ones((2, 50))) == 0.0


def test_ess_multichain_shape(rng):
    assert effective_sample_size(rng.normal(size=(4, 300, 5))).shape == (5,)


def test_too_few_draws():
    with pytest.raises(ValueError):
        split_rhat(np.ones(3))
    with pytest.raises(ValueError):
        effective_sample_size(np.ones((2, 3)))


@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(8, 200))
@settings(max_examples=50, deadline=None)
def test_ess_capped_by_draws(seed, chains, n):
    x = np.random.default_rng(seed).normal(size=(chains, n))
    ess = effective_sample_size(x)
    assert 0.0 <= ess <= chains * n


@given(st.integers(0, 2**31), st.floats(-100, 100), st.floats(0.01, 100))
@settings(max_examples=50, deadline=None)
def test_rhat_affine_invariant(seed, shift, scale):
    x = np.random.default_rng(seed).normal(size=(3, 64))
    assert split_rhat(shift + scale * x) == pytest.approx(split_rhat(x), rel=1e-9)
