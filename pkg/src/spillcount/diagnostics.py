"""Convergence diagnostics: split R-hat and autocorrelation-based ESS."""

from __future__ import annotations

import numpy as np


def _as_chains(draws) -> np.ndarray:
    """Coerce draws to shape ``(chains, samples, params)``."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        return x[None, :, None]
    if x.ndim == 2:
        return x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"draws must be 1-, 2- or 3-dimensional, got shape {x.shape}")
    return x


def _squeeze(values: np.ndarray, ndim: int):
    if ndim < 3:
        return float(values[0])
    return values


def split_rhat(draws):
    """Split-chain potential scale reduction factor.

    Parameters
    ----------
    draws : array_like
        ``(samples,)``, ``(chains, samples)`` or ``(chains, samples, params)``.

    Returns
    -------
    float or ndarray
        One value per parameter. Where both within- and between-chain
        variance vanish (all chains constant at the same value) the result is
        1.0; where chains are individually constant but disagree it is
        ``inf``.
    """
    ndim = np.ndim(draws)
    x = _as_chains(draws)
    m, n, _ = x.shape
    if m * n < 4:
        raise ValueError("split R-hat needs at least 4 draws in total")
    half = n // 2
    if n % 2:
        x = x[:, 1:, :]
    splits = np.concatenate([x[:, :half, :], x[:, half:, :]], axis=0)
    n_split = splits.shape[1]
    chain_means = splits.mean(axis=1)
    chain_vars = splits.var(axis=1, ddof=1)
    w = chain_vars.mean(axis=0)
    b = n_split * chain_means.var(axis=0, ddof=1)
    var_plus = (n_split - 1) / n_split * w + b / n_split
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / w)
    rhat = np.where(w > 0, rhat, np.where(b > 0, np.inf, 1.0))
    return _squeeze(rhat, ndim)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance along axis 1 via FFT, for ``(chains, samples)``."""
    n = x.shape[1]
    size = 1 << (2 * n - 1).bit_length()
    centered = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conjugate(f), n=size, axis=1)[:, :n]
    return acov / n


def _ess_one(x: np.ndarray) -> float:
    m, n = x.shape
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    if m > 1:
        b_over_n = x.mean(axis=1).var(ddof=1)
    else:
        b_over_n = 0.0
    var_plus = w * (n - 1.0) / n + b_over_n
    if not var_plus > 0:
        return 0.0
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer's initial positive sequence over paired autocorrelations,
    # followed by the initial monotone sequence.
    pair_sums = []
    t = 0
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p <= 0:
            break
        pair_sums.append(p)
        t += 2
    if not pair_sums:
        return float(m * n)
    pairs = np.minimum.accumulate(np.asarray(pair_sums))
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n)) if m * n > 1 else tau
    return float(m * n / tau)


def effective_sample_size(draws, cap: bool = True):
    """Multi-chain effective sample size (Geyer initial positive sequence).

    Parameters
    ----------
    draws : array_like
        ``(samples,)``, ``(chains, samples)`` or ``(chains, samples, params)``.
    cap : bool
        Clip the estimate at the total number of draws. Anticorrelated NUTS
        chains can otherwise report ESS above the draw count.

    Returns
    -------
    float or ndarray
        Constant chains have ESS 0.
    """
    ndim = np.ndim(draws)
    x = _as_chains(draws)
    m, n, k = x.shape
    if n < 4:
        raise ValueError("ESS needs at least 4 draws per chain")
    out = np.array([_ess_one(x[:, :, j]) for j in range(k)])
    if cap:
        out = np.minimum(out, m * n)
    return _squeeze(out, ndim)
