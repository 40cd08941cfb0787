"""Fused numba kernels for the log-posterior hot path.

These compute exactly what :mod:`spillcount.prior` and
:mod:`spillcount.likelihood` compute, in single passes without temporaries.
The numpy versions remain the reference; tests compare the two.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
LOG_2_OVER_PI = math.log(2.0 / math.pi)


@njit(cache=True)
def _log_expit(s):
    if s >= 0.0:
        return -math.log1p(math.exp(-s))
    return s - math.log1p(math.exp(s))


@njit(cache=True)
def _expit(s):
    if s >= 0.0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


@njit(cache=True)
def block_forward(theta, off, p, q, h, sigma, u, a, tau0, lbeta, eps, grad, coef, lam, xi):
    """Prior value of one block (gradient added into ``grad``) and its linear predictor.

    Fills ``coef`` with ``[beta, gamma]`` and ``lam``/``xi`` with the TPBN
    local factors for the backward pass.
    """
    value = 0.0
    log_sigma = math.log(sigma)
    inv_s2 = 1.0 / (sigma * sigma)
    for j in range(p):
        b = theta[off + j]
        value += -0.5 * LOG_2PI - log_sigma - 0.5 * b * b * inv_s2
        grad[off + j] -= b * inv_s2
        coef[j] = b
    if q > 0:
        zo = off + p
        so = zo + q
        lt = theta[so + q]
        tau = math.exp(lt)
        for j in range(q):
            z = theta[zo + j]
            s = theta[so + j]
            value += -0.5 * LOG_2PI - 0.5 * z * z
            grad[zo + j] -= z
            lx = _log_expit(s)
            value += u * lx + a * (lx - s) - lbeta
            x = _expit(s)
            grad[so + j] += u * (1.0 - x) - a * x
            one_m = _expit(-s)
            lj = math.sqrt(one_m / (x + eps))
            xi[j] = x
            lam[j] = lj
            coef[p + j] = tau * lj * z
        x = 2.0 * (lt - math.log(tau0))
        value += LOG_2_OVER_PI - math.log(tau0) + _log_expit(-x) + lt
        grad[so + q] += 1.0 - 2.0 * _expit(x)
    return value, np.dot(h, coef)


@njit(cache=True)
def block_backward(theta, off, p, q, h, d_eta, coef, lam, xi, eps, grad):
    d_coef = np.dot(d_eta, h)
    for j in range(p):
        grad[off + j] += d_coef[j]
    if q > 0:
        zo = off + p
        so = zo + q
        tau = math.exp(theta[so + q])
        d_lt = 0.0
        for j in range(q):
            dg = d_coef[p + j]
            g = coef[p + j]
            x = xi[j]
            grad[zo + j] += dg * tau * lam[j]
            grad[so + j] += dg * g * (-0.5) * (x + x * (1.0 - x) / (x + eps))
            d_lt += dg * g
        grad[so + q] += d_lt


@njit(cache=True)
def nb2_rows(y, eta, kappa, lo, hi):
    """Row part of the NB2 log likelihood (no lgamma terms), ``d/deta`` and ``d/dkappa`` row part."""
    n = y.shape[0]
    d_eta = np.empty(n)
    value = 0.0
    d_kappa = 0.0
    log_k = math.log(kappa)
    for i in range(n):
        e = eta[i]
        inside = e >= lo and e <= hi
        ec = min(max(e, lo), hi)
        mu = math.exp(ec)
        km = kappa + mu
        lkm = math.log(km)
        yi = y[i]
        value += kappa * (log_k - lkm) + yi * (ec - lkm)
        d_eta[i] = kappa * (yi - mu) / km if inside else 0.0
        d_kappa += log_k - lkm + (mu - yi) / km
    return value, d_eta, d_kappa


@njit(cache=True)
def zinb2_rows(y, eta, eta_pi, kappa, lo, hi, eps):
    """Row part of the ZINB2 log likelihood and its partials.

    Positive rows omit ``lgamma(y + kappa) - lgamma(kappa) - lgamma(y + 1)``
    (and the matching digamma terms), which the caller adds in aggregate.
    """
    n = y.shape[0]
    d_eta = np.empty(n)
    d_eta_pi = np.empty(n)
    value = 0.0
    d_kappa = 0.0
    log_k = math.log(kappa)
    for i in range(n):
        e = eta[i]
        inside = e >= lo and e <= hi
        ec = min(max(e, lo), hi)
        mu = math.exp(ec)
        km = kappa + mu
        lkm = math.log(km)
        raw = _expit(eta_pi[i])
        gate_inside = raw >= eps and raw <= 1.0 - eps
        pi = min(max(raw, eps), 1.0 - eps)
        log_1m = math.log1p(-pi)
        yi = y[i]
        if yi == 0.0:
            nb0 = kappa * (log_k - lkm)
            la = math.log(pi)
            lb = log_1m + nb0
            m = max(la, lb)
            lp = m + math.log(math.exp(la - m) + math.exp(lb - m))
            share = math.exp(lb - lp)
            p0 = math.exp(nb0)
            value += lp
            d_eta[i] = share * (-kappa * mu / km) if inside else 0.0
            d_kappa += share * (log_k - lkm + mu / km)
            d_eta_pi[i] = (1.0 - p0) * pi * (1.0 - pi) / (pi + (1.0 - pi) * p0) if gate_inside else 0.0
        else:
            value += log_1m + kappa * (log_k - lkm) + yi * (ec - lkm)
            d_eta[i] = kappa * (yi - mu) / km if inside else 0.0
            d_kappa += log_k - lkm + (mu - yi) / km
            d_eta_pi[i] = -pi if gate_inside else 0.0
    return value, d_eta, d_eta_pi, d_kappa


@njit(cache=True)
def kappa_terms(exceed, kappa):
    """``sum_t [lgamma(y_t + k) - lgamma(k)]`` and its k-derivative for integer counts.

    ``exceed[j]`` is the number of observations with ``y > j``; the sums
    telescope to ``sum_j exceed[j] * log(k + j)`` and ``exceed[j] / (k + j)``.
    """
    v = 0.0
    d = 0.0
    for j in range(exceed.shape[0]):
        w = exceed[j]
        v += w * math.log(kappa + j)
        d += w / (kappa + j)
    return v, d
