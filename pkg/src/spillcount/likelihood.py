"""NB2 and ZINB2 log densities, link functions and analytic gradients.

All array functions broadcast over their inputs so the same code serves
single observations and whole response vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, gammaln

EPS = 1e-5
ETA_MIN = -12.0
ETA_MAX = 10.0


class InvalidParameterError(ValueError):
    """Raised when a count-model parameter is non-finite or out of range."""


@dataclass(frozen=True)
class LinkConfig:
    eta_min: float = ETA_MIN
    eta_max: float = ETA_MAX
    eps: float = EPS

    def __post_init__(self):
        if not self.eta_min < self.eta_max:
            raise ValueError("eta_min must be < eta_max")


DEFAULT_LINK = LinkConfig()


@dataclass(frozen=True)
class Nb2Params:
    """Mean/dispersion pair of an NB2 distribution.

    ``kappa`` is the concentration ``1 / (alpha + eps)``; the ``eps`` offset
    keeps it finite as ``alpha`` approaches zero.
    """

    mu: float
    alpha: float
    eps: float = EPS

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.alpha)):
            raise InvalidParameterError(f"non-finite NB2 parameters mu={self.mu}, alpha={self.alpha}")
        if self.mu <= 0 or self.alpha <= 0:
            raise InvalidParameterError(f"NB2 needs mu > 0 and alpha > 0, got mu={self.mu}, alpha={self.alpha}")

    @property
    def kappa(self) -> float:
        return 1.0 / (self.alpha + self.eps)

    @property
    def variance(self) -> float:
        return self.mu + self.alpha * self.mu**2

    @classmethod
    def from_kappa(cls, mu: float, kappa: float, eps: float = EPS) -> "Nb2Params":
        return cls(mu=mu, alpha=1.0 / kappa - eps, eps=eps)


@dataclass(frozen=True)
class Zinb2Params:
    base: Nb2Params
    pi: float

    def __post_init__(self):
        if not math.isfinite(self.pi):
            raise InvalidParameterError(f"non-finite gate probability {self.pi}")
        if not 0.0 <= self.pi <= 1.0:
            raise InvalidParameterError(f"gate probability outside [0, 1]: {self.pi}")

    @property
    def pi_clipped(self) -> float:
        eps = self.base.eps
        return min(max(self.pi, eps), 1.0 - eps)


def _check_counts(y):
    y = np.asarray(y)
    if np.any(y < 0):
        raise InvalidParameterError("counts must be nonnegative")
    return y


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def nb2_logpmf(y, mu, kappa, lgamma_y1=None):
    """Elementwise NB2 log pmf in the (mu, kappa) parameterization."""
    y = np.asarray(y, dtype=float)
    if lgamma_y1 is None:
        lgamma_y1 = gammaln(y + 1.0)
    log_k_mu = np.log(kappa + mu)
    return (
        gammaln(y + kappa)
        - gammaln(kappa)
        - lgamma_y1
        + kappa * (np.log(kappa) - log_k_mu)
        + y * (np.log(mu) - log_k_mu)
    )


def clip_eta(eta, cfg: LinkConfig = DEFAULT_LINK):
    return np.clip(eta, cfg.eta_min, cfg.eta_max)


def apply_mean_link(eta, cfg: LinkConfig = DEFAULT_LINK):
    """``exp(clamp(eta, eta_min, eta_max))``."""
    out = np.exp(clip_eta(eta, cfg))
    return float(out) if np.ndim(out) == 0 else out


def apply_gate_link(eta_pi, cfg: LinkConfig = DEFAULT_LINK):
    """Inverse logit with the result clipped to ``[eps, 1 - eps]``."""
    out = np.clip(expit(eta_pi), cfg.eps, 1.0 - cfg.eps)
    return float(out) if np.ndim(out) == 0 else out


def _kappa_from_log_alpha(log_alpha, eps):
    alpha = np.exp(log_alpha)
    kappa = 1.0 / (alpha + eps)
    # d kappa / d log_alpha
    dkappa = -alpha * kappa * kappa
    return alpha, kappa, dkappa


def nb2_value_and_grad(y, eta, log_alpha, cfg: LinkConfig = DEFAULT_LINK, lgamma_y1=None):
    """Log pmf and its partials with respect to ``eta`` and ``log_alpha``.

    The mean link is ``mu = exp(clamp(eta))``; the partial in ``eta`` is zero
    wherever the clamp is active.

    Returns
    -------
    logp, d_eta, d_log_alpha : ndarray
        Elementwise arrays broadcast over the inputs.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    eta_c = clip_eta(eta, cfg)
    mu = np.exp(eta_c)
    _, kappa, dkappa = _kappa_from_log_alpha(log_alpha, cfg.eps)
    logp = nb2_logpmf(y, mu, kappa, lgamma_y1)
    k_mu = kappa + mu
    inside = (eta >= cfg.eta_min) & (eta <= cfg.eta_max)
    d_eta = np.where(inside, kappa * (y - mu) / k_mu, 0.0)
    d_kappa = digamma(y + kappa) - digamma(kappa) - np.log1p(mu / kappa) + (mu - y) / k_mu
    return logp, d_eta, d_kappa * dkappa


def zinb2_value_and_grad(y, eta, eta_pi, log_alpha, cfg: LinkConfig = DEFAULT_LINK, lgamma_y1=None):
    """ZINB2 log pmf and partials with respect to ``(eta, eta_pi, log_alpha)``.

    Zeros use ``logsumexp(log pi, log(1 - pi) + log p_NB2(0))``. The gate
    partial is zero where ``pi`` sits on its clip bound.
    """
    y = np.asarray(y, dtype=float)
    eta_pi = np.asarray(eta_pi, dtype=float)
    nb, nb_eta, nb_la = nb2_value_and_grad(y, eta, log_alpha, cfg, lgamma_y1)
    raw_pi = expit(eta_pi)
    pi = np.clip(raw_pi, cfg.eps, 1.0 - cfg.eps)
    gate_inside = (raw_pi >= cfg.eps) & (raw_pi <= 1.0 - cfg.eps)
    log_pi = np.log(pi)
    log_1m_pi = np.log1p(-pi)
    zero = y == 0
    logp = np.where(zero, np.logaddexp(log_pi, log_1m_pi + nb), log_1m_pi + nb)
    # responsibility of the count component for an observed zero
    count_share = np.where(zero, np.exp(log_1m_pi + nb - logp), 1.0)
    d_eta = count_share * nb_eta
    d_log_alpha = count_share * nb_la
    # d logp / d pi, times d pi / d eta_pi = pi (1 - pi)
    p0 = np.exp(nb)
    dpi_zero = (1.0 - p0) / (pi + (1.0 - pi) * p0)
    d_pi = np.where(zero, dpi_zero, -1.0 / (1.0 - pi))
    d_eta_pi = np.where(gate_inside, d_pi * pi * (1.0 - pi), 0.0)
    return logp, d_eta, d_eta_pi, d_log_alpha


# ---------------------------------------------------------------------------
# parameter-object API
# ---------------------------------------------------------------------------


def nb2_log_pmf(y, p: Nb2Params):
    y = _check_counts(y)
    out = nb2_logpmf(y, p.mu, p.kappa)
    return float(out) if np.ndim(out) == 0 else out


def zinb2_log_pmf(y, p: Zinb2Params):
    y = _check_counts(y)
    pi = p.pi_clipped
    nb = nb2_logpmf(y, p.base.mu, p.base.kappa)
    out = np.where(y == 0, np.logaddexp(math.log(pi), math.log1p(-pi) + nb), math.log1p(-pi) + nb)
    return float(out) if np.ndim(out) == 0 else out


def nb2_grad(y, eta, log_alpha, cfg: LinkConfig = DEFAULT_LINK):
    """Partials of the NB2 log pmf in ``(eta, log_alpha)``."""
    _, d_eta, d_la = nb2_value_and_grad(y, eta, log_alpha, cfg)
    if np.ndim(d_eta) == 0:
        return float(d_eta), float(d_la)
    return d_eta, d_la


def zinb2_grad(y, eta, eta_pi, log_alpha, cfg: LinkConfig = DEFAULT_LINK):
    """Partials of the ZINB2 log pmf in ``(eta, eta_pi, log_alpha)``."""
    _, d_eta, d_eta_pi, d_la = zinb2_value_and_grad(y, eta, eta_pi, log_alpha, cfg)
    if np.ndim(d_eta) == 0:
        return float(d_eta), float(d_eta_pi), float(d_la)
    return d_eta, d_eta_pi, d_la


# ---------------------------------------------------------------------------
# random draws
# ---------------------------------------------------------------------------


def sample_nb2(rng: np.random.Generator, mu, kappa, size=None):
    """NB2 draws via the Poisson-Gamma mixture, rate ~ Gamma(kappa, kappa / mu)."""
    mu = np.asarray(mu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    rate = rng.gamma(kappa, mu / kappa, size=size)
    return rng.poisson(rate)


def sample_zinb2(rng: np.random.Generator, mu, kappa, pi, size=None):
    counts = sample_nb2(rng, mu, kappa, size=size)
    structural = rng.random(size=counts.shape) < pi
    return np.where(structural, 0, counts)
