"""Prior densities on the unconstrained sampling scale.

Every constrained quantity is sampled through a fixed transform and its log
density carries the change-of-variable Jacobian:

* dispersion ``alpha = exp(log_alpha)`` with a Gamma(shape, rate) prior,
* TPBN auxiliary ``xi = logistic(s)`` with a Beta(u, a) prior,
* global scale ``tau = exp(log_tau)`` with a HalfCauchy(0, tau0) prior,
* unpenalized coefficients and TPBN innovations ``z`` are Gaussian.

Shrinkage coefficients are reconstructed as ``gamma = tau * lambda * z`` with
``lambda**2 = (1 - xi) / (xi + eps)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import betaln, expit, gammaln

from .likelihood import EPS

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorConfig:
    sigma_fixed: float = 100.0
    alpha_shape: float = 1.0
    alpha_rate: float = 10.0
    tpbn_u: float = 0.5
    tpbn_a: float = 0.5
    tau0: float = 0.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"prior hyperparameter {name} must be positive, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


class InvalidStateError(ValueError):
    pass


@dataclass(frozen=True)
class TpbnState:
    xi: np.ndarray
    z: np.ndarray
    tau: float


def shrinkage_scale_sq(xi, eps: float = EPS):
    """Local variance factor ``(1 - xi) / (xi + eps)``."""
    xi = np.asarray(xi, dtype=float)
    return (1.0 - xi) / (xi + eps)


def tpbn_reconstruct(state: TpbnState, eps: float = EPS) -> np.ndarray:
    xi = np.asarray(state.xi, dtype=float)
    if np.any((xi <= 0.0) | (xi >= 1.0)) or not np.all(np.isfinite(xi)):
        raise InvalidStateError("xi must lie strictly inside (0, 1)")
    if not state.tau > 0:
        raise InvalidStateError("tau must be positive")
    return state.tau * np.sqrt(shrinkage_scale_sq(xi, eps)) * np.asarray(state.z, dtype=float)


# ---------------------------------------------------------------------------
# component log densities (value, gradient) on the unconstrained scale
# ---------------------------------------------------------------------------


def normal_logpdf(x, sigma):
    x = np.asarray(x, dtype=float)
    value = -0.5 * LOG_2PI - math.log(sigma) - 0.5 * (x / sigma) ** 2
    return value, -x / sigma**2


def log_alpha_logpdf(log_alpha, shape, rate):
    """Gamma(shape, rate) prior on ``alpha = exp(log_alpha)`` plus Jacobian."""
    alpha = np.exp(log_alpha)
    value = shape * math.log(rate) - gammaln(shape) + shape * log_alpha - rate * alpha
    return value, shape - rate * alpha


def logit_xi_logpdf(s, u, a):
    """Beta(u, a) prior on ``xi = logistic(s)`` plus Jacobian ``xi (1 - xi)``."""
    s = np.asarray(s, dtype=float)
    log_xi = -np.logaddexp(0.0, -s)
    log_1m_xi = log_xi - s
    value = u * log_xi + a * log_1m_xi - betaln(u, a)
    xi = expit(s)
    return value, u * (1.0 - xi) - a * xi


def log_tau_logpdf(log_tau, tau0):
    """HalfCauchy(0, tau0) prior on ``tau = exp(log_tau)`` plus Jacobian."""
    # log1p(r^2) and r^2 / (1 + r^2) with r = tau / tau0, overflow-free
    x = 2.0 * (log_tau - math.log(tau0))
    value = math.log(2.0 / math.pi) - math.log(tau0) - float(np.logaddexp(0.0, x)) + log_tau
    return value, 1.0 - 2.0 * float(expit(x))


# ---------------------------------------------------------------------------
# non-centered TPBN block
# ---------------------------------------------------------------------------


def tpbn_coefficients(z, s, log_tau, eps: float = EPS):
    """Coefficients ``gamma`` from unconstrained ``(z, s, log_tau)``."""
    xi = expit(s)
    one_m_xi = expit(-np.asarray(s, dtype=float))
    lam = np.sqrt(one_m_xi / (xi + eps))
    return math.exp(log_tau) * lam * z


def tpbn_pullback(d_gamma, gamma, z, s, log_tau, eps: float = EPS):
    """Map ``d/d gamma`` back to ``(d/dz, d/ds, d/dlog_tau)``."""
    xi = expit(s)
    one_m_xi = expit(-np.asarray(s, dtype=float))
    lam = np.sqrt(one_m_xi / (xi + eps))
    d_z = d_gamma * math.exp(log_tau) * lam
    dlog_lam_ds = -0.5 * (xi + xi * one_m_xi / (xi + eps))
    d_s = d_gamma * gamma * dlog_lam_ds
    d_log_tau = float(np.dot(d_gamma, gamma))
    return d_z, d_s, d_log_tau


# ---------------------------------------------------------------------------
# full parameter state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Positions of each parameter block inside the flat sampling vector.

    Order: mean block ``[beta, z, s, log_tau]``, then (ZINB2 only) the gate
    block with the same structure, then ``log_alpha``. The ``z, s, log_tau``
    parts exist only when ``n_shrink > 0``.
    """

    n_fixed: int
    n_shrink: int = 0
    zero_inflated: bool = False

    @property
    def block_size(self) -> int:
        return self.n_fixed + (2 * self.n_shrink + 1 if self.n_shrink else 0)

    @property
    def size(self) -> int:
        return self.block_size * (2 if self.zero_inflated else 1) + 1

    def block_slices(self, gate: bool = False) -> dict[str, slice]:
        start = self.block_size if gate else 0
        p, q = self.n_fixed, self.n_shrink
        out = {"beta": slice(start, start + p)}
        if q:
            out["z"] = slice(start + p, start + p + q)
            out["s"] = slice(start + p + q, start + p + 2 * q)
            out["log_tau"] = slice(start + p + 2 * q, start + p + 2 * q + 1)
        return out

    @property
    def log_alpha_index(self) -> int:
        return self.size - 1

    def names(self) -> list[str]:
        labels = [""] * self.size
        for gate in ([False, True] if self.zero_inflated else [False]):
            suffix = "_gate" if gate else ""
            for key, sl in self.block_slices(gate).items():
                for k, i in enumerate(range(sl.start, sl.stop)):
                    labels[i] = f"{key}{suffix}[{k}]" if key != "log_tau" else f"log_tau{suffix}"
        labels[self.log_alpha_index] = "log_alpha"
        return labels


def _block_prior(theta, grad, slices, cfg: PriorConfig):
    value = 0.0
    v, g = normal_logpdf(theta[slices["beta"]], cfg.sigma_fixed)
    value += float(np.sum(v))
    grad[slices["beta"]] += g
    if "z" in slices:
        v, g = normal_logpdf(theta[slices["z"]], 1.0)
        value += float(np.sum(v))
        grad[slices["z"]] += g
        v, g = logit_xi_logpdf(theta[slices["s"]], cfg.tpbn_u, cfg.tpbn_a)
        value += float(np.sum(v))
        grad[slices["s"]] += g
        lt = slices["log_tau"].start
        v, g = log_tau_logpdf(theta[lt], cfg.tau0)
        value += v
        grad[lt] += g
    return value


def log_prior_and_grad(theta, layout: ParamLayout, cfg: PriorConfig):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.size,):
        raise ValueError(f"expected parameter vector of length {layout.size}, got {theta.shape}")
    grad = np.zeros_like(theta)
    value = _block_prior(theta, grad, layout.block_slices(False), cfg)
    if layout.zero_inflated:
        value += _block_prior(theta, grad, layout.block_slices(True), cfg)
    i = layout.log_alpha_index
    v, g = log_alpha_logpdf(theta[i], cfg.alpha_shape, cfg.alpha_rate)
    value += float(v)
    grad[i] += g
    return value, grad


def log_prior(theta, layout: ParamLayout, cfg: PriorConfig) -> float:
    return log_prior_and_grad(theta, layout, cfg)[0]


def unpack(theta, layout: ParamLayout) -> dict[str, np.ndarray]:
    """Constrained parameters from one unconstrained vector or a draw matrix.

    ``theta`` may be ``(size,)`` or ``(n_draws, size)``; outputs keep the
    leading draw axis when present.
    """
    theta = np.asarray(theta, dtype=float)
    out: dict[str, np.ndarray] = {}
    for gate in ([False, True] if layout.zero_inflated else [False]):
        suffix = "_gate" if gate else ""
        sl = layout.block_slices(gate)
        out["beta" + suffix] = theta[..., sl["beta"]]
        if "z" in sl:
            z = theta[..., sl["z"]]
            s = theta[..., sl["s"]]
            log_tau = theta[..., sl["log_tau"]]
            xi = expit(s)
            lam = np.sqrt(expit(-s) / (xi + EPS))
            out["gamma" + suffix] = np.exp(log_tau) * lam * z
            out["tau" + suffix] = np.exp(log_tau[..., 0])
            out["xi" + suffix] = xi
    out["alpha"] = np.exp(theta[..., layout.log_alpha_index])
    return out
