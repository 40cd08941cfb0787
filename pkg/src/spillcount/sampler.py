"""No-U-Turn sampler with multinomial trajectory sampling.

The target is any callable ``logdensity(theta) -> (logp, grad)`` on R^d.
Warmup adapts the step size by dual averaging and a diagonal inverse mass
matrix over doubling windows; both are frozen once sampling starts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diagnostics import effective_sample_size, split_rhat
from .rng import chain_rng

log = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], tuple[float, np.ndarray]]

MAX_DELTA_H = 1000.0


class SamplerError(RuntimeError):
    pass


class InitializationError(SamplerError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    num_warmup: int = 1000
    num_samples: int = 6000
    num_chains: int = 1
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_warmup < 1 or self.num_samples < 1 or self.num_chains < 1:
            raise ValueError("num_warmup, num_samples and num_chains must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass
class Diagnostics:
    ess: np.ndarray
    split_rhat: np.ndarray
    divergences: int
    mean_accept: float
    step_size: list[float] = field(default_factory=list)
    max_depth_hits: int = 0
    mean_tree_depth: float = 0.0
    n_draws: int = 0

    def summary(self) -> dict:
        ess = np.asarray(self.ess, dtype=float)
        rhat = np.asarray(self.split_rhat, dtype=float)
        return {
            "min_ess": float(np.min(ess)) if ess.size else None,
            "max_split_rhat": float(np.max(rhat)) if rhat.size else None,
            "divergences": int(self.divergences),
            "divergence_rate": self.divergences / self.n_draws if self.n_draws else 0.0,
            "mean_accept": float(self.mean_accept),
            "step_size": [float(s) for s in self.step_size],
            "max_depth_hits": int(self.max_depth_hits),
            "mean_tree_depth": float(self.mean_tree_depth),
        }


# ---------------------------------------------------------------------------
# integrator
# ---------------------------------------------------------------------------


def leapfrog(logdensity: LogDensity, theta, p, grad, eps, inv_mass):
    """One leapfrog step; returns ``(theta, p, logp, grad)``."""
    p_half = p + 0.5 * eps * grad
    theta_new = theta + eps * inv_mass * p_half
    logp_new, grad_new = logdensity(theta_new)
    p_new = p_half + 0.5 * eps * grad_new
    return theta_new, p_new, logp_new, grad_new


def kinetic_energy(p, inv_mass) -> float:
    return 0.5 * float(np.dot(p * inv_mass, p))


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


@dataclass
class _Tree:
    theta_minus: np.ndarray
    p_minus: np.ndarray
    grad_minus: np.ndarray
    theta_plus: np.ndarray
    p_plus: np.ndarray
    grad_plus: np.ndarray
    theta_prop: np.ndarray
    logp_prop: float
    grad_prop: np.ndarray
    log_weight: float
    rho: np.ndarray
    turning: bool
    divergent: bool
    accept_sum: float
    n_leapfrog: int


def _no_turn(p_sharp_minus, p_sharp_plus, rho) -> bool:
    return float(np.dot(p_sharp_minus, rho)) > 0 and float(np.dot(p_sharp_plus, rho)) > 0


class _Trajectory:
    def __init__(self, logdensity, eps, inv_mass, h0, rng):
        self.logdensity = logdensity
        self.eps = eps
        self.inv_mass = inv_mass
        self.h0 = h0
        self.rng = rng

    def leaf(self, theta, p, grad, direction) -> _Tree:
        theta, p, logp, grad = leapfrog(
            self.logdensity, theta, p, grad, direction * self.eps, self.inv_mass
        )
        h = -logp + kinetic_energy(p, self.inv_mass)
        if not math.isfinite(h):
            h = math.inf
        delta = h - self.h0
        divergent = delta > MAX_DELTA_H
        accept = min(1.0, math.exp(-delta)) if math.isfinite(delta) else 0.0
        return _Tree(
            theta, p, grad, theta, p, grad,
            theta, logp, grad,
            -delta if math.isfinite(delta) else -math.inf,
            p.copy(), divergent, divergent, accept, 1,
        )

    def build(self, theta, p, grad, direction, depth) -> _Tree:
        if depth == 0:
            return self.leaf(theta, p, grad, direction)
        inner = self.build(theta, p, grad, direction, depth - 1)
        if inner.turning:
            return inner
        if direction > 0:
            outer = self.build(inner.theta_plus, inner.p_plus, inner.grad_plus, direction, depth - 1)
        else:
            outer = self.build(inner.theta_minus, inner.p_minus, inner.grad_minus, direction, depth - 1)
        accept_sum = inner.accept_sum + outer.accept_sum
        n_leapfrog = inner.n_leapfrog + outer.n_leapfrog
        if outer.turning:
            inner.turning = True
            inner.divergent = inner.divergent or outer.divergent
            inner.accept_sum = accept_sum
            inner.n_leapfrog = n_leapfrog
            return inner
        log_weight = np.logaddexp(inner.log_weight, outer.log_weight)
        # uniform progressive sampling inside a subtree
        if math.log(self.rng.random()) < outer.log_weight - log_weight:
            prop = (outer.theta_prop, outer.logp_prop, outer.grad_prop)
        else:
            prop = (inner.theta_prop, inner.logp_prop, inner.grad_prop)
        left, right = (inner, outer) if direction > 0 else (outer, inner)
        merged = _merge(left, right, self.inv_mass)
        merged.theta_prop, merged.logp_prop, merged.grad_prop = prop
        merged.log_weight = float(log_weight)
        merged.accept_sum = accept_sum
        merged.n_leapfrog = n_leapfrog
        return merged


def _merge(left: _Tree, right: _Tree, inv_mass) -> _Tree:
    """Join two adjacent subtrees (``left`` earlier in time) and test for a U-turn."""
    rho = left.rho + right.rho
    ps_lm = inv_mass * left.p_minus
    ps_rp = inv_mass * right.p_plus
    turning = not _no_turn(ps_lm, ps_rp, rho)
    if not turning:
        # extra checks across the subtree boundary
        ps_rm = inv_mass * right.p_minus
        ps_lp = inv_mass * left.p_plus
        turning = not _no_turn(ps_lm, ps_rm, left.rho + right.p_minus)
        turning = turning or not _no_turn(ps_lp, ps_rp, right.rho + left.p_plus)
    return _Tree(
        left.theta_minus, left.p_minus, left.grad_minus,
        right.theta_plus, right.p_plus, right.grad_plus,
        left.theta_prop, left.logp_prop, left.grad_prop,
        0.0, rho, turning, left.divergent or right.divergent,
        0.0, 0,
    )


@dataclass
class _Transition:
    theta: np.ndarray
    logp: float
    grad: np.ndarray
    accept_stat: float
    depth: int
    n_leapfrog: int
    divergent: bool


def nuts_transition(logdensity, theta, logp, grad, eps, inv_mass, max_depth, rng) -> _Transition:
    """One NUTS iteration from ``theta`` with multinomial proposal selection."""
    p0 = rng.standard_normal(theta.shape[0]) / np.sqrt(inv_mass)
    h0 = -logp + kinetic_energy(p0, inv_mass)
    traj = _Trajectory(logdensity, eps, inv_mass, h0, rng)
    tree = _Tree(theta, p0, grad, theta, p0, grad, theta, logp, grad, 0.0, p0.copy(), False, False, 0.0, 0)
    accept_sum = 0.0
    n_leapfrog = 0
    divergent = False
    depth = 0
    while depth < max_depth:
        direction = 1 if rng.random() < 0.5 else -1
        if direction > 0:
            sub = traj.build(tree.theta_plus, tree.p_plus, tree.grad_plus, 1, depth)
        else:
            sub = traj.build(tree.theta_minus, tree.p_minus, tree.grad_minus, -1, depth)
        accept_sum += sub.accept_sum
        n_leapfrog += sub.n_leapfrog
        depth += 1
        if sub.turning:
            divergent = sub.divergent
            break
        # biased progressive sampling toward the new subtree
        if math.log(rng.random()) < sub.log_weight - tree.log_weight:
            new_prop = (sub.theta_prop, sub.logp_prop, sub.grad_prop)
        else:
            new_prop = (tree.theta_prop, tree.logp_prop, tree.grad_prop)
        log_weight = float(np.logaddexp(tree.log_weight, sub.log_weight))
        left, right = (tree, sub) if direction > 0 else (sub, tree)
        tree = _merge(left, right, inv_mass)
        tree.theta_prop, tree.logp_prop, tree.grad_prop = new_prop
        tree.log_weight = log_weight
        if tree.turning:
            break
    return _Transition(
        tree.theta_prop, tree.logp_prop, tree.grad_prop,
        accept_sum / max(n_leapfrog, 1), depth, n_leapfrog, divergent,
    )


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


class DualAveraging:
    """Step-size adaptation toward a target mean acceptance statistic."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.h_bar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_stat) -> float:
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        mk = m ** (-self.kappa)
        self.log_eps_bar = mk * self.log_eps + (1.0 - mk) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.log_eps_bar)


def warmup_windows(num_warmup, init_buffer=75, term_buffer=50, base_window=25):
    """``(start, end)`` iteration ranges of the mass-matrix adaptation windows.

    Follows the usual fast/slow/fast schedule: an initial buffer, doubling
    slow windows, and a terminal buffer with no mass updates.
    """
    if num_warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > num_warmup:
        init_buffer = int(0.15 * num_warmup)
        term_buffer = int(0.1 * num_warmup)
        base_window = num_warmup - init_buffer - term_buffer
    windows = []
    start = init_buffer
    size = base_window
    slow_end = num_warmup - term_buffer
    while start < slow_end:
        end = start + size
        # absorb a final window that would be too short to double
        if end + 2 * size > slow_end:
            end = slow_end
        windows.append((start, end))
        start = end
        size *= 2
    return windows


def find_reasonable_step_size(logdensity, theta, logp, grad, inv_mass, rng, eps=1.0):
    """Double or halve ``eps`` until one-step acceptance crosses 1/2."""
    p = rng.standard_normal(theta.shape[0]) / np.sqrt(inv_mass)
    h0 = -logp + kinetic_energy(p, inv_mass)

    def log_accept(e):
        _, p_new, logp_new, _ = leapfrog(logdensity, theta, p, grad, e, inv_mass)
        h = -logp_new + kinetic_energy(p_new, inv_mass)
        return h0 - h if math.isfinite(h) else -math.inf

    la = log_accept(eps)
    direction = 1.0 if la > math.log(0.5) else -1.0
    for _ in range(100):
        if direction > 0 and not la > math.log(0.5):
            break
        if direction < 0 and not la < math.log(0.5):
            break
        eps = eps * 2.0**direction
        if eps < 1e-10 or eps > 1e7:
            break
        la = log_accept(eps)
    return eps


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class ChainResult:
    draws: np.ndarray
    accept: np.ndarray
    divergent: np.ndarray
    depth: np.ndarray
    step_size: float
    inv_mass: np.ndarray


def run_chain(logdensity: LogDensity, init, cfg: SamplerConfig, chain: int) -> ChainResult:
    rng = chain_rng(cfg.seed, chain)
    theta = np.array(init, dtype=float)
    logp, grad = logdensity(theta)
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        raise InitializationError(f"chain {chain}: non-finite log density or gradient at the initial point")
    dim = theta.shape[0]
    inv_mass = np.ones(dim)
    eps = find_reasonable_step_size(logdensity, theta, logp, grad, inv_mass, rng)
    adapt = DualAveraging(eps, cfg.target_accept)
    windows = warmup_windows(cfg.num_warmup)
    window_draws: list[np.ndarray] = []

    for it in range(cfg.num_warmup):
        tr = nuts_transition(logdensity, theta, logp, grad, eps, inv_mass, cfg.max_tree_depth, rng)
        theta, logp, grad = tr.theta, tr.logp, tr.grad
        eps = adapt.update(tr.accept_stat)
        if windows and windows[0][0] <= it < windows[0][1]:
            window_draws.append(theta)
            if it + 1 == windows[0][1]:
                samples = np.asarray(window_draws)
                n = samples.shape[0]
                var = samples.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
                inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                window_draws = []
                windows = windows[1:]
                eps = find_reasonable_step_size(logdensity, theta, logp, grad, inv_mass, rng, eps)
                adapt.restart(eps)
    eps = adapt.final_step_size

    draws = np.empty((cfg.num_samples, dim))
    accept = np.empty(cfg.num_samples)
    divergent = np.zeros(cfg.num_samples, dtype=bool)
    depth = np.empty(cfg.num_samples, dtype=int)
    for it in range(cfg.num_samples):
        tr = nuts_transition(logdensity, theta, logp, grad, eps, inv_mass, cfg.max_tree_depth, rng)
        theta, logp, grad = tr.theta, tr.logp, tr.grad
        draws[it] = theta
        accept[it] = tr.accept_stat
        divergent[it] = tr.divergent
        depth[it] = tr.depth
    return ChainResult(draws, accept, divergent, depth, eps, inv_mass)


def sample(logdensity: LogDensity, init, cfg: SamplerConfig):
    """Run ``cfg.num_chains`` NUTS chains.

    Parameters
    ----------
    logdensity : callable
        ``theta -> (log density, gradient)``.
    init : array_like
        ``(dim,)`` shared start or ``(num_chains, dim)`` per-chain starts.
    cfg : SamplerConfig

    Returns
    -------
    draws : ndarray, shape (num_chains, num_samples, dim)
        Post-warmup draws only.
    diagnostics : Diagnostics
    """
    init = np.asarray(init, dtype=float)
    if init.ndim == 1:
        init = np.tile(init, (cfg.num_chains, 1))
    if init.shape[0] != cfg.num_chains:
        raise ValueError("init must provide one start per chain")
    results = [run_chain(logdensity, init[c], cfg, c) for c in range(cfg.num_chains)]
    draws = np.stack([r.draws for r in results])
    return draws, summarize(draws, results, cfg)


def summarize(draws, results: list[ChainResult], cfg: SamplerConfig) -> Diagnostics:
    divergences = int(sum(r.divergent.sum() for r in results))
    n_draws = draws.shape[0] * draws.shape[1]
    if draws.shape[1] >= 4:
        ess = effective_sample_size(draws)
        rhat = split_rhat(draws)
    else:
        ess = np.full(draws.shape[2], np.nan)
        rhat = np.full(draws.shape[2], np.nan)
    depths = np.concatenate([r.depth for r in results])
    if divergences:
        log.warning("%d divergent transitions after warmup", divergences)
    return Diagnostics(
        ess=np.atleast_1d(ess),
        split_rhat=np.atleast_1d(rhat),
        divergences=divergences,
        mean_accept=float(np.mean(np.concatenate([r.accept for r in results]))),
        step_size=[r.step_size for r in results],
        max_depth_hits=int(np.sum(depths >= cfg.max_tree_depth)),
        mean_tree_depth=float(depths.mean()),
        n_draws=n_draws,
    )
