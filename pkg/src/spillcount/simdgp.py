"""Simulation generator with a known sparse set of cross-series drivers.

One NB2 dense target, one ZINB2 sparse target and 98 Poisson noise series.
Each target's candidate list is the other target's lag-1 followed by the
noise series in order, so the true drivers are candidate indices 0..4.
Both targets start from zero history; downstream windows skip the first
``burn_in`` weeks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
from scipy.special import expit

from .panel import CountPanel, SeriesMeta, split_by_count
from .rng import RNG_ALGORITHM, make_rng

DENSE = "dense"
SPARSE = "sparse"
N_NOISE = 98
ACTIVE = (0, 1, 2, 3, 4)


def noise_id(j: int) -> str:
    """Id of noise series ``j`` (1-based)."""
    return f"noise{j:03d}"


NOISE_IDS = tuple(noise_id(j) for j in range(1, N_NOISE + 1))


def candidates_for(target: str) -> tuple[str, ...]:
    other = SPARSE if target == DENSE else DENSE
    return (other,) + NOISE_IDS


@dataclass(frozen=True)
class DgpConfig:
    t_total: int = 1000
    t_train: int = 950
    noise_lambda: float = 1.5
    alpha_true: float = 0.5
    eta_clip: tuple[float, float] = (-15.0, 15.0)
    pi_clip: tuple[float, float] = (1e-6, 1.0 - 1e-6)
    seed: int = 0
    burn_in: int = 10
    beta_dense: tuple[float, ...] = (0.5, 0.2, 0.1)
    gamma_dense: tuple[float, ...] = (0.4, 0.6, -0.5, 0.5, -0.6)
    beta_sparse: tuple[float, ...] = (0.2, 0.1, 0.05)
    gamma_sparse: tuple[float, ...] = (0.5, -0.6, 0.4, -0.5, 0.6)
    beta_gate: tuple[float, ...] = (-1.0, 0.2, 0.1)
    gamma_gate: tuple[float, ...] = (0.6, 0.7, -0.5, 0.6, -0.7)
    origin: str = "2000-01-03"

    def __post_init__(self):
        if not 0 < self.t_train < self.t_total:
            raise ValueError(f"need 0 < t_train < t_total, got {self.t_train} and {self.t_total}")
        if not 0 <= self.burn_in < self.t_train:
            raise ValueError("burn_in must lie in [0, t_train)")
        if self.noise_lambda <= 0 or self.alpha_true <= 0:
            raise ValueError("noise_lambda and alpha_true must be positive")
        for name in ("beta_dense", "beta_sparse", "beta_gate"):
            if len(getattr(self, name)) != 3:
                raise ValueError(f"{name} needs 3 entries (intercept, lag 1, lag 2)")
        for name in ("gamma_dense", "gamma_sparse", "gamma_gate"):
            if len(getattr(self, name)) != len(ACTIVE):
                raise ValueError(f"{name} needs {len(ACTIVE)} entries")
        lo, hi = self.eta_clip
        plo, phi = self.pi_clip
        if not (lo < hi and 0 < plo < phi < 1):
            raise ValueError("invalid clip bounds")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SimPanel:
    dense: np.ndarray
    sparse: np.ndarray
    noise: np.ndarray
    cfg: DgpConfig
    truth: dict = field(default_factory=dict)

    @property
    def t_total(self) -> int:
        return self.dense.shape[0]

    def series(self, sid: str) -> np.ndarray:
        if sid == DENSE:
            return self.dense
        if sid == SPARSE:
            return self.sparse
        return self.noise[NOISE_IDS.index(sid)]

    def to_panel(self) -> CountPanel:
        ids = (DENSE, SPARSE) + NOISE_IDS
        counts = np.vstack([self.dense, self.sparse, self.noise])
        meta = [SeriesMeta(s, actor="SIM", code=s) for s in ids]
        panel = CountPanel(
            counts,
            date.fromisoformat(self.cfg.origin),
            meta,
            np.full(self.t_total, "train"),
            {"source": "simulation", "burn_in": self.cfg.burn_in, "rng": RNG_ALGORITHM},
        )
        return split_by_count(panel, self.cfg.t_train, 0)

    def train_weeks(self) -> np.ndarray:
        return np.arange(self.cfg.burn_in, self.cfg.t_train)

    def test_weeks(self) -> np.ndarray:
        return np.arange(self.cfg.t_train, self.t_total)


def _lag(x: np.ndarray, t: int, k: int) -> float:
    return float(x[t - k]) if t - k >= 0 else 0.0


def true_predictors(panel_like, cfg: DgpConfig, target: str, t: int):
    """True ``(log mean, gate logit or None)`` at week ``t`` from observed history.

    ``panel_like`` is anything with ``series(id)`` returning the count
    vector. Linear predictors are clipped to ``cfg.eta_clip``.
    """
    y = panel_like.series(target)
    x = np.log1p([_lag(panel_like.series(c), t, 1) for c in candidates_for(target)[: len(ACTIVE)]])
    ar = np.array([1.0, np.log1p(_lag(y, t, 1)), np.log1p(_lag(y, t, 2))])
    lo, hi = cfg.eta_clip
    if target == DENSE:
        return float(np.clip(ar @ cfg.beta_dense + x @ cfg.gamma_dense, lo, hi)), None
    eta = float(np.clip(ar @ cfg.beta_sparse + x @ cfg.gamma_sparse, lo, hi))
    eta_pi = float(np.clip(ar @ cfg.beta_gate + x @ cfg.gamma_gate, lo, hi))
    return eta, eta_pi


def gate_probability(eta_pi: float, cfg: DgpConfig) -> float:
    lo, hi = cfg.pi_clip
    return float(np.clip(expit(eta_pi), lo, hi))


class _Partial:
    def __init__(self, dense, sparse, noise):
        self.dense, self.sparse, self.noise = dense, sparse, noise

    def series(self, sid):
        if sid == DENSE:
            return self.dense
        if sid == SPARSE:
            return self.sparse
        return self.noise[NOISE_IDS.index(sid)]


def generate(cfg: DgpConfig = DgpConfig()) -> SimPanel:
    """Simulate the panel; identical configs give identical panels."""
    rng = make_rng(cfg.seed, "simdgp")
    T = cfg.t_total
    kappa = 1.0 / cfg.alpha_true
    noise = rng.poisson(cfg.noise_lambda, size=(N_NOISE, T)).astype(np.int64)
    dense = np.zeros(T, dtype=np.int64)
    sparse = np.zeros(T, dtype=np.int64)
    mu_d = np.empty(T)
    mu_s = np.empty(T)
    pi_s = np.empty(T)
    hist = _Partial(dense, sparse, noise)
    for t in range(T):
        eta_d, _ = true_predictors(hist, cfg, DENSE, t)
        eta_s, eta_pi = true_predictors(hist, cfg, SPARSE, t)
        mu_d[t] = np.exp(eta_d)
        mu_s[t] = np.exp(eta_s)
        pi_s[t] = gate_probability(eta_pi, cfg)
        dense[t] = rng.poisson(rng.gamma(kappa, mu_d[t] / kappa))
        count = rng.poisson(rng.gamma(kappa, mu_s[t] / kappa))
        sparse[t] = 0 if rng.random() < pi_s[t] else count
    truth = {
        "config": cfg.to_dict(),
        "rng": RNG_ALGORITHM,
        "active_indices": list(ACTIVE),
        "candidates": {DENSE: list(candidates_for(DENSE)), SPARSE: list(candidates_for(SPARSE))},
        "initial_history": "targets start at 0 for t < 0; cross-series lags at t = 0 are 0",
        "burn_in_note": "first burn_in weeks excluded from training and evaluation windows",
        "mu_dense": mu_d.tolist(),
        "mu_sparse": mu_s.tolist(),
        "pi_sparse": pi_s.tolist(),
    }
    return SimPanel(dense, sparse, noise, cfg, truth)


def train_zero_fraction(sim: SimPanel, target: str = SPARSE) -> float:
    return float(np.mean(sim.series(target)[sim.train_weeks()] == 0))


def write_truth(path, sim: SimPanel) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(sim.truth, fh, indent=1, sort_keys=True)
    return path


def read_truth(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def true_coefficients(cfg: DgpConfig, target: str) -> dict[str, np.ndarray]:
    """True coefficients laid out over the full 99-candidate list."""
    n = len(candidates_for(target))
    def spread(g):
        out = np.zeros(n)
        out[list(ACTIVE)] = g
        return out
    if target == DENSE:
        return {"beta": np.array(cfg.beta_dense), "gamma": spread(cfg.gamma_dense)}
    return {
        "beta": np.array(cfg.beta_sparse),
        "gamma": spread(cfg.gamma_sparse),
        "beta_gate": np.array(cfg.beta_gate),
        "gamma_gate": spread(cfg.gamma_gate),
    }


def oracle_predictive(sim: SimPanel, target: str, weeks, n_draws: int = 6000, seed: int = 0):
    """Predictive draws under the generating parameters, one stream per (target, week).

    Uses the observed history for the lags, exactly as a fitted model would,
    but no estimated quantity.
    """
    from .predictive import PredictiveDraws

    cfg = sim.cfg
    weeks = np.asarray(weeks, dtype=int)
    if weeks.size and (weeks.min() < 0 or weeks.max() >= sim.t_total):
        raise ValueError("oracle weeks must lie inside the simulated range")
    kappa = 1.0 / cfg.alpha_true
    out = np.empty((n_draws, weeks.size), dtype=np.int64)
    for h, t in enumerate(weeks):
        rng = make_rng(seed, "oracle", target, int(t))
        eta, eta_pi = true_predictors(sim, cfg, target, int(t))
        counts = rng.poisson(rng.gamma(kappa, np.exp(eta) / kappa, size=n_draws))
        if eta_pi is not None:
            counts = np.where(rng.random(n_draws) < gate_probability(eta_pi, cfg), 0, counts)
        out[:, h] = counts
    return PredictiveDraws(out, weeks, target)
