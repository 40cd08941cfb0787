"""Posterior-predictive simulation, right-tail anomaly scores and forecast metrics.

Quantile convention: the empirical ``q``-quantile of ``S`` draws is the
order statistic at 1-based position ``ceil(q * S)``, with ``q * S`` computed
exactly from the decimal value of ``q``. With that convention

    observed > upper_quantile(draws, q)  <=>  #{draws >= observed} <= S - ceil(q * S)

which is what :func:`flag_from_tail_score` checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .glm import ZINB2, DesignError, FittedModel, design_for_spec
from .likelihood import sample_nb2, sample_zinb2
from .panel import CountPanel
from .rng import make_rng

DEFAULT_Q = 0.975


class ForecastError(ValueError):
    pass


@dataclass
class PredictiveDraws:
    draws: np.ndarray  # (S, H) nonnegative integers
    weeks: np.ndarray  # (H,) week indices
    series: str

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=np.int64)
        self.weeks = np.asarray(self.weeks, dtype=int)
        if self.draws.ndim != 2 or self.draws.shape[1] != self.weeks.shape[0]:
            raise ValueError("draws must be (S, H) with one column per week")
        if np.any(self.draws < 0):
            raise ValueError("predictive counts must be nonnegative")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


def _exact(q: float) -> Fraction:
    return Fraction(repr(float(q)))


def quantile_rank(q: float, n: int) -> int:
    """1-based order-statistic position ``ceil(q * n)``, at least 1."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if n < 1:
        raise ValueError("need at least one draw")
    return max(1, math.ceil(_exact(q) * n))


def upper_quantile(draws, q: float = DEFAULT_Q):
    """Empirical ``q``-quantile as an order statistic; vectorized over columns of a 2-D array."""
    draws = np.asarray(draws)
    s = draws.shape[0]
    k = quantile_rank(q, s)
    return np.sort(draws, axis=0)[k - 1]


def tail_score(draws, observed):
    """Posterior-predictive right-tail probability ``#{draws >= observed} / S``."""
    draws = np.asarray(draws)
    if draws.shape[0] < 1:
        raise ValueError("need at least one draw")
    return np.mean(draws >= np.asarray(observed), axis=0)


def flag_from_tail_score(score, n_draws: int, q: float = DEFAULT_Q):
    """Quantile flag recovered from the tail score: ``S * score <= S - ceil(q S)``."""
    k = quantile_rank(q, n_draws)
    count = np.rint(np.asarray(score) * n_draws)
    return count <= n_draws - k


def tail_calibration(flags: Sequence[bool], q: float = DEFAULT_Q) -> float:
    """``|(1 - q) - exceedance fraction|`` computed in exact arithmetic."""
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        raise ValueError("tail calibration needs at least one held-out week")
    rate = Fraction(int(flags.sum()), int(flags.size))
    return float(abs((1 - _exact(q)) - rate))


def mae_metrics(observed, medians) -> tuple[float, float]:
    """Mean absolute error on counts and on ``log10(1 + y)``."""
    y = np.asarray(observed, dtype=float)
    m = np.asarray(medians, dtype=float)
    if y.shape != m.shape:
        raise ValueError("observed and medians must have equal length")
    if y.size == 0:
        raise ValueError("empty evaluation window")
    return float(np.mean(np.abs(y - m))), float(np.mean(np.abs(np.log10(1.0 + y) - np.log10(1.0 + m))))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate_from_predictors(eta, eta_pi, alpha, link, rng_for_week, weeks, series) -> PredictiveDraws:
    """One count per posterior draw per week from linear-predictor draws ``(S, H)``."""
    kappa = 1.0 / (np.asarray(alpha, dtype=float) + link.eps)
    mu = np.exp(np.clip(eta, link.eta_min, link.eta_max))
    if eta_pi is not None:
        pi = np.clip(expit(eta_pi), link.eps, 1.0 - link.eps)
    out = np.empty(mu.shape, dtype=np.int64)
    for h, week in enumerate(weeks):
        rng = rng_for_week(int(week))
        if eta_pi is None:
            out[:, h] = sample_nb2(rng, mu[:, h], kappa)
        else:
            out[:, h] = sample_zinb2(rng, mu[:, h], kappa, pi[:, h])
    return PredictiveDraws(out, np.asarray(weeks), series)


def simulate_predictive(model: FittedModel, h_fixed, h_shrink, weeks, seed: int) -> PredictiveDraws:
    """Predictive draws for covariate rows ``h_fixed``/``h_shrink`` (one per forecast week).

    Each week gets its own stream ``(seed, "predictive", series, week)``.
    """
    h_fixed = np.asarray(h_fixed, dtype=float)
    h_shrink = np.asarray(h_shrink, dtype=float)
    weeks = np.asarray(weeks, dtype=int)
    if h_fixed.shape[0] != weeks.shape[0] or h_shrink.shape[0] != weeks.shape[0]:
        raise ForecastError("one covariate row is needed per forecast week")
    if h_fixed.shape[1] != len(model.fixed_meta) or h_shrink.shape[1] != len(model.shrink_meta):
        raise ForecastError("covariate rows do not match the model's columns")
    eta, eta_pi, alpha = model.predictors(h_fixed, h_shrink)
    series = model.spec.target
    return simulate_from_predictors(
        eta, eta_pi if model.family == ZINB2 else None, alpha, model.link,
        lambda w: make_rng(seed, "predictive", series, w), weeks, series,
    )


def forecast(model: FittedModel, panel: CountPanel, weeks, seed: int, external=None) -> PredictiveDraws:
    """Rolling one-step-ahead draws for ``weeks``; row ``t`` uses counts through ``t - 1``."""
    weeks = np.asarray(weeks, dtype=int)
    if weeks.size == 0:
        raise ForecastError("no forecast weeks")
    if weeks.max() >= panel.n_weeks:
        raise ForecastError(
            f"week {int(weeks.max())} is beyond the panel ({panel.n_weeks} weeks); covariates are unavailable"
        )
    try:
        design = design_for_spec(model.spec, panel, weeks, external)
    except DesignError as exc:
        raise ForecastError(str(exc)) from exc
    return simulate_predictive(model, design.h_fixed, design.h_shrink, weeks, seed)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnomalyReport:
    week: int
    observed: int
    median: float
    lower95: int
    upper95: int
    upper_q: int
    flag: bool
    tail_score: float


def score(pred: PredictiveDraws, observed, q: float = DEFAULT_Q) -> list[AnomalyReport]:
    observed = np.asarray(observed, dtype=np.int64)
    if observed.shape != pred.weeks.shape:
        raise ForecastError("need one observation per forecast week")
    d = pred.draws
    upper = upper_quantile(d, q)
    lo95 = upper_quantile(d, 0.025)
    hi95 = upper_quantile(d, 0.975)
    med = np.median(d, axis=0)
    tails = tail_score(d, observed)
    return [
        AnomalyReport(int(w), int(y), float(m), int(a), int(b), int(u), bool(y > u), float(t))
        for w, y, m, a, b, u, t in zip(pred.weeks, observed, med, lo95, hi95, upper, tails)
    ]


def summarize_reports(reports: Sequence[AnomalyReport], q: float = DEFAULT_Q) -> dict:
    if not reports:
        raise ForecastError("empty evaluation window")
    obs = [r.observed for r in reports]
    med = [r.median for r in reports]
    mae_raw, mae_log = mae_metrics(obs, med)
    flags = [r.flag for r in reports]
    return {
        "n_weeks": len(reports),
        "mae_raw": mae_raw,
        "mae_log": mae_log,
        "exceedances": int(sum(flags)),
        "q": q,
        "tail_calibration": tail_calibration(flags, q),
    }


def _q_label(q: float) -> str:
    return "upper_q" + repr(float(q)).replace("0.", "", 1).replace(".", "")


def write_forecast_csv(path, series: str, reports: Sequence[AnomalyReport], q: float = DEFAULT_Q,
                       header_lines: Sequence[str] = (), week_start=None) -> Path:
    """Per-week forecast/anomaly rows.

    ``week_start`` optionally maps a week index to its start date string.
    """
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["series_id", "week", "week_start", "observed", "median", "lower95", "upper95",
                    _q_label(q), "flag", "tail_score"])
        for r in reports:
            w.writerow([series, r.week, week_start(r.week) if week_start else "", r.observed,
                        repr(r.median), r.lower95, r.upper95, r.upper_q, int(r.flag), repr(r.tail_score)])
    return path
