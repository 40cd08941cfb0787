"""Design matrices, joint log posterior and the two-step screen-and-refit fit.

A model is a :class:`ModelSpec` (what columns exist and where they live) plus
posterior draws. The fixed block holds the intercept, autoregressive
``log1p`` lags, any external feature columns and, after screening, the
selected cross-series columns. The shrinkage block holds ``log1p`` lag-1
candidate series under the TPBN prior.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betaln, digamma, gammaln

from . import _kernels

from .likelihood import DEFAULT_LINK, LinkConfig, nb2_value_and_grad, zinb2_value_and_grad
from .panel import CountPanel
from .prior import ParamLayout, PriorConfig, log_alpha_logpdf, log_prior_and_grad, tpbn_coefficients, tpbn_pullback, unpack
from .rng import derive_int, make_rng
from .sampler import Diagnostics, SamplerConfig, SamplerError, sample

log = logging.getLogger(__name__)

NB2 = "NB2"
ZINB2 = "ZINB2"
ZERO_FRACTION_THRESHOLD = 0.65
MAX_TELESCOPE = 100_000

KINDS = ("intercept", "ar-lag", "embedding", "calendar", "cross")


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnMeta:
    kind: str
    source: str | None = None
    lag: int | None = None
    region_id: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DesignError(f"unknown column kind {self.kind!r}")

    @property
    def key(self) -> tuple:
        return (self.kind, self.source, self.lag, self.name)


@dataclass(frozen=True)
class ModelSpec:
    """Column recipe for one target series.

    ``fixed_candidates`` are lag-1 cross-series columns with Gaussian priors,
    ``shrink_candidates`` the ones under TPBN.
    """

    target: str
    lags: tuple[int, ...] = (1, 2)
    shrink_candidates: tuple[str, ...] = ()
    fixed_candidates: tuple[str, ...] = ()
    external_dim: int = 0
    external_kind: str = "embedding"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lags", "shrink_candidates", "fixed_candidates"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            target=d["target"],
            lags=tuple(d["lags"]),
            shrink_candidates=tuple(d["shrink_candidates"]),
            fixed_candidates=tuple(d["fixed_candidates"]),
            external_dim=int(d["external_dim"]),
            external_kind=d["external_kind"],
        )


@dataclass
class DesignMatrices:
    h_fixed: np.ndarray
    h_shrink: np.ndarray
    fixed_meta: list[ColumnMeta]
    shrink_meta: list[ColumnMeta]
    weeks: np.ndarray
    y: np.ndarray

    @property
    def column_meta(self) -> list[ColumnMeta]:
        return self.fixed_meta + self.shrink_meta

    @property
    def n_rows(self) -> int:
        return self.h_fixed.shape[0]


def _series_region(panel: CountPanel, sid: str) -> int | None:
    return panel.series[panel.index(sid)].region_id


def build_design(
    panel: CountPanel,
    target: str,
    lags: Sequence[int] = (1, 2),
    candidates: Sequence[str] = (),
    external: np.ndarray | None = None,
    weeks: Sequence[int] | None = None,
    fixed_candidates: Sequence[str] = (),
    external_kind: str = "embedding",
) -> DesignMatrices:
    """Assemble response and covariate rows for ``target``.

    Row ``t`` uses only counts up to week ``t - 1``. ``external`` must have
    one row per panel week and is read at the response week, so callers
    supply features already computed from information before ``t``.
    ``weeks`` defaults to every week whose lags are defined.
    """
    lags = tuple(int(l) for l in lags)
    if any(l < 1 for l in lags):
        raise DesignError("lags must be >= 1")
    for c in list(candidates) + list(fixed_candidates):
        if c == target:
            raise DesignError(f"candidate {c!r} is the target series itself")
    overlap = set(candidates) & set(fixed_candidates)
    if overlap:
        raise DesignError(f"series {sorted(overlap)} appear in both the fixed and shrinkage blocks")
    max_lag = max(lags, default=0)
    if candidates or fixed_candidates:
        max_lag = max(max_lag, 1)
    if weeks is None:
        weeks = np.arange(max_lag, panel.n_weeks)
    weeks = np.asarray(weeks, dtype=int)
    if weeks.size and (weeks.min() < max_lag or weeks.max() >= panel.n_weeks):
        raise DesignError(f"weeks must lie in [{max_lag}, {panel.n_weeks}) so every lag is defined")
    if external is not None:
        external = np.asarray(external, dtype=float)
        if external.ndim != 2 or external.shape[0] != panel.n_weeks:
            raise DesignError(
                f"external features must be (n_weeks={panel.n_weeks}, k), got {external.shape}"
            )
    y_all = panel.get(target)

    cols = [np.ones(weeks.size)]
    fixed_meta = [ColumnMeta("intercept", name="intercept")]
    for l in lags:
        cols.append(np.log1p(y_all[weeks - l]))
        fixed_meta.append(ColumnMeta("ar-lag", target, l, _series_region(panel, target), f"{target}[t-{l}]"))
    if external is not None:
        for k in range(external.shape[1]):
            cols.append(external[weeks, k])
            fixed_meta.append(ColumnMeta(external_kind, name=f"{external_kind}{k}"))
    for c in fixed_candidates:
        cols.append(np.log1p(panel.get(c)[weeks - 1]))
        fixed_meta.append(ColumnMeta("cross", c, 1, _series_region(panel, c), f"{c}[t-1]"))
    h_fixed = np.column_stack(cols)

    shrink_meta = [ColumnMeta("cross", c, 1, _series_region(panel, c), f"{c}[t-1]") for c in candidates]
    if candidates:
        idx = [panel.index(c) for c in candidates]
        h_shrink = np.log1p(panel.counts[idx][:, weeks - 1].T.astype(float))
    else:
        h_shrink = np.zeros((weeks.size, 0))
    return DesignMatrices(h_fixed, h_shrink, fixed_meta, shrink_meta, weeks, y_all[weeks].astype(np.int64))


def design_for_spec(
    spec: ModelSpec, panel: CountPanel, weeks=None, external: np.ndarray | None = None
) -> DesignMatrices:
    if spec.external_dim and (external is None or external.shape[1] != spec.external_dim):
        raise DesignError(f"model expects {spec.external_dim} external feature columns")
    return build_design(
        panel,
        spec.target,
        spec.lags,
        spec.shrink_candidates,
        external if spec.external_dim else None,
        weeks,
        spec.fixed_candidates,
        spec.external_kind,
    )


def select_family(y) -> str:
    """ZINB2 when at least 65% of the training responses are exact zeros."""
    y = np.asarray(y)
    if y.size == 0:
        raise DesignError("cannot choose a family from an empty training slice")
    # integer comparison keeps the 65% boundary exact
    return ZINB2 if 100 * int(np.sum(y == 0)) >= 65 * y.size else NB2


# ---------------------------------------------------------------------------
# log posterior
# ---------------------------------------------------------------------------


class LogPosterior:
    """Joint log density ``theta -> (value, gradient)`` for one target.

    Holds only arrays and small config objects, so instances pickle cleanly
    for process pools.
    """

    def __init__(
        self,
        h_fixed,
        h_shrink,
        y,
        family: str = NB2,
        priors: PriorConfig = PriorConfig(),
        link: LinkConfig = DEFAULT_LINK,
    ):
        if family not in (NB2, ZINB2):
            raise ValueError(f"unknown family {family!r}")
        self.h_fixed = np.ascontiguousarray(h_fixed, dtype=float)
        self.h_shrink = np.ascontiguousarray(h_shrink, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if not (self.h_fixed.shape[0] == self.h_shrink.shape[0] == self.y.shape[0]):
            raise DesignError("design blocks and response must have the same number of rows")
        self.family = family
        self.priors = priors
        self.link = link
        self.layout = ParamLayout(self.h_fixed.shape[1], self.h_shrink.shape[1], family == ZINB2)
        # counts are integers, so kappa-only terms are summed over distinct values
        yi = np.asarray(y, dtype=np.int64)
        pos = yi > 0
        self._uy, self._ucount = np.unique(yi[pos], return_counts=True)
        self._uy = self._uy.astype(float)
        self._n_pos = int(pos.sum())
        self._sum_lgamma_y1 = float(np.sum(gammaln(self.y + 1.0)))
        # telescoped lgamma/digamma sums are cheaper while counts stay moderate
        y_max = int(yi.max()) if yi.size else 0
        self._exceed = None
        if y_max <= MAX_TELESCOPE:
            self._exceed = (yi.size - np.searchsorted(np.sort(yi), np.arange(y_max), side="right")).astype(float)
        self._h = np.ascontiguousarray(np.hstack([self.h_fixed, self.h_shrink]))
        self._h_t = np.ascontiguousarray(self._h.T)
        self._hf_t = np.ascontiguousarray(self.h_fixed.T)
        self._slices = {g: self.layout.block_slices(g) for g in (False, True)}
        k, q = self.layout.n_fixed + self.layout.n_shrink, self.layout.n_shrink
        self._buffers = {g: (np.zeros(k), np.zeros(q), np.zeros(q)) for g in (False, True)}
        pr = self.priors
        self._prior_args = (pr.sigma_fixed, pr.tpbn_u, pr.tpbn_a, pr.tau0, float(betaln(pr.tpbn_u, pr.tpbn_a)), link.eps)

    @classmethod
    def from_design(cls, design: DesignMatrices, family: str, priors=PriorConfig(), link=DEFAULT_LINK):
        return cls(design.h_fixed, design.h_shrink, design.y, family, priors, link)

    @property
    def dim(self) -> int:
        return self.layout.size

    def _predictor(self, theta, gate):
        """Linear predictor and the full coefficient vector ``[beta, gamma]`` of one block."""
        sl = self._slices[gate]
        beta = theta[sl["beta"]]
        if "z" not in sl:
            return self.h_fixed @ beta, beta
        gamma = tpbn_coefficients(theta[sl["z"]], theta[sl["s"]], theta[sl["log_tau"]][0])
        coef = np.concatenate([beta, gamma])
        return self._h @ coef, coef

    def _pull(self, grad, theta, d_eta, coef, gate):
        sl = self._slices[gate]
        if "z" not in sl:
            grad[sl["beta"]] += self._hf_t @ d_eta
            return
        d_coef = self._h_t @ d_eta
        p = self.layout.n_fixed
        grad[sl["beta"]] += d_coef[:p]
        dz, ds, dlt = tpbn_pullback(
            d_coef[p:], coef[p:], theta[sl["z"]], theta[sl["s"]], theta[sl["log_tau"]][0]
        )
        grad[sl["z"]] += dz
        grad[sl["s"]] += ds
        grad[sl["log_tau"]] += dlt

    def _kappa_terms(self, kappa):
        """Sum over positive counts of ``lgamma(y + k) - lgamma(k)`` and its k-derivative."""
        if self._exceed is not None:
            return _kernels.kappa_terms(self._exceed, kappa)
        v = float(self._ucount @ gammaln(self._uy + kappa)) - self._n_pos * float(gammaln(kappa))
        d = float(self._ucount @ digamma(self._uy + kappa)) - self._n_pos * float(digamma(kappa))
        return v, d

    def _forward(self, theta, grad, gate):
        sl = self._slices[gate]
        off = sl["beta"].start
        coef, lam, xi = self._buffers[gate]
        value, eta = _kernels.block_forward(
            theta, off, self.layout.n_fixed, self.layout.n_shrink, self._h, self._prior_args[0],
            *self._prior_args[1:], grad, coef, lam, xi,
        )
        return value, eta

    def _backward(self, theta, grad, d_eta, gate):
        coef, lam, xi = self._buffers[gate]
        off = self._slices[gate]["beta"].start
        _kernels.block_backward(
            theta, off, self.layout.n_fixed, self.layout.n_shrink, self._h, d_eta, coef, lam, xi,
            self.link.eps, grad,
        )

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        grad = np.zeros(theta.shape[0])
        lo, hi, eps = self.link.eta_min, self.link.eta_max, self.link.eps
        log_alpha = theta[self.layout.log_alpha_index]
        if not -700.0 < log_alpha < 700.0:
            return -math.inf, grad
        alpha = math.exp(log_alpha)
        kappa = 1.0 / (alpha + eps)
        v_la, g_la = log_alpha_logpdf(log_alpha, self.priors.alpha_shape, self.priors.alpha_rate)
        value, eta = self._forward(theta, grad, False)
        gv, gd = self._kappa_terms(kappa)
        if self.family == NB2:
            lp, d_eta, dk = _kernels.nb2_rows(self.y, eta, kappa, lo, hi)
        else:
            v_gate, eta_pi = self._forward(theta, grad, True)
            value += v_gate
            lp, d_eta, d_eta_pi, dk = _kernels.zinb2_rows(self.y, eta, eta_pi, kappa, lo, hi, eps)
            self._backward(theta, grad, d_eta_pi, True)
        self._backward(theta, grad, d_eta, False)
        value += float(v_la) + lp + gv - self._sum_lgamma_y1
        grad[self.layout.log_alpha_index] += g_la + (dk + gd) * (-alpha * kappa * kappa)
        if not math.isfinite(value):
            return -math.inf, grad
        return value, grad

    def reference(self, theta):
        """Same density summed row by row from the likelihood module (slow; for testing)."""
        theta = np.asarray(theta, dtype=float)
        value, grad = log_prior_and_grad(theta, self.layout, self.priors)
        log_alpha = theta[self.layout.log_alpha_index]
        eta, gamma = self._predictor(theta, False)
        if self.family == NB2:
            lp, d_eta, d_la = nb2_value_and_grad(self.y, eta, log_alpha, self.link)
        else:
            eta_pi, gamma_pi = self._predictor(theta, True)
            lp, d_eta, d_eta_pi, d_la = zinb2_value_and_grad(self.y, eta, eta_pi, log_alpha, self.link)
            self._pull(grad, theta, d_eta_pi, gamma_pi, True)
        self._pull(grad, theta, d_eta, gamma, False)
        grad[self.layout.log_alpha_index] += float(np.sum(d_la))
        return value + float(np.sum(lp)), grad

    def initial_point(self, rng: np.random.Generator | None = None, jitter: float = 0.0) -> np.ndarray:
        """Intercept at ``log(mean y)``, dispersion 1, everything else 0, plus optional jitter."""
        theta = np.zeros(self.dim)
        mean_y = float(np.mean(self.y)) if self.y.size else 1.0
        theta[self.layout.block_slices(False)["beta"].start] = np.log(mean_y + 0.1)
        if rng is not None and jitter > 0:
            theta += rng.uniform(-jitter, jitter, size=self.dim)
        return theta


# ---------------------------------------------------------------------------
# fitted models
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSamples:
    draws: np.ndarray  # (chains, samples, dim), unconstrained
    layout: ParamLayout

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    @property
    def names(self) -> list[str]:
        return self.layout.names()

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]

    def constrained(self) -> dict[str, np.ndarray]:
        return unpack(self.flat, self.layout)


@dataclass
class ActiveSet:
    indices: tuple[int, ...] = ()
    source: dict[int, str] = field(default_factory=dict)
    intervals: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.indices = tuple(sorted(int(i) for i in self.indices))

    def __len__(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {
            "indices": list(self.indices),
            "source": {str(k): v for k, v in sorted(self.source.items())},
            "intervals": {k: np.asarray(v).tolist() for k, v in self.intervals.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActiveSet":
        return cls(
            tuple(d["indices"]),
            {int(k): v for k, v in d["source"].items()},
            {k: np.asarray(v, dtype=float) for k, v in d.get("intervals", {}).items()},
        )


@dataclass
class FittedModel:
    spec: ModelSpec
    family: str
    step: int
    samples: PosteriorSamples
    diagnostics: Diagnostics
    fixed_meta: list[ColumnMeta]
    shrink_meta: list[ColumnMeta]
    priors: PriorConfig = PriorConfig()
    sampler: SamplerConfig = SamplerConfig()
    active: ActiveSet | None = None
    active_sources: tuple[str, ...] = ()
    dropped_candidates: tuple[str, ...] = ()
    step1: "FittedModel | None" = None
    n_train: int = 0
    link: LinkConfig = DEFAULT_LINK

    @property
    def column_meta(self) -> list[ColumnMeta]:
        return self.fixed_meta + self.shrink_meta

    def coefficient_draws(self) -> dict[str, np.ndarray]:
        """Constrained draws with an empty ``gamma`` block when there is no shrinkage block."""
        out = self.samples.constrained()
        n = self.samples.n_draws
        for suffix in ("", "_gate") if self.family == ZINB2 else ("",):
            out.setdefault("gamma" + suffix, np.zeros((n, 0)))
        return out

    def predictors(self, h_fixed, h_shrink):
        """Linear predictor draws ``(n_draws, n_rows)`` for the mean and, for ZINB2, the gate."""
        c = self.coefficient_draws()
        eta = c["beta"] @ np.asarray(h_fixed, float).T + c["gamma"] @ np.asarray(h_shrink, float).T
        eta_pi = None
        if self.family == ZINB2:
            eta_pi = c["beta_gate"] @ np.asarray(h_fixed, float).T + c["gamma_gate"] @ np.asarray(h_shrink, float).T
        return eta, eta_pi, c["alpha"]


def fit_design(
    design: DesignMatrices,
    spec: ModelSpec,
    family: str,
    priors: PriorConfig,
    sampler: SamplerConfig,
    step: int,
    link: LinkConfig = DEFAULT_LINK,
) -> FittedModel:
    target = LogPosterior.from_design(design, family, priors, link)
    inits = np.stack(
        [
            target.initial_point(make_rng(sampler.seed, "init", c), jitter=0.1 if sampler.num_chains > 1 else 0.0)
            for c in range(sampler.num_chains)
        ]
    )
    try:
        draws, diag = sample(target, inits, sampler)
    except SamplerError as exc:
        raise SamplerError(f"step {step} fit of {spec.target}: {exc}") from exc
    return FittedModel(
        spec=spec,
        family=family,
        step=step,
        samples=PosteriorSamples(draws, target.layout),
        diagnostics=diag,
        fixed_meta=list(design.fixed_meta),
        shrink_meta=list(design.shrink_meta),
        priors=priors,
        sampler=sampler,
        n_train=design.n_rows,
        link=link,
    )


# ---------------------------------------------------------------------------
# screening and pipelines
# ---------------------------------------------------------------------------


def equal_tailed_interval(draws, level: float = 0.95) -> np.ndarray:
    """Per-column ``(lower, upper)`` empirical quantiles, shape ``(k, 2)``."""
    draws = np.asarray(draws, dtype=float)
    lo, hi = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    if draws.shape[1] == 0:
        return np.zeros((0, 2))
    return np.quantile(draws, [lo, hi], axis=0).T


def _excludes(interval: np.ndarray, delta: float) -> np.ndarray:
    return (interval[:, 0] > delta) | (interval[:, 1] < -delta)


def screen(step1: FittedModel, delta: float = 0.0, level: float = 0.95) -> ActiveSet:
    """Keep shrinkage columns whose credible interval avoids ``[-delta, delta]``.

    For ZINB2 the mean and gate selections are unioned and each index records
    which block selected it.
    """
    if step1.step != 1:
        raise ValueError("screening needs a step-1 fit")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    c = step1.coefficient_draws()
    intervals = {"mean": equal_tailed_interval(c["gamma"], level)}
    if step1.family == ZINB2:
        intervals["gate"] = equal_tailed_interval(c["gamma_gate"], level)
    return screen_intervals(intervals, delta)


def screen_intervals(intervals: dict[str, np.ndarray], delta: float = 0.0) -> ActiveSet:
    mean_on = _excludes(np.asarray(intervals["mean"]), delta)
    gate_on = _excludes(np.asarray(intervals["gate"]), delta) if "gate" in intervals else np.zeros_like(mean_on)
    source = {}
    for j in np.flatnonzero(mean_on | gate_on):
        source[int(j)] = "both" if mean_on[j] and gate_on[j] else ("mean" if mean_on[j] else "gate")
    return ActiveSet(tuple(source), source, intervals)


@dataclass(frozen=True)
class FitConfig:
    pipeline: str = "two-step"
    lags: tuple[int, ...] = (1, 2)
    candidates: tuple[str, ...] | None = None
    delta: float = 0.0
    level: float = 0.95
    family: str | None = None
    start_week: int = 0
    priors: PriorConfig = PriorConfig()
    sampler: SamplerConfig = SamplerConfig()
    external_kind: str = "embedding"

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}")
        if self.family not in (None, NB2, ZINB2):
            raise ValueError(f"family must be NB2, ZINB2 or None, got {self.family!r}")


PIPELINES = ("two-step", "ar2", "full-glm")


def training_weeks(panel: CountPanel, lags: Sequence[int], start_week: int = 0, need_cross: bool = True) -> np.ndarray:
    first = max(max(lags, default=0), 1 if need_cross else 0, start_week)
    weeks = panel.weeks_in("train")
    weeks = weeks[weeks >= first]
    if weeks.size == 0:
        raise DesignError("training window is empty after removing weeks without lags")
    return weeks


def default_candidates(panel: CountPanel, target: str) -> tuple[str, ...]:
    return tuple(s for s in panel.series_ids if s != target)


def _family(cfg: FitConfig, y) -> str:
    return cfg.family or select_family(y)


def fit_ar2(panel, target, cfg: FitConfig, external=None) -> FittedModel:
    weeks = training_weeks(panel, cfg.lags, cfg.start_week)
    spec = ModelSpec(target, tuple(cfg.lags), external_dim=0 if external is None else external.shape[1],
                     external_kind=cfg.external_kind)
    design = design_for_spec(spec, panel, weeks, external)
    return fit_design(design, spec, _family(cfg, design.y), cfg.priors, cfg.sampler, step=2)


def fit_full_glm(panel, target, cfg: FitConfig, external=None) -> FittedModel:
    candidates = cfg.candidates if cfg.candidates is not None else default_candidates(panel, target)
    weeks = training_weeks(panel, cfg.lags, cfg.start_week)
    spec = ModelSpec(target, tuple(cfg.lags), fixed_candidates=tuple(candidates),
                     external_dim=0 if external is None else external.shape[1], external_kind=cfg.external_kind)
    design = design_for_spec(spec, panel, weeks, external)
    return fit_design(design, spec, _family(cfg, design.y), cfg.priors, cfg.sampler, step=2)


def two_step_fit(panel: CountPanel, target: str, cfg: FitConfig = FitConfig(), external=None) -> FittedModel:
    """Screen cross-series candidates under TPBN, then refit the survivors without shrinkage.

    Candidate columns that are identically zero over the training rows are
    dropped before step 1. When nothing survives, step 2 is the fixed block
    alone. Step 2 samples with ``cfg.sampler.seed`` and step 1 with a seed
    derived from it, so a run without candidates matches :func:`fit_ar2`.
    """
    candidates = cfg.candidates if cfg.candidates is not None else default_candidates(panel, target)
    weeks = training_weeks(panel, cfg.lags, cfg.start_week)
    ext_dim = 0 if external is None else external.shape[1]
    spec1 = ModelSpec(target, tuple(cfg.lags), tuple(candidates), external_dim=ext_dim,
                      external_kind=cfg.external_kind)
    design1 = design_for_spec(spec1, panel, weeks, external)
    keep = np.any(design1.h_shrink != 0.0, axis=0)
    dropped = tuple(c for c, k in zip(candidates, keep) if not k)
    if dropped:
        log.info("%s: dropping %d all-zero candidate columns", target, len(dropped))
        spec1 = ModelSpec(target, tuple(cfg.lags), tuple(c for c, k in zip(candidates, keep) if k),
                          external_dim=ext_dim, external_kind=cfg.external_kind)
        design1 = design_for_spec(spec1, panel, weeks, external)
    family = _family(cfg, design1.y)

    step1 = None
    active = ActiveSet()
    if spec1.shrink_candidates:
        s1_sampler = SamplerConfig(**{**asdict(cfg.sampler), "seed": derive_int(cfg.sampler.seed, "step1")})
        step1 = fit_design(design1, spec1, family, cfg.priors, s1_sampler, step=1)
        active = screen(step1, cfg.delta, cfg.level)
    sources = tuple(spec1.shrink_candidates[j] for j in active.indices)
    spec2 = ModelSpec(target, tuple(cfg.lags), fixed_candidates=sources, external_dim=ext_dim,
                      external_kind=cfg.external_kind)
    design2 = design_for_spec(spec2, panel, weeks, external)
    model = fit_design(design2, spec2, family, cfg.priors, cfg.sampler, step=2)
    model.active = active
    model.active_sources = sources
    model.dropped_candidates = dropped
    model.step1 = step1
    return model


def fit_pipeline(panel: CountPanel, target: str, cfg: FitConfig, external=None) -> FittedModel:
    if cfg.pipeline == "ar2":
        return fit_ar2(panel, target, cfg, external)
    if cfg.pipeline == "full-glm":
        return fit_full_glm(panel, target, cfg, external)
    return two_step_fit(panel, target, cfg, external)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

SIDECAR_MAGIC = b"SPCDRAW\x00"
SIDECAR_VERSION = 1


def write_draws(path, draws: np.ndarray, metadata: dict | None = None) -> None:
    """Flat binary draw file.

    Layout (little-endian): 8-byte magic, uint32 version, uint32 ndim,
    ``ndim`` uint64 dims, uint32 metadata length, UTF-8 JSON metadata, then
    the array as row-major float64.
    """
    draws = np.ascontiguousarray(draws, dtype="<f8")
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<II", SIDECAR_VERSION, draws.ndim))
        fh.write(struct.pack(f"<{draws.ndim}Q", *draws.shape))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(draws.tobytes(order="C"))


def read_draws(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != SIDECAR_MAGIC:
            raise ValueError(f"{path}: not a draw file")
        version, ndim = struct.unpack("<II", fh.read(8))
        if version != SIDECAR_VERSION:
            raise ValueError(f"{path}: unsupported draw file version {version}")
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        (n_meta,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n_meta).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: truncated draw data")
    return data.reshape(shape).astype(float), meta


def _summary_table(model: FittedModel) -> list[dict]:
    flat = model.samples.flat
    q = np.quantile(flat, [0.025, 0.5, 0.975], axis=0)
    rows = []
    for i, name in enumerate(model.samples.names):
        rows.append({
            "name": name,
            "mean": float(flat[:, i].mean()),
            "sd": float(flat[:, i].std(ddof=1)) if flat.shape[0] > 1 else 0.0,
            "q2.5": float(q[0, i]),
            "q50": float(q[1, i]),
            "q97.5": float(q[2, i]),
            "ess": float(model.diagnostics.ess[i]),
            "split_rhat": float(model.diagnostics.split_rhat[i]),
        })
    return rows


def _meta_dicts(metas):
    return [asdict(m) for m in metas]


def model_to_dict(model: FittedModel, sidecar: str | None = None) -> dict:
    out = {
        "format": "spillcount-model/1",
        "target": model.spec.target,
        "family": model.family,
        "step": model.step,
        "spec": model.spec.to_dict(),
        "fixed_meta": _meta_dicts(model.fixed_meta),
        "shrink_meta": _meta_dicts(model.shrink_meta),
        "priors": model.priors.to_dict(),
        "sampler": asdict(model.sampler),
        "link": asdict(model.link),
        "seed": model.sampler.seed,
        "n_train": model.n_train,
        "diagnostics": model.diagnostics.summary(),
        "parameters": _summary_table(model),
        "active_set": model.active.to_dict() if model.active is not None else None,
        "active_sources": list(model.active_sources),
        "dropped_candidates": list(model.dropped_candidates),
        "draws_file": sidecar,
    }
    if model.step1 is not None:
        out["step1"] = {
            "family": model.step1.family,
            "diagnostics": model.step1.diagnostics.summary(),
            "shrink_meta": _meta_dicts(model.step1.shrink_meta),
        }
    return out


def save_model(model: FittedModel, path, header: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>`` (JSON) and ``<path stem>.draws`` (binary sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecar = path.with_suffix(".draws")
    payload = model_to_dict(model, sidecar.name)
    if header:
        payload["run"] = dict(header)
    write_draws(sidecar, model.samples.draws, {"names": model.samples.names, **(header or {})})
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, allow_nan=True)
    return path, sidecar


def load_model(path) -> FittedModel:
    path = Path(path)
    with open(path) as fh:
        d = json.load(fh)
    draws, _ = read_draws(path.parent / d["draws_file"])
    spec = ModelSpec.from_dict(d["spec"])
    fixed_meta = [ColumnMeta(**m) for m in d["fixed_meta"]]
    shrink_meta = [ColumnMeta(**m) for m in d["shrink_meta"]]
    layout = ParamLayout(len(fixed_meta), len(shrink_meta), d["family"] == ZINB2)
    table = d["parameters"]
    diag_sum = d["diagnostics"]
    diag = Diagnostics(
        ess=np.array([r["ess"] for r in table]),
        split_rhat=np.array([r["split_rhat"] for r in table]),
        divergences=diag_sum["divergences"],
        mean_accept=diag_sum["mean_accept"],
        step_size=diag_sum["step_size"],
        max_depth_hits=diag_sum["max_depth_hits"],
        mean_tree_depth=diag_sum["mean_tree_depth"],
        n_draws=draws.shape[0] * draws.shape[1],
    )
    return FittedModel(
        spec=spec,
        family=d["family"],
        step=d["step"],
        samples=PosteriorSamples(draws, layout),
        diagnostics=diag,
        fixed_meta=fixed_meta,
        shrink_meta=shrink_meta,
        priors=PriorConfig(**d["priors"]),
        sampler=SamplerConfig(**d["sampler"]),
        active=ActiveSet.from_dict(d["active_set"]) if d["active_set"] else None,
        active_sources=tuple(d["active_sources"]),
        dropped_candidates=tuple(d["dropped_candidates"]),
        n_train=d["n_train"],
        link=LinkConfig(**d["link"]),
    )
