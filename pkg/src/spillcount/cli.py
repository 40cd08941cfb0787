"""Command-line entry point.

    spillcount simulate  --config run.yaml
    spillcount aggregate --config run.yaml
    spillcount fit       --config run.yaml
    spillcount forecast  --config run.yaml
    spillcount score     --config run.yaml
    spillcount direction --config run.yaml

All outputs go under the configured output root:

    panel/                 panel.csv, panel_manifest.json
    truth.json             (simulate)
    aggregate_report.json  (aggregate)
    models/<target>.json   + <target>.draws, fit_report.json
    forecasts/<target>.model.draws, <target>.oracle.draws
    reports/<target>.<source>.csv, metrics.json
    direction/<target>_*   bearing field, rose, omega/R draws, active CIs
    run_log.jsonl          one line per invocation (the only timestamped file)

Seeds: every target gets ``derive_int(seed, "series", target)``; the sampler
derives its chain streams from that and the predictive draws use
``(series seed, "predictive", target, week)``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .directional import (
    BearingSummary,
    bearing_field_geojson,
    posterior_bearing_summary,
    rose_bins,
    write_geojson,
    write_omega_r_csv,
    write_rose_csv,
)
from .glm import (
    ZERO_FRACTION_THRESHOLD,
    ZINB2,
    DesignError,
    FitConfig,
    FittedModel,
    default_candidates,
    equal_tailed_interval,
    fit_pipeline,
    load_model,
    read_draws,
    save_model,
    select_family,
    write_draws,
)
from .panel import (
    CountPanel,
    PanelError,
    RegionGrid,
    aggregate,
    read_event_records,
    read_panel,
    split_by_count,
    split_panel,
    write_panel,
)
from .predictive import (
    ForecastError,
    PredictiveDraws,
    forecast,
    score,
    summarize_reports,
    write_forecast_csv,
)
from .rng import RNG_ALGORITHM, derive_int
from .sampler import SamplerError
from .simdgp import DENSE, SPARSE, DgpConfig, candidates_for, generate, oracle_predictive, read_truth, write_truth

log = logging.getLogger("spillcount")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SAMPLER = 4
EXIT_IO = 5

COMMANDS = ("simulate", "aggregate", "fit", "forecast", "score", "direction")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class Run:
    """Resolved paths and provenance header for one invocation."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.root = cfg.output_root()
        self.header = {
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "command": command,
            "spillcount": __version__,
            "rng": RNG_ALGORITHM,
        }

    @property
    def header_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in sorted(self.header.items())]

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, payload: dict, *parts) -> Path:
        p = self.path(*parts)
        with open(p, "w") as fh:
            json.dump({"run": self.header, **payload}, fh, indent=1, sort_keys=True)
        return p


def series_seed(root_seed: int, target: str) -> int:
    return derive_int(root_seed, "series", target)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_panel(run: Run) -> CountPanel:
    directory = run.root / "panel"
    try:
        return read_panel(directory)
    except FileNotFoundError as exc:
        raise CliError(f"panel not found in {directory}; run simulate or aggregate first", EXIT_DATA) from exc
    except PanelError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc


def _is_simulated(panel: CountPanel) -> bool:
    return panel.attrs.get("source") == "simulation"


def _targets(cfg: RunConfig, panel: CountPanel) -> list[str]:
    targets = cfg.model.targets
    if targets is None:
        if _is_simulated(panel):
            return [DENSE, SPARSE]
        raise CliError("model.targets must be set for panels built from event records", EXIT_CONFIG)
    unknown = [t for t in targets if t not in panel.series_ids]
    if unknown:
        raise CliError(f"targets not in panel: {unknown}", EXIT_DATA)
    return list(targets)


def _candidates(cfg: RunConfig, panel: CountPanel, target: str) -> tuple[str, ...]:
    if cfg.model.candidates is not None:
        return tuple(c for c in cfg.model.candidates if c != target)
    if _is_simulated(panel):
        return candidates_for(target)
    return default_candidates(panel, target)


def _external(cfg: RunConfig, panel: CountPanel, target: str):
    path = cfg.model.external.get(target)
    if path is None:
        return None
    try:
        if path.endswith(".npy"):
            x = np.load(path)
        else:
            x = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except OSError as exc:
        raise CliError(f"cannot read external features {path}: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from exc
    if x.ndim != 2 or x.shape[0] != panel.n_weeks:
        raise CliError(f"{path}: external features must have one row per panel week ({panel.n_weeks})", EXIT_DATA)
    return x


def _fit_config(cfg: RunConfig, panel: CountPanel, target: str, seed: int) -> FitConfig:
    start = cfg.model.start_week
    if start is None:
        start = int(panel.attrs.get("burn_in", 0))
    return FitConfig(
        pipeline=cfg.model.pipeline,
        lags=tuple(cfg.model.lags),
        candidates=_candidates(cfg, panel, target),
        delta=cfg.model.delta,
        level=cfg.model.level,
        family=cfg.model.families.get(target, cfg.model.family),
        start_week=start,
        priors=cfg.model.priors.build(),
        sampler=cfg.sampler.build(seed),
        external_kind=cfg.model.external_kind,
    )


def _model_path(run: Run, target: str) -> Path:
    return run.root / "models" / f"{target}.json"


def _load_model(run: Run, target: str) -> FittedModel:
    p = _model_path(run, target)
    if not p.exists():
        raise CliError(f"no fitted model for {target!r} at {p}; run fit first", EXIT_DATA)
    try:
        return load_model(p)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"{p}: cannot load model: {exc}", EXIT_IO) from exc


def _eval_weeks(cfg: RunConfig, panel: CountPanel) -> np.ndarray:
    weeks = panel.weeks_in(cfg.predictive.split)
    if weeks.size == 0:
        raise CliError(f"the {cfg.predictive.split} split is empty; nothing to forecast", EXIT_DATA)
    return weeks


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(run: Run) -> dict:
    s = run.cfg.simulate
    try:
        dgp = DgpConfig(t_total=s.t_total, t_train=s.t_train, noise_lambda=s.noise_lambda,
                        alpha_true=s.alpha_true, seed=run.cfg.seed, burn_in=s.burn_in)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    sim = generate(dgp)
    panel = sim.to_panel()
    write_panel(panel, run.root / "panel", run.header)
    sim.truth["run"] = run.header
    write_truth(run.path("truth.json"), sim)
    weeks = sim.train_weeks()
    y = sim.sparse[weeks]
    zf = float(np.mean(y == 0))
    family = select_family(y)
    if family != ZINB2:
        log.warning(
            "sparse target has %.3f zeros on the training window (below %.2f): automatic family "
            "selection picks %s; set model.families.sparse to ZINB2 to fit the generating family",
            zf, ZERO_FRACTION_THRESHOLD, family,
        )
    return {
        "n_series": panel.n_series,
        "n_weeks": panel.n_weeks,
        "sparse_train_zero_fraction": zf,
        "sparse_auto_family": family,
    }


def cmd_aggregate(run: Run) -> dict:
    p = run.cfg.panel
    if p.events is None:
        raise CliError("panel.events must name an event-record file", EXIT_CONFIG)
    try:
        records, rejected = read_event_records(
            p.events, p.column_map or None, p.delimiter, None if p.has_header else p.fieldnames
        )
    except FileNotFoundError as exc:
        raise CliError(f"event file not found: {p.events}", EXIT_IO) from exc
    except PanelError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if not p.has_header and not p.fieldnames:
        raise CliError("panel.fieldnames is required when panel.has_header is false", EXIT_CONFIG)
    try:
        grid = RegionGrid.from_centroids(p.lat_centroids, p.lon_centroids, p.lat_step, p.lon_step)
        panel, report = aggregate(records, grid, p.actors, p.codes, p.origin, p.n_weeks)
        if p.train_end is not None:
            panel = split_panel(panel, p.train_end, p.val_weeks)
    except (PanelError, ValueError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    report.n_input += len(rejected)
    report.rejected = rejected
    write_panel(panel, run.root / "panel", run.header)
    run.write_json(report.to_dict(), "aggregate_report.json")
    return {"n_series": panel.n_series, "n_weeks": panel.n_weeks, **report.to_dict()}


def _fit_one(args) -> dict:
    cfg_dict, target, root = args
    cfg = RunConfig.model_validate(cfg_dict)
    run = Run(cfg, "fit")
    run.root = Path(root)
    panel = _load_panel(run)
    seed = series_seed(cfg.seed, target)
    fcfg = _fit_config(cfg, panel, target, seed)
    try:
        model = fit_pipeline(panel, target, fcfg, _external(cfg, panel, target))
    except DesignError as exc:
        raise CliError(f"{target}: {exc}", EXIT_DATA) from exc
    except SamplerError as exc:
        raise CliError(f"{target}: {exc}", EXIT_SAMPLER) from exc
    header = {**run.header, "series_seed": seed}
    save_model(model, _model_path(run, target), header)
    entry = {
        "family": model.family,
        "pipeline": fcfg.pipeline,
        "series_seed": seed,
        "n_train": model.n_train,
        "active_indices": list(model.active.indices) if model.active else [],
        "active_sources": list(model.active_sources),
        "dropped_candidates": list(model.dropped_candidates),
        "diagnostics": model.diagnostics.summary(),
    }
    if model.step1 is not None:
        entry["step1_diagnostics"] = model.step1.diagnostics.summary()
    return entry


def _fan_out(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


def cmd_fit(run: Run) -> dict:
    panel = _load_panel(run)
    targets = _targets(run.cfg, panel)
    workers = run.cfg.workers or os.cpu_count() or 1
    jobs = [(run.cfg.model_dump(mode="json"), t, str(run.root)) for t in targets]
    results = dict(zip(targets, _fan_out(_fit_one, jobs, workers)))
    bound = run.cfg.sampler.max_divergence_rate
    bad = {}
    for t, r in results.items():
        rates = [r["diagnostics"]["divergence_rate"]]
        if "step1_diagnostics" in r:
            rates.append(r["step1_diagnostics"]["divergence_rate"])
        if max(rates) > bound:
            bad[t] = max(rates)
    run.write_json({"targets": results, "max_divergence_rate": bound, "failed": bad}, "models", "fit_report.json")
    if bad:
        raise CliError(
            "divergence rate above bound "
            + ", ".join(f"{t}: {v:.4f} > {bound}" for t, v in bad.items())
            + "; see models/fit_report.json",
            EXIT_SAMPLER,
        )
    return {t: {"family": r["family"], "active_sources": r["active_sources"]} for t, r in results.items()}


def _refit_forecast(run: Run, panel: CountPanel, target: str, weeks: np.ndarray, seed: int) -> PredictiveDraws:
    """Forecast in blocks of ``refit_every`` weeks, refitting on all weeks before each block."""
    step = run.cfg.predictive.refit_every
    parts = []
    ext = _external(run.cfg, panel, target)
    for start in range(0, weeks.size, step):
        block = weeks[start:start + step]
        sub = split_by_count(panel, int(block[0]), 0)
        fcfg = _fit_config(run.cfg, panel, target, derive_int(seed, "refit", int(block[0])))
        try:
            model = fit_pipeline(sub, target, fcfg, ext)
        except SamplerError as exc:
            raise CliError(f"{target}: {exc}", EXIT_SAMPLER) from exc
        parts.append(forecast(model, panel, block, seed, ext))
    return PredictiveDraws(np.hstack([p.draws for p in parts]), weeks, target)


def cmd_forecast(run: Run) -> dict:
    cfg = run.cfg
    panel = _load_panel(run)
    targets = _targets(cfg, panel)
    weeks = _eval_weeks(cfg, panel)
    sim = None
    if cfg.predictive.oracle:
        if not _is_simulated(panel):
            raise CliError("oracle forecasts need a simulated panel", EXIT_CONFIG)
        try:
            truth = read_truth(run.root / "truth.json")
        except FileNotFoundError as exc:
            raise CliError("truth.json not found; run simulate first", EXIT_DATA) from exc
        sim = generate(DgpConfig.from_dict(truth["config"]))
        if not np.array_equal(sim.to_panel().counts, panel.counts):
            raise CliError("simulated panel does not match truth.json", EXIT_DATA)
    out = {}
    for target in targets:
        seed = series_seed(cfg.seed, target)
        meta = {**run.header, "series": target, "series_seed": seed, "weeks": weeks.tolist()}
        written = []
        have_model = _model_path(run, target).exists()
        if have_model or sim is None:
            try:
                if cfg.predictive.refit_every:
                    pred = _refit_forecast(run, panel, target, weeks, seed)
                else:
                    model = _load_model(run, target)
                    pred = forecast(model, panel, weeks, seed, _external(cfg, panel, target))
            except ForecastError as exc:
                raise CliError(f"{target}: {exc}", EXIT_DATA) from exc
            write_draws(run.path("forecasts", f"{target}.model.draws"), pred.draws, {**meta, "source": "model"})
            written.append("model")
        if sim is not None:
            pred = oracle_predictive(sim, target, weeks, cfg.predictive.n_oracle_draws, seed)
            write_draws(run.path("forecasts", f"{target}.oracle.draws"), pred.draws, {**meta, "source": "oracle"})
            written.append("oracle")
        out[target] = written
    return out


def cmd_score(run: Run) -> dict:
    cfg = run.cfg
    panel = _load_panel(run)
    targets = _targets(cfg, panel)
    q = cfg.predictive.q
    metrics = {}
    week_start = panel.week_start
    for target in targets:
        metrics[target] = {}
        for source in ("model", "oracle"):
            p = run.root / "forecasts" / f"{target}.{source}.draws"
            if not p.exists():
                continue
            try:
                draws, meta = read_draws(p)
            except (OSError, ValueError) as exc:
                raise CliError(f"{p}: {exc}", EXIT_IO) from exc
            weeks = np.asarray(meta["weeks"], dtype=int)
            if weeks.size == 0:
                raise CliError(f"{p}: empty evaluation window", EXIT_DATA)
            pred = PredictiveDraws(draws.astype(np.int64), weeks, target)
            reports = score(pred, panel.get(target)[weeks], q)
            write_forecast_csv(
                run.path("reports", f"{target}.{source}.csv"), target, reports, q,
                run.header_lines + [f"source={source}", f"series_seed={meta.get('series_seed')}"],
                lambda t: week_start[t].isoformat(),
            )
            metrics[target][source] = summarize_reports(reports, q)
        if not metrics[target]:
            raise CliError(f"no forecasts for {target!r}; run forecast first", EXIT_DATA)
    run.write_json({"metrics": metrics}, "reports", "metrics.json")
    return metrics


def _cross_columns(model: FittedModel) -> list[int]:
    return [i for i, m in enumerate(model.fixed_meta) if m.kind == "cross"]


def _active_ci_rows(model: FittedModel, level: float, bearings: dict) -> list[list]:
    c = model.coefficient_draws()
    cols = _cross_columns(model)
    rows = []
    blocks = [("mean", c["beta"])]
    if "beta_gate" in c:
        blocks.append(("gate", c["beta_gate"]))
    step1 = model.active.intervals if model.active else {}
    for k, (j, src) in enumerate(zip(model.active.indices if model.active else (), model.active_sources)):
        col = cols[k]
        for block, draws in blocks:
            lo, hi = equal_tailed_interval(draws[:, [col]], level)[0]
            s1 = step1.get(block)
            s1lo, s1hi = (s1[j] if s1 is not None and len(s1) > j else (math.nan, math.nan))
            b = bearings.get(src)
            rows.append([
                src, block, j, model.active.source.get(j, ""),
                repr(float(s1lo)), repr(float(s1hi)),
                repr(float(draws[:, col].mean())), repr(float(lo)), repr(float(hi)),
                int(lo > 0 or hi < 0),
                "" if b is None else repr(math.degrees(b[0])),
                "" if b is None else repr(b[1] / 1000.0),
            ])
    return rows


def cmd_direction(run: Run) -> dict:
    cfg = run.cfg
    panel = _load_panel(run)
    targets = _targets(cfg, panel)
    out = {}
    d = cfg.directional
    for target in targets:
        model = _load_model(run, target)
        meta = panel.series[panel.index(target)]
        cols = _cross_columns(model)
        sources = [panel.series[panel.index(s)].centroid for s in model.active_sources]
        notice = None
        if meta.centroid is None:
            notice = f"target {target} has no geographic centroid; directional export is empty"
            summary = None
        elif not any(s is not None for s in sources):
            notice = f"no geographic sources in the active set of {target}; directional export is empty"
            summary = None
        else:
            coef = model.coefficient_draws()["beta"][:, cols]
            summary = posterior_bearing_summary(coef, sources, meta.centroid, list(model.active_sources), d.level)
            if summary.empty:
                notice = f"every active source of {target} is co-located with it; directional export is empty"
        lines = run.header_lines + [f"target={target}", f"n_sectors={d.n_sectors}", f"level={d.level}"]
        if notice:
            lines.append(f"notice={notice}")
            log.warning(notice)
        edges = summary.edges if summary is not None else []
        props = {**run.header, "target": target, "n_sectors": d.n_sectors}
        if notice:
            props["notice"] = notice
        if summary is not None and not summary.empty:
            props["omega_mean_deg"] = math.degrees(summary.circular_mean) % 360.0
            props["omega_ci_deg"] = [math.degrees(a) % 360.0 for a in summary.circular_ci]
            props["r_mean"] = float(np.mean(summary.r_draws))
            props["excluded"] = summary.excluded
        write_geojson(run.path("direction", f"{target}_bearing_field.geojson"), bearing_field_geojson(edges, props))
        rose = rose_bins([e.bearing for e in edges], [e.weight for e in edges], d.n_sectors,
                         None if not edges else np.linspace(0.0, max(e.weight for e in edges) or 1.0,
                                                            d.magnitude_bins + 1))
        write_rose_csv(run.path("direction", f"{target}_rose.csv"), rose, lines)
        if summary is None:
            summary = BearingSummary(np.empty(0), np.empty(0), math.nan, (math.nan, math.nan))
        write_omega_r_csv(run.path("direction", f"{target}_omega_r.csv"), summary, lines)
        bearings = {e.label: (e.bearing, e.distance) for e in edges}
        with open(run.path("direction", f"{target}_active_ci.csv"), "w", newline="") as fh:
            for line in lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["source", "block", "candidate_index", "selected_by", "step1_lower", "step1_upper",
                        "step2_mean", "step2_lower", "step2_upper", "excludes_zero", "bearing_deg", "distance_km"])
            w.writerows(_active_ci_rows(model, d.level, bearings))
        out[target] = {"n_edges": len(edges), "notice": notice}
    return out


HANDLERS = {
    "simulate": cmd_simulate,
    "aggregate": cmd_aggregate,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "score": cmd_score,
    "direction": cmd_direction,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key] = yaml.safe_load(value)
    return out


def _append_run_log(run: Run, status: str, code: int, elapsed: float, result=None, error=None) -> None:
    try:
        run.root.mkdir(parents=True, exist_ok=True)
        entry = {
            "time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "elapsed_s": round(elapsed, 3),
            "status": status,
            "exit_code": code,
            **run.header,
        }
        if result is not None:
            entry["result"] = result
        if error is not None:
            entry["error"] = error
        with open(run.root / "run_log.jsonl", "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True, default=str) + "\n")
    except OSError:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spillcount", description="Sparse cross-series count forecasting.")
    parser.add_argument("--version", action="version", version=f"spillcount {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="YAML or JSON run config (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. sampler.num_samples=500")
        p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _parse_set(args.set))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, args.command)
    t0 = time.perf_counter()
    try:
        result = HANDLERS[args.command](run)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _append_run_log(run, "error", exc.code, time.perf_counter() - t0, error=str(exc))
        return exc.code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        _append_run_log(run, "error", EXIT_IO, time.perf_counter() - t0, error=str(exc))
        return EXIT_IO
    _append_run_log(run, "ok", EXIT_OK, time.perf_counter() - t0, result=result)
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
