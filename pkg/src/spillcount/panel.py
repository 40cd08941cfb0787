"""Event-record ingestion and weekly spatiotemporal count panels.

A panel holds one nonnegative weekly count series per
``(region, actor, event code)`` combination. Series are ordered region-major,
then actor, then code. Weeks are contiguous 7-day bins anchored on a
configurable Monday.
"""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .directional import GeoPoint

log = logging.getLogger(__name__)

DEFAULT_ACTORS = ("USA", "RUS", "UKR", "ISR", "PSE", "TUR", "DEU")
DEFAULT_CODES = ("04", "13", "18", "19")
DEFAULT_ORIGIN = date(2015, 2, 23)
DEFAULT_LAT_CENTROIDS = (22.0, 27.0, 32.0, 37.0, 42.0, 47.0, 52.0, 57.0)
DEFAULT_LON_CENTROIDS = (15.0, 25.0, 35.0, 45.0, 55.0)

# raw GDELT event-table column names
GDELT_COLUMNS = {
    "timestamp": "SQLDATE",
    "action_lat": "ActionGeo_Lat",
    "action_lon": "ActionGeo_Long",
    "actor1": "Actor1CountryCode",
    "root_code": "EventRootCode",
}

SPLITS = ("train", "val", "test")

PANEL_CSV = "panel.csv"
PANEL_MANIFEST = "panel_manifest.json"


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    timestamp: date
    action_lat: float
    action_lon: float
    actor1: str
    root_code: str

    def __post_init__(self):
        if not (math.isfinite(self.action_lat) and math.isfinite(self.action_lon)):
            raise PanelError("event coordinates must be finite")
        if not self.root_code:
            raise PanelError("event root code must be nonempty")


@dataclass(frozen=True)
class RegionGrid:
    """Rectangular lat/lon grid; cells are ``[lo, hi)`` with the outer edges closed."""

    lat_edges: tuple[float, ...]
    lon_edges: tuple[float, ...]

    def __post_init__(self):
        for edges in (self.lat_edges, self.lon_edges):
            if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
                raise PanelError("grid edges must be strictly increasing with at least one cell")

    @classmethod
    def from_centroids(cls, lat_centroids, lon_centroids, lat_step=5.0, lon_step=10.0) -> "RegionGrid":
        lats = sorted(lat_centroids)
        lons = sorted(lon_centroids)
        lat_edges = tuple([lats[0] - lat_step / 2] + [c + lat_step / 2 for c in lats])
        lon_edges = tuple([lons[0] - lon_step / 2] + [c + lon_step / 2 for c in lons])
        return cls(lat_edges, lon_edges)

    @property
    def n_lat(self) -> int:
        return len(self.lat_edges) - 1

    @property
    def n_lon(self) -> int:
        return len(self.lon_edges) - 1

    @property
    def n_regions(self) -> int:
        return self.n_lat * self.n_lon

    @property
    def centroids(self) -> list[GeoPoint]:
        out = []
        for i in range(self.n_lat):
            lat = 0.5 * (self.lat_edges[i] + self.lat_edges[i + 1])
            for j in range(self.n_lon):
                out.append(GeoPoint(lat, 0.5 * (self.lon_edges[j] + self.lon_edges[j + 1])))
        return out

    @staticmethod
    def _cell(edges, x):
        if x < edges[0] or x > edges[-1]:
            return None
        if x == edges[-1]:
            return len(edges) - 2
        return bisect.bisect_right(edges, x) - 1

    def locate(self, lat: float, lon: float) -> int | None:
        i = self._cell(self.lat_edges, lat)
        j = self._cell(self.lon_edges, lon)
        if i is None or j is None:
            return None
        return i * self.n_lon + j

    def to_dict(self) -> dict:
        return {"lat_edges": list(self.lat_edges), "lon_edges": list(self.lon_edges)}


def default_grid() -> RegionGrid:
    return RegionGrid.from_centroids(DEFAULT_LAT_CENTROIDS, DEFAULT_LON_CENTROIDS)


@dataclass(frozen=True)
class SeriesMeta:
    series_id: str
    actor: str
    code: str
    region_id: int | None = None
    lat: float | None = None
    lon: float | None = None

    @property
    def centroid(self) -> GeoPoint | None:
        if self.lat is None or self.lon is None:
            return None
        return GeoPoint(self.lat, self.lon)


@dataclass
class CountPanel:
    counts: np.ndarray
    origin: date
    series: list[SeriesMeta]
    split: np.ndarray
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != len(self.series):
            raise PanelError("counts must be (n_series, n_weeks) matching the series list")
        if np.any(self.counts < 0):
            raise PanelError("counts must be nonnegative")
        self.split = np.asarray(self.split, dtype="<U5")
        if self.split.shape != (self.n_weeks,):
            raise PanelError("split labels must cover every week")
        order = [SPLITS.index(s) for s in self.split]
        if any(b < a for a, b in zip(order, order[1:])):
            raise PanelError("splits must be ordered train < val < test")
        self._index = {m.series_id: i for i, m in enumerate(self.series)}
        if len(self._index) != len(self.series):
            raise PanelError("series ids must be unique")

    @property
    def n_series(self) -> int:
        return self.counts.shape[0]

    @property
    def n_weeks(self) -> int:
        return self.counts.shape[1]

    @property
    def series_ids(self) -> list[str]:
        return [m.series_id for m in self.series]

    @property
    def week_start(self) -> list[date]:
        return [self.origin + timedelta(weeks=t) for t in range(self.n_weeks)]

    def index(self, series_id: str) -> int:
        try:
            return self._index[series_id]
        except KeyError:
            raise PanelError(f"unknown series {series_id!r}") from None

    def get(self, series_id: str) -> np.ndarray:
        return self.counts[self.index(series_id)]

    def weeks_in(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)


def series_id_for(region_id: int, actor: str, code: str) -> str:
    return f"r{region_id:02d}-{actor}-{code}"


def normalize_code(code: str) -> str:
    code = str(code).strip()
    return code.zfill(2) if code.isdigit() else code


def week_index(ts: date, origin: date) -> int:
    return (ts - origin).days // 7


# ---------------------------------------------------------------------------
# reading records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rejection:
    row: int
    reason: str


def _parse_date(text: str) -> date:
    text = text.strip()
    if len(text) == 8 and text.isdigit():
        return datetime.strptime(text, "%Y%m%d").date()
    return date.fromisoformat(text[:10])


def read_event_records(
    path,
    column_map: dict | None = None,
    delimiter: str = ",",
    fieldnames: Sequence[str] | None = None,
) -> tuple[list[EventRecord], list[Rejection]]:
    """Parse a delimited event file.

    ``column_map`` maps record fields (``timestamp``, ``action_lat``,
    ``action_lon``, ``actor1``, ``root_code``) to file column names; it
    defaults to the field names themselves. Pass ``fieldnames`` for
    headerless files such as raw GDELT exports. Malformed rows are returned
    as rejections with a reason rather than raised.
    """
    cmap = {k: k for k in GDELT_COLUMNS}
    if column_map:
        cmap.update(column_map)
    records: list[EventRecord] = []
    rejected: list[Rejection] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter, fieldnames=fieldnames)
        missing = [c for c in cmap.values() if reader.fieldnames is None or c not in reader.fieldnames]
        if missing:
            raise PanelError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=1):
            try:
                rec = EventRecord(
                    timestamp=_parse_date(row[cmap["timestamp"]] or ""),
                    action_lat=float(row[cmap["action_lat"]]),
                    action_lon=float(row[cmap["action_lon"]]),
                    actor1=(row[cmap["actor1"]] or "").strip(),
                    root_code=normalize_code(row[cmap["root_code"]] or ""),
                )
            except (TypeError, ValueError) as exc:
                rejected.append(Rejection(row_no, f"{type(exc).__name__}: {exc}"))
                continue
            records.append(rec)
    return records, rejected


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass
class DropReport:
    n_input: int = 0
    n_counted: int = 0
    dropped: Counter = field(default_factory=Counter)
    rejected: list[Rejection] = field(default_factory=list)

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_counted": self.n_counted,
            "n_dropped": self.n_dropped,
            "dropped": dict(sorted(self.dropped.items())),
            "n_rejected": len(self.rejected),
            "rejected": [{"row": r.row, "reason": r.reason} for r in self.rejected],
        }


def panel_series(grid: RegionGrid, actors: Sequence[str], codes: Sequence[str]) -> list[SeriesMeta]:
    out = []
    for r, c in enumerate(grid.centroids):
        for a in actors:
            for v in codes:
                out.append(SeriesMeta(series_id_for(r, a, v), a, v, r, c.lat, c.lon))
    return out


def aggregate(
    records: Iterable[EventRecord],
    grid: RegionGrid | None = None,
    actors: Sequence[str] = DEFAULT_ACTORS,
    codes: Sequence[str] = DEFAULT_CODES,
    origin: date = DEFAULT_ORIGIN,
    n_weeks: int | None = None,
) -> tuple[CountPanel, DropReport]:
    """Count records per (region, actor, code, week).

    A record increments exactly one cell when its location, week, actor and
    code all pass the filters; otherwise it is dropped under the first
    failing reason. ``n_weeks`` defaults to the span up to the latest record.
    """
    grid = grid or default_grid()
    actors = list(actors)
    codes = [normalize_code(c) for c in codes]
    actor_pos = {a: i for i, a in enumerate(actors)}
    code_pos = {c: i for i, c in enumerate(codes)}
    records = list(records)
    report = DropReport(n_input=len(records))
    if n_weeks is None:
        last = max((week_index(r.timestamp, origin) for r in records), default=-1)
        n_weeks = max(last + 1, 0)
    n_a, n_v = len(actors), len(codes)
    counts = np.zeros((grid.n_regions * n_a * n_v, n_weeks), dtype=np.int64)
    for rec in records:
        t = week_index(rec.timestamp, origin)
        if t < 0 or t >= n_weeks:
            report.dropped["outside_time_range"] += 1
            continue
        region = grid.locate(rec.action_lat, rec.action_lon)
        if region is None:
            report.dropped["outside_grid"] += 1
            continue
        a = actor_pos.get(rec.actor1)
        if a is None:
            report.dropped["actor_not_selected"] += 1
            continue
        v = code_pos.get(normalize_code(rec.root_code))
        if v is None:
            report.dropped["code_not_selected"] += 1
            continue
        counts[(region * n_a + a) * n_v + v, t] += 1
        report.n_counted += 1
    attrs = {
        "grid": grid.to_dict(),
        "actors": actors,
        "codes": codes,
        "week_anchor": "Monday" if origin.weekday() == 0 else origin.strftime("%A"),
    }
    panel = CountPanel(counts, origin, panel_series(grid, actors, codes), np.full(n_weeks, "train"), attrs)
    return panel, report


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_panel(panel: CountPanel, train_end: date, val_weeks: int = 52) -> CountPanel:
    """Weeks starting on or before ``train_end`` train, the next ``val_weeks`` validate, the rest test."""
    t_end = week_index(train_end, panel.origin)
    if t_end < 0 or t_end >= panel.n_weeks:
        raise PanelError(f"train_end {train_end} lies outside the panel range")
    n_train = t_end + 1
    if panel.n_weeks - n_train < val_weeks:
        raise PanelError(
            f"only {panel.n_weeks - n_train} weeks after train_end, need {val_weeks} for validation"
        )
    return split_by_count(panel, n_train, val_weeks)


def split_by_count(panel: CountPanel, n_train: int, n_val: int = 0) -> CountPanel:
    if n_train < 0 or n_val < 0 or n_train + n_val > panel.n_weeks:
        raise PanelError("split sizes exceed the panel length")
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (panel.n_weeks - n_train - n_val))
    return CountPanel(panel.counts, panel.origin, panel.series, labels, dict(panel.attrs))


def zero_fraction(panel: CountPanel, series: str, split: str = "train") -> float:
    weeks = panel.weeks_in(split)
    if weeks.size == 0:
        raise PanelError(f"split {split!r} is empty")
    y = panel.get(series)[weeks]
    return float(np.mean(y == 0))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _split_ranges(split: np.ndarray) -> dict:
    out = {}
    for name in SPLITS:
        idx = np.flatnonzero(split == name)
        out[name] = [int(idx[0]), int(idx[-1]) + 1] if idx.size else [0, 0]
    return out


def write_panel(panel: CountPanel, directory, header: dict | None = None) -> tuple[Path, Path]:
    """Write the long-form CSV (nonzero cells) and its JSON manifest.

    ``header`` entries are written as ``# key=value`` comment lines at the top
    of the CSV and copied into the manifest.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / PANEL_CSV
    weeks = panel.week_start
    with open(csv_path, "w", newline="") as fh:
        for k, v in sorted((header or {}).items()):
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh)
        writer.writerow(["series_id", "region_id", "actor", "code", "week_start", "count"])
        rows, cols = np.nonzero(panel.counts)
        for i, t in zip(rows, cols):
            m = panel.series[i]
            writer.writerow(
                [m.series_id, "" if m.region_id is None else m.region_id, m.actor, m.code,
                 weeks[t].isoformat(), int(panel.counts[i, t])]
            )
    manifest = {
        "format": "spillcount-panel/1",
        "origin": panel.origin.isoformat(),
        "n_weeks": panel.n_weeks,
        "splits": _split_ranges(panel.split),
        "series": [
            {"series_id": m.series_id, "actor": m.actor, "code": m.code,
             "region_id": m.region_id, "lat": m.lat, "lon": m.lon}
            for m in panel.series
        ],
        "attrs": panel.attrs,
    }
    if header:
        manifest["run"] = dict(header)
    man_path = directory / PANEL_MANIFEST
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return csv_path, man_path


def read_panel(directory) -> CountPanel:
    directory = Path(directory)
    man_path = directory / PANEL_MANIFEST
    csv_path = directory / PANEL_CSV
    if not man_path.exists() or not csv_path.exists():
        raise PanelError(f"no panel found in {directory}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    series = [SeriesMeta(**s) for s in manifest["series"]]
    origin = date.fromisoformat(manifest["origin"])
    n_weeks = int(manifest["n_weeks"])
    counts = np.zeros((len(series), n_weeks), dtype=np.int64)
    index = {m.series_id: i for i, m in enumerate(series)}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in reader:
            t = week_index(date.fromisoformat(row["week_start"]), origin)
            counts[index[row["series_id"]], t] = int(row["count"])
    split = np.empty(n_weeks, dtype="<U5")
    for name, (a, b) in manifest["splits"].items():
        split[a:b] = name
    return CountPanel(counts, origin, series, split, manifest.get("attrs", {}))
