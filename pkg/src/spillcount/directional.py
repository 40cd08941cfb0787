"""Geodesic bearings on the WGS84 ellipsoid and weighted circular summaries.

Bearings are stored in ``[0, 2*pi)`` (clockwise from north). The preferred
bearing ``omega`` comes out of ``atan2`` and is reported in ``(-pi, pi]``;
``omega % (2*pi)`` converts it to the stored convention.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

WGS84_A = 6378137.0
WGS84_INV_F = 298.257223563
WGS84_F = 1.0 / WGS84_INV_F
WGS84_B = WGS84_A * (1.0 - WGS84_F)

TWO_PI = 2.0 * math.pi
# R closer than this to 0 or 1 is snapped to the exact value
R_SNAP = 1e-12


class GeodesicError(ValueError):
    pass


class CoincidentPointsError(GeodesicError):
    pass


class NonConvergenceError(GeodesicError):
    """Vincenty iteration failed (near-antipodal points)."""


class DegenerateSummaryError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("coordinates must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class BearingEdge:
    source: GeoPoint
    target: GeoPoint
    bearing: float
    distance: float
    weight: float
    sign: int = 1
    label: str = ""


@dataclass
class BearingSummary:
    omega_draws: np.ndarray
    r_draws: np.ndarray
    circular_mean: float
    circular_ci: tuple[float, float]
    edges: list[BearingEdge] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return len(self.edges) == 0


def vincenty_inverse(source: GeoPoint, target: GeoPoint, tol: float = 1e-12, max_iter: int = 200):
    """Forward azimuth at ``source`` toward ``target`` and geodesic distance.

    Returns
    -------
    bearing : float
        Radians in ``[0, 2*pi)``.
    distance : float
        Meters on the WGS84 ellipsoid.

    Raises
    ------
    CoincidentPointsError
        Identical points have no defined bearing.
    NonConvergenceError
        The longitude iteration did not settle below ``tol`` (near-antipodal).
    """
    if source.lat == target.lat and (source.lon - target.lon) % 360.0 == 0.0:
        raise CoincidentPointsError("bearing between identical points is undefined")
    a, b, f = WGS84_A, WGS84_B, WGS84_F
    L = math.radians((target.lon - source.lon + 180.0) % 360.0 - 180.0)
    u1 = math.atan((1.0 - f) * math.tan(math.radians(source.lat)))
    u2 = math.atan((1.0 - f) * math.tan(math.radians(target.lat)))
    sin_u1, cos_u1 = math.sin(u1), math.cos(u1)
    sin_u2, cos_u2 = math.sin(u2), math.cos(u2)

    lam = L
    for _ in range(max_iter):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.hypot(cos_u2 * sin_lam, cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam)
        if sin_sigma == 0.0:
            raise CoincidentPointsError("bearing between identical points is undefined")
        cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lam
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cos_u1 * cos_u2 * sin_lam / sin_sigma
        cos2_alpha = 1.0 - sin_alpha * sin_alpha
        # equatorial line: cos2_alpha = 0
        cos_2sm = cos_sigma - 2.0 * sin_u1 * sin_u2 / cos2_alpha if cos2_alpha != 0.0 else 0.0
        c = f / 16.0 * cos2_alpha * (4.0 + f * (4.0 - 3.0 * cos2_alpha))
        lam_prev = lam
        lam = L + (1.0 - c) * f * sin_alpha * (
            sigma + c * sin_sigma * (cos_2sm + c * cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm))
        )
        if abs(lam - lam_prev) < tol:
            break
    else:
        raise NonConvergenceError("Vincenty inverse did not converge (points nearly antipodal)")
    if abs(lam) > math.pi:
        raise NonConvergenceError("Vincenty inverse diverged (points nearly antipodal)")

    u_sq = cos2_alpha * (a * a - b * b) / (b * b)
    big_a = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)))
    big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)))
    d_sigma = big_b * sin_sigma * (
        cos_2sm
        + big_b / 4.0 * (
            cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)
            - big_b / 6.0 * cos_2sm * (-3.0 + 4.0 * sin_sigma * sin_sigma) * (-3.0 + 4.0 * cos_2sm * cos_2sm)
        )
    )
    distance = b * big_a * (sigma - d_sigma)
    sin_lam, cos_lam = math.sin(lam), math.cos(lam)
    alpha1 = math.atan2(cos_u2 * sin_lam, cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam)
    bearing = alpha1 % TWO_PI
    if bearing >= TWO_PI:
        bearing = 0.0
    return bearing, distance


def circular_summary(bearings: Sequence[float], weights: Sequence[float]):
    """Weighted preferred bearing and mean resultant length.

    Returns
    -------
    omega : float
        ``atan2(sum w sin b, sum w cos b)`` in ``(-pi, pi]``; NaN when the
        resultant vanishes (``r == 0``).
    r : float
        Resultant norm over the weight sum, in ``[0, 1]``. Values within
        1e-12 of 0 or 1 are snapped to the exact endpoint.
    """
    b = np.asarray(bearings, dtype=float)
    w = np.asarray(weights, dtype=float)
    if b.shape != w.shape:
        raise ValueError("bearings and weights must have equal length")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = float(w.sum())
    if not total > 0:
        raise DegenerateSummaryError("weights sum to zero; summary undefined")
    c = float(np.dot(w, np.cos(b)))
    s = float(np.dot(w, np.sin(b)))
    r = min(math.hypot(c, s) / total, 1.0)
    if r < R_SNAP:
        return math.nan, 0.0
    if 1.0 - r < R_SNAP:
        r = 1.0
    return math.atan2(s, c), r


def circular_mean(angles) -> float:
    angles = np.asarray(angles, dtype=float)
    angles = angles[np.isfinite(angles)]
    if angles.size == 0:
        return math.nan
    return math.atan2(float(np.sin(angles).mean()), float(np.cos(angles).mean()))


def circular_hdi(angles, level: float = 0.95) -> tuple[float, float]:
    """Shortest arc ``(start, end)`` holding ``level`` of the angles.

    Endpoints are in ``(-pi, pi]``; the arc runs counter-clockwise in angle
    from ``start`` to ``end`` and may wrap through ``pi``.
    """
    x = np.asarray(angles, dtype=float)
    x = np.sort(np.mod(x[np.isfinite(x)], TWO_PI))
    n = x.size
    if n == 0:
        return (math.nan, math.nan)
    k = max(1, int(math.ceil(level * n)))
    if k >= n:
        # the complement of the widest gap
        gaps = np.diff(np.concatenate([x, [x[0] + TWO_PI]]))
        j = int(np.argmax(gaps))
        start, end = x[(j + 1) % n], x[j]
    else:
        ext = np.concatenate([x, x + TWO_PI])
        widths = ext[k - 1 : k - 1 + n] - ext[:n]
        i = int(np.argmin(widths))
        start, end = ext[i], ext[i + k - 1]
    return _to_pm_pi(start), _to_pm_pi(end)


def _to_pm_pi(a: float) -> float:
    a = math.atan2(math.sin(a), math.cos(a))
    return math.pi if a == -math.pi else a


def posterior_bearing_summary(
    coef_draws: np.ndarray,
    sources: Sequence[GeoPoint | None],
    target: GeoPoint,
    labels: Sequence[str] | None = None,
    level: float = 0.95,
) -> BearingSummary:
    """Per-draw ``(omega, R)`` over fixed source bearings with ``|gamma|`` weights.

    Parameters
    ----------
    coef_draws : ndarray, shape (S, k)
        Posterior draws of the active cross-series coefficients.
    sources : sequence of GeoPoint or None
        Source centroid per column; ``None`` marks non-geographic columns
        (calendar effects, embeddings), which are skipped. Sources located at
        the target centroid have no bearing and are skipped as well.
    target : GeoPoint
    """
    coef_draws = np.atleast_2d(np.asarray(coef_draws, dtype=float))
    labels = list(labels) if labels is not None else [f"col{j}" for j in range(len(sources))]
    keep, edges, excluded = [], [], []
    for j, src in enumerate(sources):
        if src is None:
            excluded.append(labels[j])
            continue
        try:
            bearing, dist = vincenty_inverse(src, target)
        except CoincidentPointsError:
            excluded.append(labels[j])
            continue
        mean = float(coef_draws[:, j].mean())
        keep.append(j)
        edges.append(
            BearingEdge(src, target, bearing, dist, abs(mean), 1 if mean >= 0 else -1, labels[j])
        )
    if not keep:
        return BearingSummary(np.empty(0), np.empty(0), math.nan, (math.nan, math.nan), [], excluded)
    bearings = np.array([e.bearing for e in edges])
    w = np.abs(coef_draws[:, keep])
    c = w @ np.cos(bearings)
    s = w @ np.sin(bearings)
    total = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.minimum(np.hypot(c, s) / total, 1.0)
    r = np.where(r < R_SNAP, 0.0, np.where(1.0 - r < R_SNAP, 1.0, r))
    omega = np.where(r > 0, np.arctan2(s, c), np.nan)
    return BearingSummary(
        omega_draws=omega,
        r_draws=r,
        circular_mean=circular_mean(omega),
        circular_ci=circular_hdi(omega, level),
        edges=edges,
        excluded=excluded,
    )


@dataclass
class RoseBins:
    counts: np.ndarray
    weight_sum: np.ndarray
    magnitude_edges: np.ndarray
    magnitude_hist: np.ndarray

    @property
    def n_sectors(self) -> int:
        return self.counts.shape[0]


def sector_index(bearing: float, n_sectors: int) -> int:
    width = TWO_PI / n_sectors
    k = int(math.floor((bearing % TWO_PI) / width))
    return min(k, n_sectors - 1)


def rose_bins(bearings, weights, n_sectors: int = 16, magnitude_edges=None) -> RoseBins:
    """Bin bearings into sectors ``[2*pi*k/n, 2*pi*(k+1)/n)``.

    Each sector records its edge count, the summed magnitudes, and a
    histogram of magnitudes over ``magnitude_edges`` (default: four equal
    bins on ``[0, max]``; the top bin is closed).
    """
    if n_sectors < 2:
        raise ValueError("n_sectors must be >= 2")
    b = np.asarray(bearings, dtype=float)
    w = np.abs(np.asarray(weights, dtype=float))
    if magnitude_edges is None:
        top = float(w.max()) if w.size and w.max() > 0 else 1.0
        magnitude_edges = np.linspace(0.0, top, 5)
    magnitude_edges = np.asarray(magnitude_edges, dtype=float)
    n_mag = magnitude_edges.size - 1
    counts = np.zeros(n_sectors, dtype=int)
    weight_sum = np.zeros(n_sectors)
    hist = np.zeros((n_sectors, n_mag), dtype=int)
    for bearing, weight in zip(b, w):
        k = sector_index(bearing, n_sectors)
        counts[k] += 1
        weight_sum[k] += weight
        m = int(np.searchsorted(magnitude_edges, weight, side="right")) - 1
        hist[k, min(max(m, 0), n_mag - 1)] += 1
    return RoseBins(counts, weight_sum, magnitude_edges, hist)


def wrap_encode(point: GeoPoint) -> np.ndarray:
    lat = math.pi * point.lat / 90.0
    lon = math.pi * point.lon / 180.0
    return np.array([math.sin(lat), math.cos(lat), math.sin(lon), math.cos(lon)])


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def bearing_field_geojson(edges: Iterable[BearingEdge], properties: dict | None = None) -> dict:
    features = []
    for e in edges:
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[e.source.lon, e.source.lat], [e.target.lon, e.target.lat]],
                },
                "properties": {
                    "label": e.label,
                    "bearing_deg": math.degrees(e.bearing),
                    "distance_m": e.distance,
                    "mean_weight": e.weight,
                    "sign": e.sign,
                },
            }
        )
    out = {"type": "FeatureCollection", "features": features}
    if properties:
        out["properties"] = properties
    return out


def write_rose_csv(path, rose: RoseBins, header_lines: Sequence[str] = ()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        mag_cols = [
            f"mag_{rose.magnitude_edges[i]:.6g}_{rose.magnitude_edges[i + 1]:.6g}"
            for i in range(rose.magnitude_edges.size - 1)
        ]
        writer.writerow(["sector", "start_deg", "end_deg", "count", "weight_sum", *mag_cols])
        width = 360.0 / rose.n_sectors
        for k in range(rose.n_sectors):
            writer.writerow(
                [k, f"{k * width:.6g}", f"{(k + 1) * width:.6g}", int(rose.counts[k]),
                 repr(float(rose.weight_sum[k])), *[int(v) for v in rose.magnitude_hist[k]]]
            )


def write_omega_r_csv(path, summary: BearingSummary, header_lines: Sequence[str] = ()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["draw", "omega_rad", "r"])
        for s, (om, r) in enumerate(zip(summary.omega_draws, summary.r_draws)):
            writer.writerow([s, repr(float(om)), repr(float(r))])


def write_geojson(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
