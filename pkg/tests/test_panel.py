from collections import Counter
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spillcount.panel import (
    DEFAULT_ORIGIN,
    CountPanel,
    EventRecord,
    PanelError,
    RegionGrid,
    SeriesMeta,
    aggregate,
    default_grid,
    read_event_records,
    read_panel,
    series_id_for,
    split_by_count,
    split_panel,
    week_index,
    write_panel,
    zero_fraction,
)


def rec(days=0, lat=32.0, lon=35.0, actor="ISR", code="19"):
    return EventRecord(DEFAULT_ORIGIN + timedelta(days=days), lat, lon, actor, code)


# --- grid and aggregation -------------------------------------------------------


def test_default_grid():
    g = default_grid()
    assert (g.n_lat, g.n_lon, g.n_regions) == (8, 5, 40)
    assert g.lat_edges[0] == 19.5 and g.lat_edges[-1] == 59.5
    assert g.lon_edges[0] == 10.0 and g.lon_edges[-1] == 60.0
    assert g.centroids[0].lat == 22.0 and g.centroids[0].lon == 15.0


def test_default_series_count():
    panel, _ = aggregate([], n_weeks=3)
    assert panel.n_series == 7 * 4 * 40 == 1120


def test_three_records_one_cell():
    panel, report = aggregate([rec(0), rec(2), rec(6)], n_weeks=2)
    region = default_grid().locate(32.0, 35.0)
    assert panel.get(series_id_for(region, "ISR", "19"))[0] == 3
    assert panel.counts.sum() == 3 and report.n_dropped == 0


def test_boundary_half_open():
    g = default_grid()
    # lat 24.5 separates rows 0 and 1; lon 20 separates columns 0 and 1
    assert g.locate(24.5, 20.0) == 1 * 5 + 1
    assert g.locate(24.4999, 19.9999) == 0
    # outer edges are closed
    assert g.locate(59.5, 60.0) == 39
    assert g.locate(19.5, 10.0) == 0
    assert g.locate(59.6, 30.0) is None and g.locate(30.0, 9.99) is None


def test_week_binning_monday_anchor():
    assert week_index(DEFAULT_ORIGIN, DEFAULT_ORIGIN) == 0
    assert week_index(DEFAULT_ORIGIN + timedelta(days=6), DEFAULT_ORIGIN) == 0
    assert week_index(DEFAULT_ORIGIN + timedelta(days=7), DEFAULT_ORIGIN) == 1
    assert week_index(DEFAULT_ORIGIN - timedelta(days=1), DEFAULT_ORIGIN) == -1
    panel, _ = aggregate([rec(0)], n_weeks=1)
    assert panel.attrs["week_anchor"] == "Monday"


def test_drop_reasons():
    recs = [rec(-3), rec(lat=0.0), rec(actor="FRA"), rec(code="01"), rec(3)]
    panel, report = aggregate(recs, n_weeks=2)
    assert report.dropped == Counter(outside_time_range=1, outside_grid=1, actor_not_selected=1,
                                     code_not_selected=1)
    assert report.n_counted == 1 and panel.counts.sum() == 1


def test_code_normalization():
    panel, report = aggregate([rec(code="4")], n_weeks=1)
    assert report.n_counted == 1
    assert panel.get(series_id_for(default_grid().locate(32.0, 35.0), "ISR", "04"))[0] == 1


record_strategy = st.builds(
    rec,
    days=st.integers(-10, 60),
    lat=st.sampled_from([15.0, 19.5, 22.0, 24.5, 30.0, 59.5, 61.0]),
    lon=st.sampled_from([5.0, 10.0, 20.0, 33.3, 60.0, 70.0]),
    actor=st.sampled_from(["ISR", "UKR", "FRA"]),
    code=st.sampled_from(["04", "19", "01"]),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(record_strategy, max_size=60))
def test_aggregation_matches_brute_force(records):
    grid = RegionGrid.from_centroids([22.0, 27.0, 57.0], [15.0, 25.0, 55.0])
    actors, codes = ["ISR", "UKR"], ["04", "19"]
    panel, report = aggregate(records, grid, actors, codes, n_weeks=8)

    expected = np.zeros_like(panel.counts)
    for r in records:
        t = (r.timestamp - DEFAULT_ORIGIN).days // 7
        if not 0 <= t < 8:
            continue
        cell = None
        for i in range(grid.n_lat):
            lo, hi = grid.lat_edges[i], grid.lat_edges[i + 1]
            if lo <= r.action_lat < hi or (i == grid.n_lat - 1 and r.action_lat == hi):
                for j in range(grid.n_lon):
                    a, b = grid.lon_edges[j], grid.lon_edges[j + 1]
                    if a <= r.action_lon < b or (j == grid.n_lon - 1 and r.action_lon == b):
                        cell = i * grid.n_lon + j
                break
        if cell is None or r.actor1 not in actors or r.root_code not in codes:
            continue
        expected[panel.index(series_id_for(cell, r.actor1, r.root_code)), t] += 1
    np.testing.assert_array_equal(panel.counts, expected)
    assert panel.counts.sum() + report.n_dropped == len(records)


# --- splits ---------------------------------------------------------------------


def _long_panel(n_weeks=420):
    panel, _ = aggregate([], RegionGrid((0.0, 1.0), (0.0, 1.0)), ["ISR"], ["19"], n_weeks=n_weeks)
    return panel


@pytest.mark.parametrize("train_end", [date(2021, 1, 18), date(2020, 1, 20)])
def test_split_conventions(train_end):
    panel = split_panel(_long_panel(), train_end, val_weeks=52)
    train = panel.weeks_in("train")
    assert panel.week_start[train[-1]] == train_end
    assert panel.weeks_in("val").size == 52
    assert panel.weeks_in("val")[0] == train[-1] + 1
    assert panel.weeks_in("test")[0] == train[-1] + 53


def test_split_without_validation():
    panel = split_panel(_long_panel(), date(2020, 1, 20), val_weeks=0)
    assert panel.weeks_in("val").size == 0
    assert panel.weeks_in("test")[0] == panel.weeks_in("train")[-1] + 1


def test_split_errors():
    with pytest.raises(PanelError):
        split_panel(_long_panel(), date(2010, 1, 4))
    with pytest.raises(PanelError):
        split_panel(_long_panel(100), date(2016, 12, 26), val_weeks=52)
    with pytest.raises(PanelError):
        split_by_count(_long_panel(10), 8, 3)


def test_split_order_enforced():
    with pytest.raises(PanelError):
        CountPanel(np.zeros((1, 3)), DEFAULT_ORIGIN, [SeriesMeta("a", "X", "00")], np.array(["test", "train", "train"]))


# --- zero fraction ------------------------------------------------------------------


def _single(y):
    return CountPanel(np.asarray(y)[None, :], DEFAULT_ORIGIN, [SeriesMeta("a", "X", "00")],
                      np.full(len(y), "train"))


def test_zero_fraction_examples():
    assert zero_fraction(_single([0] * 5), "a") == 1.0
    assert zero_fraction(_single([1, 2, 3]), "a") == 0.0
    assert zero_fraction(_single([0] * 13 + [1] * 7), "a") == 0.65
    with pytest.raises(PanelError):
        zero_fraction(_single([0, 1]), "a", "test")


# --- serialization -------------------------------------------------------------------


def test_round_trip(tmp_path, rng):
    grid = RegionGrid.from_centroids([22.0, 27.0], [15.0, 25.0])
    recs = [rec(int(d), float(la), float(lo), str(a), "19")
            for d, la, lo, a in zip(rng.integers(0, 200, 400), rng.uniform(20, 29, 400),
                                    rng.uniform(10, 30, 400), rng.choice(["ISR", "UKR"], 400))]
    panel, _ = aggregate(recs, grid, ["ISR", "UKR"], ["19"])
    panel = split_by_count(panel, 20, 5)
    write_panel(panel, tmp_path / "p", header={"seed": 3, "config_hash": "abc"})
    back = read_panel(tmp_path / "p")
    np.testing.assert_array_equal(back.counts, panel.counts)
    assert back.series == panel.series
    np.testing.assert_array_equal(back.split, panel.split)
    assert back.origin == panel.origin
    assert back.attrs == panel.attrs
    assert (tmp_path / "p" / "panel.csv").read_text().startswith("# config_hash=abc\n# seed=3\n")


def test_read_panel_missing(tmp_path):
    with pytest.raises(PanelError):
        read_panel(tmp_path)


# --- record parsing ---------------------------------------------------------------------


def test_read_event_records(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text(
        "timestamp,action_lat,action_lon,actor1,root_code\n"
        "2015-02-24,32.1,35.2,ISR,19\n"
        "20150302,32.1,35.2,ISR,4\n"
        "not-a-date,32.1,35.2,ISR,19\n"
        "2015-02-24,nan,35.2,ISR,19\n"
        "2015-02-24,32.1,35.2,ISR,\n"
    )
    recs, rejected = read_event_records(p)
    assert [r.root_code for r in recs] == ["19", "04"]
    assert recs[1].timestamp == date(2015, 3, 2)
    assert [r.row for r in rejected] == [3, 4, 5]


def test_read_gdelt_headerless(tmp_path):
    p = tmp_path / "raw.tsv"
    p.write_text("20150224\tx\t32.0\t35.0\tUKR\t18\n")
    names = ["SQLDATE", "junk", "ActionGeo_Lat", "ActionGeo_Long", "Actor1CountryCode", "EventRootCode"]
    cmap = {"timestamp": "SQLDATE", "action_lat": "ActionGeo_Lat", "action_lon": "ActionGeo_Long",
            "actor1": "Actor1CountryCode", "root_code": "EventRootCode"}
    recs, rejected = read_event_records(p, cmap, delimiter="\t", fieldnames=names)
    assert len(recs) == 1 and not rejected
    assert recs[0].actor1 == "UKR"


def test_missing_columns(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("timestamp,lat\n2015-02-24,1\n")
    with pytest.raises(PanelError):
        read_event_records(p)


def test_event_record_validation():
    with pytest.raises(PanelError):
        EventRecord(DEFAULT_ORIGIN, float("inf"), 0.0, "ISR", "19")
    with pytest.raises(PanelError):
        EventRecord(DEFAULT_ORIGIN, 0.0, 0.0, "ISR", "")
