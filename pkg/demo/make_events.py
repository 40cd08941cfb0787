"""Regenerate demo/events.csv: synthetic event records with one planted spillover.

Region 12 (lat 32, lon 35) UKR/19 drives region 22 (lat 42, lon 35) RUS/19
one week later; every other selected series is independent noise. A few
rows are deliberately malformed or filtered out so the aggregation report
has something to show.

    python3 demo/make_events.py
"""

import csv
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from spillcount.panel import default_grid

OUT = Path(__file__).with_name("events.csv")
ORIGIN = date(2015, 2, 23)
N_WEEKS = 160
ACTORS = ("USA", "RUS", "UKR")
CODES = ("18", "19")
REGIONS = (7, 12, 17, 22)
SOURCE = (12, "UKR", "19")
TARGET = (22, "RUS", "19")


def main(seed: int = 20150223) -> None:
    rng = np.random.default_rng(seed)
    grid = default_grid()
    counts = {}
    for r in REGIONS:
        for a in ACTORS:
            for c in CODES:
                counts[(r, a, c)] = rng.poisson(rng.uniform(0.3, 2.0), N_WEEKS)
    src = rng.poisson(3.0, N_WEEKS)
    counts[SOURCE] = src
    tgt = np.zeros(N_WEEKS, dtype=int)
    for t in range(1, N_WEEKS):
        mu = np.exp(0.2 + 0.2 * np.log1p(tgt[t - 1]) + 0.8 * np.log1p(src[t - 1]))
        tgt[t] = rng.poisson(rng.gamma(4.0, mu / 4.0))
    counts[TARGET] = tgt

    rows = []
    for (r, a, c), ys in sorted(counts.items()):
        i, j = divmod(r, grid.n_lon)
        lat0, lat1 = grid.lat_edges[i], grid.lat_edges[i + 1]
        lon0, lon1 = grid.lon_edges[j], grid.lon_edges[j + 1]
        for t, n in enumerate(ys):
            for _ in range(int(n)):
                day = ORIGIN + timedelta(weeks=t, days=int(rng.integers(7)))
                rows.append([day.strftime("%Y%m%d"), f"{rng.uniform(lat0, lat1):.4f}",
                             f"{rng.uniform(lon0, lon1):.4f}", a, c])
    # filtered and malformed records
    rows.append([ORIGIN.strftime("%Y%m%d"), "10.0", "35.0", "RUS", "19"])
    rows.append([ORIGIN.strftime("%Y%m%d"), "40.0", "35.0", "FRA", "19"])
    rows.append([ORIGIN.strftime("%Y%m%d"), "40.0", "35.0", "RUS", "01"])
    rows.append([(ORIGIN - timedelta(days=3)).strftime("%Y%m%d"), "40.0", "35.0", "RUS", "19"])
    rows.append(["not-a-date", "40.0", "35.0", "RUS", "19"])
    rows.append([ORIGIN.strftime("%Y%m%d"), "", "35.0", "RUS", "19"])
    order = rng.permutation(len(rows))
    with open(OUT, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["SQLDATE", "ActionGeo_Lat", "ActionGeo_Long", "Actor1CountryCode", "EventRootCode"])
        w.writerows(rows[k] for k in order)


if __name__ == "__main__":
    main()
