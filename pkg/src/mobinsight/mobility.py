"""Communication-record processing: user filtering, home-neighborhood
detection from night/weekend tower usage, and O-D matrix construction.

Timestamps are epoch seconds interpreted in the dataset's declared local
time zone (a fixed UTC offset; the collection windows handled here contain
no DST transitions).
"""
from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .geo import GeoPoint, NeighborhoodGeometry, assign_nearest_site, haversine_distance_m, point_in_polygon

MIN_RECORDS_PER_USER = 10
HOME_DOMINANCE_RATIO = 0.8
HOME_PROXIMITY_M = 100.0

KINDS = ("call", "sms", "mms")


@dataclass(frozen=True)
class CdrRecord:
    user_id: str
    timestamp: int  # epoch seconds
    bts_id: str
    kind: str
    duration_s: int
    roaming: bool
    prepaid: bool

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")
        if self.duration_s < 0:
            raise ValueError("negative duration")


@dataclass(frozen=True)
class BtsSite:
    id: str
    location: GeoPoint
    neighborhood_id: str


@dataclass(frozen=True)
class HomeAssignment:
    user_id: str
    neighborhood_id: str | None  # None when discarded
    reason: str | None           # ambiguous_home | too_few_records | filtered

    @property
    def assigned(self) -> bool:
        return self.neighborhood_id is not None


@dataclass
class OdMatrix:
    neighborhood_ids: tuple[str, ...]
    counts: np.ndarray  # N x N nonnegative ints, zero diagonal
    direction: str      # "to" | "from"

    def __post_init__(self):
        n = len(self.neighborhood_ids)
        if self.counts.shape != (n, n):
            raise ValueError("counts shape does not match neighborhood list")
        if (np.diag(self.counts) != 0).any():
            raise ValueError("diagonal must be zero")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")
        if self.direction not in ("to", "from"):
            raise ValueError(f"bad direction tag {self.direction!r}")

    def index_of(self, neighborhood_id: str) -> int:
        return self.neighborhood_ids.index(neighborhood_id)

    def transposed(self) -> "OdMatrix":
        return OdMatrix(self.neighborhood_ids, self.counts.T.copy(),
                        "from" if self.direction == "to" else "to")


def load_bts_sites(path: str | Path, geoms: list[NeighborhoodGeometry]) -> dict[str, BtsSite]:
    """CSV `bts_id,lat,lon`; each site is mapped to its neighborhood once at
    load (polygon containment, nearest-centroid fallback) because per-record
    polygon tests would dominate runtime on large CDR sets.
    """
    sites: dict[str, BtsSite] = {}
    centroids = [(g.id, g.centroid) for g in geoms]
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            loc = GeoPoint(float(row["lat"]), float(row["lon"]))
            nb = None
            for g in geoms:
                min_lat, min_lon, max_lat, max_lon = g.boundary.bbox()
                if min_lat <= loc.lat <= max_lat and min_lon <= loc.lon <= max_lon \
                        and point_in_polygon(loc, g.boundary):
                    nb = g.id
                    break
            if nb is None:
                nb = assign_nearest_site(loc, centroids)
            sites[row["bts_id"]] = BtsSite(id=row["bts_id"], location=loc, neighborhood_id=nb)
    return sites


def load_cdr_csv(paths: list[str | Path] | str | Path) -> list[CdrRecord]:
    """CSV `user_id,timestamp,bts_id,kind,duration_s,roaming,prepaid`,
    optionally chunked into several files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    out = []
    for path in paths:
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            for row_no, row in enumerate(reader, start=2):
                try:
                    out.append(CdrRecord(
                        user_id=row["user_id"],
                        timestamp=int(row["timestamp"]),
                        bts_id=row["bts_id"],
                        kind=row["kind"],
                        duration_s=int(row["duration_s"]),
                        roaming=row["roaming"] in ("1", "true", "True"),
                        prepaid=row["prepaid"] in ("1", "true", "True"),
                    ))
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}: bad row {row_no}: {exc}") from exc
    return out


def filter_users(records: list[CdrRecord]) -> tuple[list[CdrRecord], list[HomeAssignment]]:
    """Drop roaming and prepaid records first, then users left with fewer
    than 10 records. Users losing every record to the roaming/prepaid filter
    are reported as `filtered`, the rest as `too_few_records`.
    """
    kept_by_user: dict[str, list[CdrRecord]] = defaultdict(list)
    seen_users: list[str] = []
    seen_set = set()
    for r in records:
        if r.user_id not in seen_set:
            seen_set.add(r.user_id)
            seen_users.append(r.user_id)
        if not r.roaming and not r.prepaid:
            kept_by_user[r.user_id].append(r)

    retained: list[CdrRecord] = []
    discards: list[HomeAssignment] = []
    for uid in seen_users:
        recs = kept_by_user.get(uid, [])
        if len(recs) >= MIN_RECORDS_PER_USER:
            retained.extend(recs)
        elif not recs:
            discards.append(HomeAssignment(uid, None, "filtered"))
        else:
            discards.append(HomeAssignment(uid, None, "too_few_records"))
    return retained, discards


def _local(ts: int, tz_offset_hours: float) -> datetime:
    return datetime.fromtimestamp(ts, tz=timezone(timedelta(hours=tz_offset_hours)))


def in_home_window(ts: int, tz_offset_hours: float = 0.0) -> bool:
    """Night/weekend window for home detection: the four nights
    [Mon 20:00, Tue 08:00) .. [Thu 20:00, Fri 08:00), plus all of Sat/Sun.
    """
    dt = _local(ts, tz_offset_hours)
    wd = dt.weekday()  # Mon=0
    if wd >= 5:
        return True
    if wd <= 3 and dt.hour >= 20:
        return True
    if 1 <= wd <= 4 and dt.hour < 8:
        return True
    return False


def detect_home(user_records: list[CdrRecord], sites: dict[str, BtsSite],
                tz_offset_hours: float = 0.0) -> HomeAssignment:
    """Rank towers by night/weekend record count. The top tower wins if the
    runner-up has under 80% of its usage, or if the two towers are within
    100 m; otherwise the user is discarded as ambiguous. Count ties break
    toward the smaller bts_id.
    """
    if not user_records:
        raise ValueError("detect_home called with no records")
    uid = user_records[0].user_id
    window = [r for r in user_records if in_home_window(r.timestamp, tz_offset_hours)]
    if not window:
        return HomeAssignment(uid, None, "ambiguous_home")
    usage = Counter(r.bts_id for r in window)
    ranked = sorted(usage.items(), key=lambda kv: (-kv[1], kv[0]))
    top_id, top_count = ranked[0]
    if len(ranked) == 1:
        return HomeAssignment(uid, sites[top_id].neighborhood_id, None)
    second_id, second_count = ranked[1]
    if second_count < HOME_DOMINANCE_RATIO * top_count:
        return HomeAssignment(uid, sites[top_id].neighborhood_id, None)
    if haversine_distance_m(sites[top_id].location, sites[second_id].location) <= HOME_PROXIMITY_M:
        return HomeAssignment(uid, sites[top_id].neighborhood_id, None)
    return HomeAssignment(uid, None, "ambiguous_home")


def detect_homes(records: list[CdrRecord], sites: dict[str, BtsSite],
                 tz_offset_hours: float = 0.0) -> list[HomeAssignment]:
    by_user: dict[str, list[CdrRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    return [detect_home(by_user[uid], sites, tz_offset_hours) for uid in sorted(by_user)]


def build_od_matrix(records: list[CdrRecord], homes: list[HomeAssignment],
                    sites: dict[str, BtsSite], geoms: list[NeighborhoodGeometry],
                    tz_offset_hours: float = 0.0) -> tuple[OdMatrix, int]:
    """Count, for every user with an assigned home, one visit per (calendar
    day, visited neighborhood != home). Records inside the home neighborhood
    are not travel samples. Returns the `to` matrix plus the number of
    records rejected for referencing unknown towers.
    """
    ids = tuple(g.id for g in geoms)
    index = {nid: i for i, nid in enumerate(ids)}
    home_of = {h.user_id: h.neighborhood_id for h in homes if h.assigned}
    counts = np.zeros((len(ids), len(ids)), dtype=np.int64)
    rejected = 0
    seen: set[tuple[str, str, str]] = set()  # (user, date, neighborhood)
    for r in records:
        home = home_of.get(r.user_id)
        if home is None:
            continue
        site = sites.get(r.bts_id)
        if site is None:
            rejected += 1
            continue
        visited = site.neighborhood_id
        if visited == home:
            continue
        day = _local(r.timestamp, tz_offset_hours).date().isoformat()
        key = (r.user_id, day, visited)
        if key in seen:
            continue
        seen.add(key)
        counts[index[home], index[visited]] += 1
    return OdMatrix(ids, counts, "to"), rejected


def normalize_rows(m: OdMatrix) -> np.ndarray:
    """Row-stochastic float view of the counts. All-zero rows fall back to a
    uniform distribution over the off-diagonal entries."""
    n = len(m.neighborhood_ids)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        total = m.counts[i].sum()
        if total > 0:
            out[i] = m.counts[i] / total
        else:
            out[i] = 1.0 / (n - 1)
            out[i, i] = 0.0
    return out


def population_correlation(homes: list[HomeAssignment],
                           geoms: list[NeighborhoodGeometry]) -> float:
    """Pearson r between assigned-home counts and census population."""
    if len(geoms) < 3:
        raise ValueError("need at least 3 neighborhoods")
    tally = Counter(h.neighborhood_id for h in homes if h.assigned)
    x = np.array([tally.get(g.id, 0) for g in geoms], dtype=np.float64)
    y = np.array([g.population for g in geoms], dtype=np.float64)
    if x.std() == 0 or y.std() == 0:
        raise ValueError("zero variance in home counts or census populations")
    return float(np.corrcoef(x, y)[0, 1])


def save_od_matrix(m: OdMatrix, path: str | Path):
    Path(path).write_text(json.dumps({
        "direction": m.direction,
        "neighborhoods": list(m.neighborhood_ids),
        "counts": m.counts.tolist(),
    }))


def load_od_matrix(path: str | Path) -> OdMatrix:
    d = json.loads(Path(path).read_text())
    return OdMatrix(tuple(d["neighborhoods"]),
                    np.array(d["counts"], dtype=np.int64), d["direction"])
