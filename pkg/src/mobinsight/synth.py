"""Synthetic city generator: grid geometries with census, multi-source place
files with planted duplicates, and CDR traces drawn from a known
feature-driven mobility law. Every emitted file matches the input formats of
the ingestion modules, and `ground_truth.json` records what was planted.

The movement law is inside the estimator's own family: for home i and
destination j the logit is  x_i' W* x_j + a* . x_j - beta * d_ij  over
standardized true profiles, so feature-driven structure is learnable and the
acceptance comparisons are falsifiable rather than hopeful.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .geo import GeoPoint, NeighborhoodGeometry, PolygonRing, haversine_distance_m

DEFAULT_CATEGORIES = ("bar", "eating", "club", "education", "health",
                      "office", "shop", "attraction")

_ADJECTIVES = ("blue", "green", "golden", "old", "new", "grand", "little",
               "royal", "sunny", "corner", "silver", "north")
_NOUNS = ("casa", "plaza", "garden", "palace", "studio", "market", "hall",
          "corner", "terrace", "yard", "arcade", "patio")
_DUP_SUFFIXES = ("city", "centre", "local")

_LAT0, _LON0 = 41.35, 2.10
_DLAT, _DLON = 0.009, 0.012       # roughly 1 km cells
_PLACE_MARGIN = 0.001             # keeps 40 m duplicate jitter inside the cell
_START_EPOCH = 1391385600         # 2014-02-03 00:00 UTC, a Monday
_MINUTES_PER_KM = 2.0


@dataclass(frozen=True)
class SynthConfig:
    n_neighborhoods: int = 30
    grid_cols: int | None = None      # default: near-square grid
    n_sources: int = 5
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    category_weights: tuple[float, ...] | None = None
    driving_categories: tuple[str, ...] = ("bar", "eating")
    coupling_weight: float = 1.0      # W* diagonal on driving categories
    coupling_cross: float = 0.0       # W* off-diagonal between driving pairs
    coupling_form: str = "linear"     # "linear" | "rectified" coupling sides
    coupling_range_km: float | None = None  # distance damping of the coupling
    linear_coupling_weight: float = 0.0     # extra plain bilinear channel
    origin_rect_coupling: float = 0.0       # rect(origin) x linear(dest) channel
    sym_rect_coupling: float = 0.0          # undamped rect x rect channel
    attract_weight: float = 0.0       # a* on driving categories
    beta_per_km: float = 0.4          # distance coefficient of the law
    uniform_floor: float = 0.0        # mixes a uniform off-diagonal component
                                      # into the law, keeping tail cells visited
    users: int = 2000
    days: int = 28
    events_per_user_day: float = 2.0  # Poisson mean of weekday visit events
    night_events_mean: float = 1.5    # Poisson mean of nightly home events
    places_per_neighborhood: float = 40.0
    neighborhood_tilt: float = 3.0    # Dirichlet concentration; lower = more contrast
    census_sigma: float = 0.35        # log-normal spread of neighborhood population
    duplicate_rate: float = 0.12
    exclusive_source: str | None = None  # source that alone hosts driving categories
    taxonomy_rate: float = 0.7
    prepaid_user_rate: float = 0.0
    roaming_record_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_neighborhoods, self.n_sources, self.users, self.days) < 1:
            raise ValueError("counts must be positive")
        if not 0.0 <= self.duplicate_rate <= 1.0:
            raise ValueError("duplicate_rate must be a probability")
        for c in self.driving_categories:
            if c not in self.categories:
                raise ValueError(f"driving category {c!r} not in categories")

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(f"src{k:02d}" for k in range(self.n_sources))

    def weights(self) -> np.ndarray:
        w = (np.ones(len(self.categories)) if self.category_weights is None
             else np.array(self.category_weights, dtype=np.float64))
        return w / w.sum()


@dataclass
class City:
    geoms: list[NeighborhoodGeometry]
    bts: dict[str, list[tuple[str, GeoPoint]]]         # neighborhood -> sites
    place_boxes: dict[str, tuple[float, float, float, float]]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(g.id for g in self.geoms)


def _tag_pool(category: str) -> tuple[tuple[str, ...], tuple[float, ...]]:
    return ((category, f"{category}hub", f"{category}spot", f"central {category}"),
            (0.4, 0.25, 0.25, 0.1))


def generate_city(config: SynthConfig, out_dir: str | Path) -> City:
    """Grid of non-overlapping rectangular neighborhoods with log-normal
    census counts and at least 3 uniformly placed BTS sites each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    n = config.n_neighborhoods
    cols = config.grid_cols if config.grid_cols else math.ceil(math.sqrt(n))

    geoms, bts, boxes = [], {}, {}
    features = []
    bts_rows = []
    for i in range(n):
        r, c = divmod(i, cols)
        lat_lo, lat_hi = _LAT0 + r * _DLAT, _LAT0 + (r + 1) * _DLAT
        lon_lo, lon_hi = _LON0 + c * _DLON, _LON0 + (c + 1) * _DLON
        nid = f"n{i:03d}"
        ring = PolygonRing((GeoPoint(lat_lo, lon_lo), GeoPoint(lat_lo, lon_hi),
                            GeoPoint(lat_hi, lon_hi), GeoPoint(lat_hi, lon_lo)))
        population = int(rng.lognormal(math.log(20_000), config.census_sigma))
        geom = NeighborhoodGeometry(id=nid, name=f"Neighborhood {i:03d}",
                                    boundary=ring, population=population)
        geoms.append(geom)
        boxes[nid] = (lat_lo + _PLACE_MARGIN, lat_hi - _PLACE_MARGIN,
                      lon_lo + _PLACE_MARGIN, lon_hi - _PLACE_MARGIN)

        n_bts = 3 + int(rng.integers(0, 2))
        sites = []
        for b in range(n_bts):
            lat = rng.uniform(lat_lo + _PLACE_MARGIN, lat_hi - _PLACE_MARGIN)
            lon = rng.uniform(lon_lo + _PLACE_MARGIN, lon_hi - _PLACE_MARGIN)
            bid = f"bts-{nid}-{b}"
            sites.append((bid, GeoPoint(lat, lon)))
            bts_rows.append((bid, lat, lon))
        bts[nid] = sites

        coords = [[lon_lo, lat_lo], [lon_hi, lat_lo], [lon_hi, lat_hi],
                  [lon_lo, lat_hi], [lon_lo, lat_lo]]
        features.append({
            "type": "Feature",
            "properties": {"id": nid, "name": geom.name, "population": population},
            "geometry": {"type": "Polygon", "coordinates": [coords]},
        })

    (out_dir / "geometries.geojson").write_text(
        json.dumps({"type": "FeatureCollection", "features": features}))
    with (out_dir / "bts.csv").open("w") as fh:
        fh.write("bts_id,lat,lon\n")
        for bid, lat, lon in bts_rows:
            fh.write(f"{bid},{lat!r},{lon!r}\n")

    city = City(geoms=geoms, bts=bts, place_boxes=boxes)
    _write_distance_csv(city, out_dir / "distances.csv")
    return city


def _write_distance_csv(city: City, path: Path):
    ids = city.ids
    cents = [g.centroid for g in city.geoms]
    n = len(ids)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            minutes = haversine_distance_m(cents[i], cents[j]) / 1000.0 * _MINUTES_PER_KM
            m[i, j] = m[j, i] = minutes
    with path.open("w") as fh:
        fh.write(",".join(ids) + "\n")
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


@dataclass
class PlacesOutput:
    duplicate_groups: list[list[list[str]]]        # [[source, source_place_id], ...]
    category_by_place: dict[str, str]              # "source/source_place_id" -> category
    tallies: dict[str, dict[str, int]]             # neighborhood -> category counts + total


def generate_places(config: SynthConfig, city: City, out_dir: str | Path) -> PlacesOutput:
    """Category-tagged places per neighborhood with planted cross-source
    duplicates: suffixed name variant, fresh tags from the same pool, and a
    location jitter of at most 40 m (inside the same cell)."""
    out_dir = Path(out_dir)
    (out_dir / "places").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    cats = config.categories
    weights = config.weights()
    sources = config.sources
    driving = set(config.driving_categories)
    if config.exclusive_source is not None and config.exclusive_source not in sources:
        raise ValueError("exclusive_source must be one of the generated sources")
    open_sources = [s for s in sources if s != config.exclusive_source]

    rows_by_source: dict[str, list[tuple]] = {s: [] for s in sources}
    groups: list[list[list[str]]] = []
    category_by_place: dict[str, str] = {}
    tallies = {nid: {c: 0 for c in cats} | {"total": 0} for nid in city.ids}
    g_index = 0

    for nid in city.ids:
        lat_lo, lat_hi, lon_lo, lon_hi = city.place_boxes[nid]
        n_places = max(3, int(rng.poisson(config.places_per_neighborhood)))
        props = rng.dirichlet(config.neighborhood_tilt * len(cats) * weights)
        drawn = rng.choice(len(cats), size=n_places, p=props)
        for ci in drawn:
            cat = cats[ci]
            uid = f"p{g_index:05d}"
            g_index += 1
            name = (f"{_ADJECTIVES[rng.integers(len(_ADJECTIVES))]} "
                    f"{_NOUNS[rng.integers(len(_NOUNS))]} {uid}")
            lat = rng.uniform(lat_lo, lat_hi)
            lon = rng.uniform(lon_lo, lon_hi)
            if config.exclusive_source is not None and cat in driving:
                source = config.exclusive_source
            elif config.exclusive_source is not None:
                source = open_sources[rng.integers(len(open_sources))]
            else:
                source = sources[rng.integers(len(sources))]
            spid = f"id{uid[1:]}"
            rows_by_source[source].append(
                (spid, name, lat, lon, _draw_tags(rng, cat), _draw_taxonomy(rng, config, cat)))
            category_by_place[f"{source}/{spid}"] = cat
            tallies[nid][cat] += 1
            tallies[nid]["total"] += 1

            can_duplicate = (cat not in driving or config.exclusive_source is None)
            if can_duplicate and rng.random() < config.duplicate_rate:
                pool = [s for s in (sources if config.exclusive_source is None else open_sources)
                        if s != source]
                if pool:
                    dup_source = pool[rng.integers(len(pool))]
                    dup_name = f"{name} {_DUP_SUFFIXES[rng.integers(len(_DUP_SUFFIXES))]}"
                    dlat, dlon = _jitter(rng, lat, max_m=40.0)
                    dup_spid = f"{spid}d"
                    rows_by_source[dup_source].append(
                        (dup_spid, dup_name, lat + dlat, lon + dlon,
                         _draw_tags(rng, cat), _draw_taxonomy(rng, config, cat)))
                    category_by_place[f"{dup_source}/{dup_spid}"] = cat
                    groups.append([[source, spid], [dup_source, dup_spid]])

    for source in sources:
        with (out_dir / "places" / f"{source}.csv").open("w") as fh:
            fh.write("source_place_id,name,lat,lon,tags,taxonomy\n")
            for spid, name, lat, lon, tags, taxonomy in rows_by_source[source]:
                fh.write(f"{spid},{name},{lat!r},{lon!r},{'|'.join(tags)},{'|'.join(taxonomy)}\n")

    return PlacesOutput(duplicate_groups=groups, category_by_place=category_by_place,
                        tallies=tallies)


def _draw_tags(rng: np.random.Generator, category: str) -> list[str]:
    pool, weights = _tag_pool(category)
    n_tags = 1 + min(int(rng.poisson(0.8)), 2)
    picks = rng.choice(len(pool), size=n_tags, p=weights)
    return list(dict.fromkeys(pool[i] for i in picks))


def _draw_taxonomy(rng: np.random.Generator, config: SynthConfig, category: str) -> list[str]:
    return [category] if rng.random() < config.taxonomy_rate else []


def _jitter(rng: np.random.Generator, lat: float, max_m: float) -> tuple[float, float]:
    theta = rng.uniform(0, 2 * math.pi)
    d = rng.uniform(5.0, max_m)
    dlat = d * math.cos(theta) / 111_320.0
    dlon = d * math.sin(theta) / (111_320.0 * math.cos(math.radians(lat)))
    return dlat, dlon


@dataclass
class MobilityLaw:
    categories: tuple[str, ...]
    w_matrix: np.ndarray     # (F, F) over [counts..., total]
    attract: np.ndarray      # (F,)
    beta_per_km: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    visit_probs: np.ndarray  # (N, N), zero diagonal


def build_law(config: SynthConfig, city: City,
              tallies: dict[str, dict[str, int]]) -> MobilityLaw:
    cats = config.categories
    x = np.array([[tallies[nid][c] for c in cats] + [tallies[nid]["total"]]
                  for nid in city.ids], dtype=np.float64)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    xt = np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0)

    f = len(cats) + 1
    w = np.zeros((f, f))
    a = np.zeros(f)
    driving_idx = [cats.index(c) for c in config.driving_categories]
    cross_ratio = (config.coupling_cross / config.coupling_weight
                   if config.coupling_weight else 0.0)
    for ci in driving_idx:
        w[ci, ci] = 1.0
        a[ci] = 1.0
        for cj in driving_idx:
            if ci != cj:
                w[ci, cj] = cross_ratio

    cents = [g.centroid for g in city.geoms]
    n = len(city.ids)
    dkm = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dkm[i, j] = dkm[j, i] = haversine_distance_m(cents[i], cents[j]) / 1000.0

    # each law term is standardized over the off-diagonal cells, so the
    # config weights are logit standard deviations and compose predictably
    side = np.maximum(xt, 0.0) if config.coupling_form == "rectified" else xt
    off = ~np.eye(n, dtype=bool)
    coupling = side @ w @ side.T
    if config.coupling_range_km is not None:
        coupling = coupling * np.exp(-dkm / config.coupling_range_km)
    rect = np.maximum(xt, 0.0)
    logits = (config.coupling_weight * _unit_scale(coupling, off)
              + config.linear_coupling_weight * _unit_scale(xt @ w @ xt.T, off)
              + config.origin_rect_coupling * _unit_scale(rect @ w @ xt.T, off)
              + config.sym_rect_coupling * _unit_scale(rect @ w @ rect.T, off)
              + config.attract_weight * _unit_scale(np.tile(xt @ a, (n, 1)), off)
              - config.beta_per_km * _unit_scale(dkm, off))
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    if config.uniform_floor > 0:
        floor = np.full((n, n), 1.0 / (n - 1))
        np.fill_diagonal(floor, 0.0)
        p = (1.0 - config.uniform_floor) * p + config.uniform_floor * floor
    return MobilityLaw(categories=cats, w_matrix=config.coupling_weight * w,
                       attract=config.attract_weight * a,
                       beta_per_km=config.beta_per_km, feature_mean=mu,
                       feature_std=sd, visit_probs=p)


def _unit_scale(m: np.ndarray, off: np.ndarray) -> np.ndarray:
    mu, sd = m[off].mean(), m[off].std()
    return (m - mu) / sd if sd > 0 else np.zeros_like(m)


@dataclass
class CdrOutput:
    homes: dict[str, str]               # every generated user -> true home
    excluded: dict[str, str]            # user -> filter reason
    visit_tally: np.ndarray             # N x N counts over retained users
    record_count: int


def generate_cdr(config: SynthConfig, city: City, law: MobilityLaw,
                 out_dir: str | Path) -> CdrOutput:
    """Per user-day: nightly events at one fixed home BTS (home drawn
    proportionally to census), plus weekday visit events at destinations
    drawn from the mobility law. Weekday-daytime placement keeps every
    record in the home-detection window at the home tower, so generated
    users are unambiguous by construction.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    ids = city.ids
    n = len(ids)
    pops = np.array([g.population for g in city.geoms], dtype=np.float64)
    records: list[tuple] = []   # (user, ts, bts, kind, duration, roaming, prepaid)

    user_home = rng.choice(n, size=config.users, p=pops / pops.sum())
    prepaid = rng.random(config.users) < config.prepaid_user_rate
    bts_index = {nid: city.bts[nid] for nid in ids}

    for u in range(config.users):
        uid = f"u{u:05d}"
        home = int(user_home[u])
        home_nid = ids[home]
        home_bts = bts_index[home_nid][int(rng.integers(len(bts_index[home_nid])))][0]
        night_counts = rng.poisson(config.night_events_mean, size=config.days)
        visit_counts = np.array([rng.poisson(config.events_per_user_day) if d % 7 < 5 else 0
                                 for d in range(config.days)])
        total_visits = int(visit_counts.sum())
        dests = rng.choice(n, size=total_visits, p=law.visit_probs[home]) \
            if total_visits else np.empty(0, dtype=int)
        vi = 0
        for day in range(config.days):
            day_start = _START_EPOCH + day * 86_400
            for _ in range(int(night_counts[day])):
                ts = day_start + 72_000 + int(rng.integers(14_400))
                records.append(_record(rng, config, uid, ts, home_bts, prepaid[u]))
            for _ in range(int(visit_counts[day])):
                j = int(dests[vi])
                vi += 1
                sites = bts_index[ids[j]]
                bts = sites[int(rng.integers(len(sites)))][0]
                ts = day_start + 32_400 + int(rng.integers(36_000))
                records.append(_record(rng, config, uid, ts, bts, prepaid[u]))

    with (out_dir / "cdr.csv").open("w") as fh:
        fh.write("user_id,timestamp,bts_id,kind,duration_s,roaming,prepaid\n")
        for uid, ts, bts, kind, dur, roam, pre in records:
            fh.write(f"{uid},{ts},{bts},{kind},{dur},{int(roam)},{int(pre)}\n")
    (out_dir / "cdr_meta.json").write_text(json.dumps({
        "tz_offset_hours": 0,
        "window_start": _START_EPOCH,
        "window_end": _START_EPOCH + config.days * 86_400,
    }))

    homes = {f"u{u:05d}": ids[int(user_home[u])] for u in range(config.users)}
    excluded, tally = _bookkeep(config, city, records, homes)
    return CdrOutput(homes=homes, excluded=excluded, visit_tally=tally,
                     record_count=len(records))


def _record(rng, config, uid, ts, bts, is_prepaid):
    r = rng.random()
    kind = "call" if r < 0.7 else ("sms" if r < 0.95 else "mms")
    duration = int(rng.integers(10, 600)) if kind == "call" else 0
    roaming = rng.random() < config.roaming_record_rate
    return (uid, ts, bts, kind, duration, roaming, bool(is_prepaid))


def _bookkeep(config: SynthConfig, city: City, records: list[tuple],
              homes: dict[str, str]) -> tuple[dict[str, str], np.ndarray]:
    """Independent pass over the emitted records applying the declared filter
    arithmetic (roaming/prepaid first, the 10-record minimum, then the
    empty-home-window discard) with the generator's known homes."""
    from .mobility import in_home_window

    ids = city.ids
    index = {nid: i for i, nid in enumerate(ids)}
    bts_to_nid = {bid: nid for nid in ids for bid, _ in city.bts[nid]}
    clean_count: dict[str, int] = {}
    window_count: dict[str, int] = {}
    any_seen: dict[str, bool] = {}
    for uid, ts, _, _, _, roaming, prepaid in records:
        any_seen[uid] = True
        if not roaming and not prepaid:
            clean_count[uid] = clean_count.get(uid, 0) + 1
            if in_home_window(ts):
                window_count[uid] = window_count.get(uid, 0) + 1

    excluded = {}
    for uid in homes:
        if not any_seen.get(uid):
            excluded[uid] = "filtered"
        elif clean_count.get(uid, 0) == 0:
            excluded[uid] = "filtered"
        elif clean_count[uid] < 10:
            excluded[uid] = "too_few_records"
        elif window_count.get(uid, 0) == 0:
            excluded[uid] = "ambiguous_home"

    tally = np.zeros((len(ids), len(ids)), dtype=np.int64)
    seen: set[tuple[str, int, str]] = set()
    for uid, ts, bts, _, _, roaming, prepaid in records:
        if uid in excluded or roaming or prepaid:
            continue
        visited = bts_to_nid[bts]
        home = homes[uid]
        if visited == home:
            continue
        day = (ts - _START_EPOCH) // 86_400
        key = (uid, day, visited)
        if key in seen:
            continue
        seen.add(key)
        tally[index[home], index[visited]] += 1
    return excluded, tally


def generate_all(config: SynthConfig, out_dir: str | Path) -> dict:
    """Run every generation stage and write ground_truth.json. Returns the
    ground-truth dictionary."""
    out_dir = Path(out_dir)
    city = generate_city(config, out_dir)
    places = generate_places(config, city, out_dir)
    law = build_law(config, city, places.tallies)
    cdr = generate_cdr(config, city, law, out_dir)

    truth = {
        "config": asdict(config),
        "neighborhoods": list(city.ids),
        "duplicate_groups": places.duplicate_groups,
        "category_by_place": places.category_by_place,
        "neighborhood_category_counts": places.tallies,
        "law": {
            "categories": list(law.categories),
            "w_matrix": law.w_matrix.tolist(),
            "attract": law.attract.tolist(),
            "beta_per_km": law.beta_per_km,
            "feature_mean": law.feature_mean.tolist(),
            "feature_std": law.feature_std.tolist(),
            "driving_categories": list(config.driving_categories),
        },
        "homes": cdr.homes,
        "excluded_users": cdr.excluded,
        "visit_tally": cdr.visit_tally.tolist(),
        "record_count": cdr.record_count,
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(truth))
    return truth
