"""Place ingestion and cross-source duplicate resolution.

Duplicates are found by shared name tokens (bounded by a group-size
threshold so popular area names do not trigger merges) combined with a
proximity rule, then closed transitively with union-find.
"""
from __future__ import annotations

import csv
import json
import unicodedata
from dataclasses import dataclass
from pathlib import Path

from .geo import GeoPoint, haversine_distance_m

MERGE_RADIUS_M = 50.0


@dataclass(frozen=True)
class RawPlace:
    source: str
    source_place_id: str
    name: str
    location: GeoPoint
    tags: tuple[str, ...] = ()
    taxonomy_path: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError(f"empty name for place {self.source}/{self.source_place_id}")


@dataclass(frozen=True)
class CanonicalPlace:
    canonical_id: str
    names: tuple[str, ...]
    location: GeoPoint        # location of the earliest-ingested member
    tags: tuple[str, ...]     # union of member tags plus taxonomy terms
    sources: tuple[str, ...]
    member_count: int

    def __post_init__(self):
        if self.member_count < 1:
            raise ValueError("member_count must be positive")
        if not self.sources:
            raise ValueError("canonical place needs at least one source")


def normalize_name(name: str) -> list[str]:
    """Lowercase, fold diacritics, strip punctuation, split on whitespace.

    All-punctuation input yields an empty list; callers treat such places
    as unmergeable.
    """
    folded = unicodedata.normalize("NFKD", name)
    folded = "".join(ch for ch in folded if not unicodedata.combining(ch))
    cleaned = "".join(ch if ch.isalnum() else " " for ch in folded.lower())
    return [tok for tok in cleaned.split() if tok]


def candidate_groups(places: list[RawPlace], source_count: int) -> dict[str, list[int]]:
    """Token -> indices of places whose normalized names contain it.

    An identical place cannot appear more times than the number of sources,
    so groups larger than `source_count` are popular-name noise and dropped.
    """
    groups: dict[str, list[int]] = {}
    for idx, place in enumerate(places):
        for tok in set(normalize_name(place.name)):
            groups.setdefault(tok, []).append(idx)
    return {tok: idxs for tok, idxs in groups.items() if len(idxs) <= source_count}


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # anchor components at the smallest ingestion index
            if ra > rb:
                ra, rb = rb, ra
            self.parent[rb] = ra


def resolve_duplicates(places: list[RawPlace], radius_m: float = MERGE_RADIUS_M,
                       source_count: int | None = None) -> list[CanonicalPlace]:
    """Merge places that share a retained name token and lie within radius_m.

    Merging is transitive (union-find over qualifying pairs), which makes the
    result independent of input order up to canonical_id relabeling. Each
    component becomes one CanonicalPlace ordered by its smallest member
    ingestion index.
    """
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    if source_count is None:
        source_count = len({p.source for p in places})

    uf = _UnionFind(len(places))
    for idxs in candidate_groups(places, source_count).values():
        for i_pos, i in enumerate(idxs):
            for j in idxs[i_pos + 1:]:
                if haversine_distance_m(places[i].location, places[j].location) <= radius_m:
                    uf.union(i, j)

    components: dict[int, list[int]] = {}
    for idx in range(len(places)):
        components.setdefault(uf.find(idx), []).append(idx)

    out = []
    for rank, root in enumerate(sorted(components)):
        members = sorted(components[root])
        tag_union: set[str] = set()
        for m in members:
            tag_union.update(places[m].tags)
            tag_union.update(places[m].taxonomy_path)
        out.append(
            CanonicalPlace(
                canonical_id=f"cp{rank:06d}",
                names=tuple(dict.fromkeys(places[m].name for m in members)),
                location=places[members[0]].location,
                tags=tuple(sorted(tag_union)),
                sources=tuple(sorted({places[m].source for m in members})),
                member_count=len(members),
            )
        )
    return out


def load_source_csv(path: str | Path, source: str | None = None) -> list[RawPlace]:
    """Read one per-source CSV: source_place_id,name,lat,lon,tags,taxonomy
    with `tags` and `taxonomy` |-separated. Source defaults to the file stem.
    """
    path = Path(path)
    source = source if source is not None else path.stem
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"source_place_id", "name", "lat", "lon", "tags", "taxonomy"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: expected header {sorted(required)}")
        for row_no, row in enumerate(reader, start=2):
            try:
                out.append(
                    RawPlace(
                        source=source,
                        source_place_id=row["source_place_id"],
                        name=row["name"],
                        location=GeoPoint(float(row["lat"]), float(row["lon"])),
                        tags=tuple(t for t in row["tags"].split("|") if t),
                        taxonomy_path=tuple(t for t in row["taxonomy"].split("|") if t),
                    )
                )
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}: bad row {row_no}: {exc}") from exc
    return out


def write_canonical_jsonl(places: list[CanonicalPlace], path: str | Path):
    with Path(path).open("w") as fh:
        for p in places:
            fh.write(json.dumps({
                "canonical_id": p.canonical_id,
                "names": list(p.names),
                "lat": p.location.lat,
                "lon": p.location.lon,
                "tags": list(p.tags),
                "sources": list(p.sources),
                "member_count": p.member_count,
            }) + "\n")


def read_canonical_jsonl(path: str | Path) -> list[CanonicalPlace]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            d = json.loads(line)
            out.append(CanonicalPlace(
                canonical_id=d["canonical_id"],
                names=tuple(d["names"]),
                location=GeoPoint(d["lat"], d["lon"]),
                tags=tuple(d["tags"]),
                sources=tuple(d["sources"]),
                member_count=d["member_count"],
            ))
    return out
