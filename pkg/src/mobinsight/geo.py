"""Spatial primitives: great-circle distance, polygon membership, nearest-site
assignment, and polygon centroids.

All functions are pure and operate on immutable inputs, so they are safe to
call from worker pools without locking.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class GeoPoint:
    """A (lat, lon) pair in degrees, validated at construction."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class PolygonRing:
    """Ordered vertex list with implicit closure (first vertex is not repeated).

    Rings are validated as simple (non-self-intersecting) with positive area.
    """

    vertices: tuple[GeoPoint, ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError("polygon ring needs at least 3 vertices")
        first, last = self.vertices[0], self.vertices[-1]
        if first.lat == last.lat and first.lon == last.lon:
            raise ValueError("ring closure must be implicit (first vertex repeated)")
        if _self_intersects(self.vertices):
            raise ValueError("polygon ring is self-intersecting")
        if abs(_shoelace_area(self._projected())) <= 0.0:
            raise ValueError("polygon ring has zero area")

    def _projected(self) -> list[tuple[float, float]]:
        """Equirectangular local projection: x = lon * cos(lat0), y = lat."""
        lat0 = sum(v.lat for v in self.vertices) / len(self.vertices)
        c = math.cos(math.radians(lat0))
        return [(v.lon * c, v.lat) for v in self.vertices]

    def bbox(self) -> tuple[float, float, float, float]:
        lats = [v.lat for v in self.vertices]
        lons = [v.lon for v in self.vertices]
        return min(lats), min(lons), max(lats), max(lons)


@dataclass(frozen=True)
class NeighborhoodGeometry:
    id: str
    name: str
    boundary: PolygonRing
    population: int
    centroid: GeoPoint = field(init=False)

    def __post_init__(self):
        if self.population < 0:
            raise ValueError(f"negative population for {self.id}")
        c = centroid(self.boundary)
        min_lat, min_lon, max_lat, max_lon = self.boundary.bbox()
        if not (min_lat <= c.lat <= max_lat and min_lon <= c.lon <= max_lon):
            raise ValueError(f"centroid of {self.id} falls outside bounding box")
        object.__setattr__(self, "centroid", c)


def haversine_distance_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a spherical Earth (R = 6 371 000 m)."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def point_in_polygon(p: GeoPoint, ring: PolygonRing) -> bool:
    """Ray-casting membership test. Points on the boundary count as inside,
    which keeps assignment deterministic at shared borders.
    """
    n = len(ring.vertices)
    x, y = p.lon, p.lat
    verts = [(v.lon, v.lat) for v in ring.vertices]

    for i in range(n):
        if _on_segment(verts[i], verts[(i + 1) % n], (x, y)):
            return True

    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = verts[i]
        xj, yj = verts[j]
        if (yi > y) != (yj > y):
            x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def assign_nearest_site(p: GeoPoint, sites: list[tuple[str, GeoPoint]]) -> str:
    """Id of the haversine-nearest site; ties resolve to the smallest id.

    Nearest-site membership is exactly Voronoi-cell membership, so no
    polygon construction is needed.
    """
    if not sites:
        raise ValueError("no sites")
    best_id, best_d = None, math.inf
    for sid, loc in sites:
        d = haversine_distance_m(p, loc)
        if d < best_d or (d == best_d and (best_id is None or sid < best_id)):
            best_id, best_d = sid, d
    return best_id


def centroid(ring: PolygonRing) -> GeoPoint:
    """Area-weighted planar centroid on the ring's equirectangular projection."""
    pts = ring._projected()
    area2 = _shoelace_area(pts) * 2.0
    if area2 == 0.0:
        raise ValueError("degenerate ring: zero area")
    cx = cy = 0.0
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        cross = x0 * y1 - x1 * y0
        cx += (x0 + x1) * cross
        cy += (y0 + y1) * cross
    cx /= 3.0 * area2
    cy /= 3.0 * area2
    lat0 = sum(v.lat for v in ring.vertices) / len(ring.vertices)
    return GeoPoint(lat=cy, lon=cx / math.cos(math.radians(lat0)))


def load_geometries(path: str | Path) -> list[NeighborhoodGeometry]:
    """Load neighborhoods from a GeoJSON FeatureCollection.

    Each feature must be a Polygon and carry `id`, `name`, `population`
    properties; only the outer ring is used.
    """
    data = json.loads(Path(path).read_text())
    if data.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    out = []
    for feat in data["features"]:
        props = feat["properties"]
        geom = feat["geometry"]
        if geom["type"] != "Polygon":
            raise ValueError(f"feature {props.get('id')}: only Polygon geometry is supported")
        coords = geom["coordinates"][0]
        # GeoJSON repeats the first vertex; PolygonRing closure is implicit.
        if coords[0] == coords[-1]:
            coords = coords[:-1]
        ring = PolygonRing(tuple(GeoPoint(lat=c[1], lon=c[0]) for c in coords))
        out.append(
            NeighborhoodGeometry(
                id=str(props["id"]),
                name=str(props["name"]),
                boundary=ring,
                population=int(props["population"]),
            )
        )
    return out


def _shoelace_area(pts: list[tuple[float, float]]) -> float:
    n = len(pts)
    s = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s / 2.0


def _on_segment(a: tuple[float, float], b: tuple[float, float], p: tuple[float, float],
                eps: float = 1e-12) -> bool:
    (ax, ay), (bx, by), (px, py) = a, b, p
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if abs(cross) > eps:
        return False
    dot = (px - ax) * (bx - ax) + (py - ay) * (by - ay)
    sq_len = (bx - ax) ** 2 + (by - ay) ** 2
    return -eps <= dot <= sq_len + eps


def _segments_intersect(p1, p2, p3, p4) -> bool:
    """Proper intersection test for open segments, ignoring shared endpoints."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-15:
            return 0
        return 1 if v > 0 else -1

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def _self_intersects(vertices: tuple[GeoPoint, ...]) -> bool:
    pts = [(v.lon, v.lat) for v in vertices]
    n = len(pts)
    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex
            b1, b2 = pts[j], pts[(j + 1) % n]
            if _segments_intersect(a1, a2, b1, b2):
                return True
    return False
