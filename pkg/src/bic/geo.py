"""Geodetic primitives: WGS84 points, great-circle math, footprint polygons, spatial index.

All distances use the spherical (haversine) model with the mean Earth radius;
building-scale distances make the ellipsoidal correction negligible. Polygon
area and centroid are computed in a local equirectangular plane about the ring
mean, which keeps the shoelace formula exact to first order for footprints.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

EARTH_RADIUS_M = 6_371_008.8  # mean Earth radius
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0

# Shoelace area (in squared degrees of the local plane) below which a ring is
# treated as collapsed.
DEGENERATE_AREA_DEG2 = 1e-10


class CoincidentPoints(ValueError):
    """Bearing requested between two identical points."""


class DegeneratePolygon(ValueError):
    """Ring area underflows the local-plane threshold."""


@dataclass(frozen=True)
class GeoPoint:
    """A WGS84 coordinate in decimal degrees."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in meters.

    Symmetric and non-negative; exact zero for identical inputs.
    """
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return EARTH_RADIUS_M * 2.0 * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def initial_bearing(origin: GeoPoint, target: GeoPoint) -> float:
    """Initial great-circle bearing from origin to target, degrees in [0, 360).

    0 is due north, clockwise positive. Raises CoincidentPoints when both
    points are identical (the caller decides a default heading).
    """
    if origin == target:
        raise CoincidentPoints(f"bearing undefined from a point to itself: {origin}")
    phi1 = math.radians(origin.lat)
    phi2 = math.radians(target.lat)
    dlam = math.radians(target.lon - origin.lon)
    x = math.sin(dlam) * math.cos(phi2)
    y = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return (math.degrees(math.atan2(x, y)) + 360.0) % 360.0


def destination_point(start: GeoPoint, bearing_deg: float, distance_m: float) -> GeoPoint:
    """Point reached by travelling distance_m from start along the given bearing."""
    phi1 = math.radians(start.lat)
    lam1 = math.radians(start.lon)
    theta = math.radians(bearing_deg)
    delta = distance_m / EARTH_RADIUS_M
    phi2 = math.asin(
        math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    )
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    lon = math.degrees(lam2)
    if lon > 180.0:
        lon -= 360.0
    elif lon < -180.0:
        lon += 360.0
    return GeoPoint(math.degrees(phi2), lon)


def _local_plane(ring: Sequence[GeoPoint]) -> list[tuple[float, float]]:
    """Project ring points to a tangent plane (degree units) about the ring mean."""
    lat0 = sum(p.lat for p in ring) / len(ring)
    lon0 = sum(p.lon for p in ring) / len(ring)
    coslat = math.cos(math.radians(lat0))
    return [((p.lon - lon0) * coslat, p.lat - lat0) for p in ring]


def _shoelace(xy: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area of a closed ring (first point == last point)."""
    acc = 0.0
    for (x1, y1), (x2, y2) in zip(xy, xy[1:]):
        acc += x1 * y2 - x2 * y1
    return acc / 2.0


@dataclass(frozen=True)
class FootprintPolygon:
    """A closed building outline: ordered ring of GeoPoints, first == last."""

    ring: tuple[GeoPoint, ...]

    def __post_init__(self) -> None:
        ring = tuple(self.ring)
        object.__setattr__(self, "ring", ring)
        if len(ring) < 4:
            raise ValueError(f"ring needs at least 4 points, got {len(ring)}")
        if ring[0] != ring[-1]:
            raise ValueError("ring is not closed (first point != last point)")
        if len(set(ring)) < 3:
            raise ValueError("ring needs at least 3 distinct vertices")
        if self.area_sqm <= 0.0:
            raise ValueError("ring encloses no area")

    @cached_property
    def area_sqm(self) -> float:
        """Enclosed area in square meters (local tangent plane)."""
        plane = _local_plane(self.ring)
        scaled = [(x * METERS_PER_DEGREE, y * METERS_PER_DEGREE) for x, y in plane]
        return abs(_shoelace(scaled))

    @cached_property
    def centroid(self) -> GeoPoint:
        return polygon_centroid(self)


def polygon_centroid(poly: FootprintPolygon) -> GeoPoint:
    """Area-weighted (shoelace) centroid of the ring, reprojected to lat/lon.

    Raises DegeneratePolygon when the local-plane area underflows.
    """
    ring = poly.ring
    lat0 = sum(p.lat for p in ring) / len(ring)
    lon0 = sum(p.lon for p in ring) / len(ring)
    coslat = math.cos(math.radians(lat0))
    xy = [((p.lon - lon0) * coslat, p.lat - lat0) for p in ring]
    area = _shoelace(xy)
    if abs(area) < DEGENERATE_AREA_DEG2:
        raise DegeneratePolygon(f"ring area {abs(area):.3e} deg^2 underflows threshold")
    cx = 0.0
    cy = 0.0
    for (x1, y1), (x2, y2) in zip(xy, xy[1:]):
        cross = x1 * y2 - x2 * y1
        cx += (x1 + x2) * cross
        cy += (y1 + y2) * cross
    cx /= 6.0 * area
    cy /= 6.0 * area
    return GeoPoint(lat0 + cy, lon0 + cx / coslat)


def _on_segment(px: float, py: float, x1: float, y1: float, x2: float, y2: float) -> bool:
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    if abs(cross) > 1e-12:
        return False
    return min(x1, x2) - 1e-12 <= px <= max(x1, x2) + 1e-12 and (
        min(y1, y2) - 1e-12 <= py <= max(y1, y2) + 1e-12
    )


def point_in_polygon(p: GeoPoint, poly: FootprintPolygon) -> bool:
    """Even-odd ray-casting test in the lon/lat plane; boundary points count as inside."""
    px, py = p.lon, p.lat
    ring = poly.ring
    for a, b in zip(ring, ring[1:]):
        if _on_segment(px, py, a.lon, a.lat, b.lon, b.lat):
            return True
    inside = False
    for a, b in zip(ring, ring[1:]):
        y1, y2 = a.lat, b.lat
        if (y1 > py) == (y2 > py):
            continue
        x_cross = a.lon + (py - y1) / (y2 - y1) * (b.lon - a.lon)
        if px < x_cross:
            inside = not inside
    return inside


class SpatialIndex:
    """Nearest-neighbor index over (identifier, GeoPoint) entries.

    Build-once, query-many. Entries are kept sorted by latitude; a nearest
    query expands a latitude window around the query point and stops once the
    latitude separation alone (a lower bound on great-circle distance) exceeds
    the best candidate. Ties on distance resolve to the smaller identifier
    string so results are deterministic.
    """

    def __init__(self, entries: Iterable[tuple[object, GeoPoint]] = ()) -> None:
        rows = sorted(((point.lat, str(ident), ident, point) for ident, point in entries))
        self._lats = [row[0] for row in rows]
        self._rows = rows

    def __len__(self) -> int:
        return len(self._rows)

    def nearest(self, q: GeoPoint, max_radius_m: float) -> Optional[tuple[object, float]]:
        """Entry with minimal haversine distance to q, if within max_radius_m."""
        if not self._rows:
            return None
        best_key: Optional[tuple[float, str]] = None
        best: Optional[tuple[object, float]] = None
        start = bisect.bisect_left(self._lats, q.lat)

        def consider(i: int, limit: float) -> bool:
            # Latitude separation alone bounds the distance from below; once it
            # exceeds the limit, no farther row in this direction can win.
            nonlocal best_key, best
            lat_sep_m = abs(self._lats[i] - q.lat) * METERS_PER_DEGREE
            if lat_sep_m > limit + 1e-9:
                return False
            _, id_str, ident, point = self._rows[i]
            d = haversine_m(q, point)
            if d <= max_radius_m:
                key = (d, id_str)
                if best_key is None or key < best_key:
                    best_key = key
                    best = (ident, d)
            return True

        lo = start - 1
        hi = start
        while lo >= 0 or hi < len(self._rows):
            limit = min(max_radius_m, best_key[0]) if best_key else max_radius_m
            advanced = False
            if hi < len(self._rows):
                if consider(hi, limit):
                    hi += 1
                    advanced = True
                else:
                    hi = len(self._rows)
            if lo >= 0:
                limit = min(max_radius_m, best_key[0]) if best_key else max_radius_m
                if consider(lo, limit):
                    lo -= 1
                    advanced = True
                else:
                    lo = -1
            if not advanced:
                break
        return best
