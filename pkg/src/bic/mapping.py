"""Map products: footprint maps with confidence opacity, point maps, density grids.

GeoJSON output follows RFC 7946: coordinates are [lon, lat], rings closed.
Confidence maps to fill opacity with a floor of 0.15 so low-confidence
buildings stay visible in a viewer; colors come from a fixed class table and
rendering is left to external tools.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .fusion import BuildingPrediction, UnclassifiedBuilding
from .geo import GeoPoint
from .osm import BuildingRecord

OPACITY_FLOOR = 0.15

CLASS_COLORS = {
    "apartment": "#e6194b",
    "church": "#911eb4",
    "garage": "#9a6324",
    "house": "#3cb44b",
    "industrial": "#f58231",
    "office_building": "#4363d8",
    "retail": "#42d4f4",
    "roof": "#808000",
    "unclassified": "#a9a9a9",
}


class EmptyBbox(ValueError):
    """Density grid requested over a degenerate bounding box."""


class IoError(OSError):
    """Map document could not be written."""


def confidence_to_opacity(confidence: float, floor: float = OPACITY_FLOOR) -> float:
    return min(1.0, max(floor, confidence))


def _write_geojson(doc: dict, path: Path) -> None:
    try:
        Path(path).write_text(
            json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoError(str(exc)) from exc


def emit_footprint_map(
    buildings: Sequence[BuildingRecord],
    predictions: Sequence[BuildingPrediction],
    unclassified: Sequence[UnclassifiedBuilding],
    path: Path,
    *,
    opacity_floor: float = OPACITY_FLOOR,
) -> dict:
    """One Polygon feature per building, fill opacity tracking fused confidence."""
    by_id = {p.building_id: p for p in predictions}
    features = []
    for b in sorted(buildings, key=lambda b: b.id):
        pred = by_id.get(b.id)
        if pred is not None:
            cls = pred.label.value
            confidence: Optional[float] = pred.confidence
            opacity = confidence_to_opacity(pred.confidence, opacity_floor)
        else:
            cls = "unclassified"
            confidence = None
            opacity = opacity_floor
        props = {
            "building_id": b.id,
            "class": cls,
            "confidence": confidence,
            "opacity": opacity,
            "color": CLASS_COLORS.get(cls, CLASS_COLORS["unclassified"]),
        }
        if b.truth_label is not None:
            props["truth"] = b.truth_label.value
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[p.lon, p.lat] for p in b.footprint.ring]],
                },
                "properties": props,
            }
        )
    doc = {
        "type": "FeatureCollection",
        "features": features,
        "colors": CLASS_COLORS,
    }
    _write_geojson(doc, path)
    return doc


def emit_point_map(
    predictions: Sequence[BuildingPrediction],
    buildings: Sequence[BuildingRecord],
    path: Path,
) -> dict:
    """One Point feature per classified building, placed at the footprint centroid."""
    centroids = {b.id: b.footprint.centroid for b in buildings}
    features = []
    for p in sorted(predictions, key=lambda p: p.building_id):
        c = centroids[p.building_id]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [c.lon, c.lat]},
                "properties": {
                    "class": p.label.value,
                    "confidence": p.confidence,
                    "color": CLASS_COLORS[p.label.value],
                },
            }
        )
    doc = {"type": "FeatureCollection", "features": features, "colors": CLASS_COLORS}
    _write_geojson(doc, path)
    return doc


@dataclass(frozen=True)
class DensityGrid:
    """Per-class prediction counts binned over a lat/lon grid."""

    south: float
    west: float
    north: float
    east: float
    cell_size_deg: float
    counts: tuple[tuple[int, ...], ...]  # counts[lat_bin][lon_bin], origin southwest

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def as_dict(self) -> dict:
        return {
            "bbox": [self.south, self.west, self.north, self.east],
            "cell_size_deg": self.cell_size_deg,
            "counts": [list(row) for row in self.counts],
        }


def density_grid(
    points: Sequence[GeoPoint],
    south: float,
    west: float,
    north: float,
    east: float,
    cell_size_deg: float,
) -> DensityGrid:
    """Bin points by floor((coord - origin) / cell); the upper edge joins the last cell."""
    if cell_size_deg <= 0:
        raise ValueError(f"cell size must be positive, got {cell_size_deg}")
    if north <= south or east <= west:
        raise EmptyBbox(f"degenerate bbox: S{south} W{west} N{north} E{east}")
    n_rows = max(1, math.ceil((north - south) / cell_size_deg - 1e-12))
    n_cols = max(1, math.ceil((east - west) / cell_size_deg - 1e-12))
    grid = [[0] * n_cols for _ in range(n_rows)]
    for p in points:
        if not (south <= p.lat <= north and west <= p.lon <= east):
            continue
        row = min(int((p.lat - south) // cell_size_deg), n_rows - 1)
        col = min(int((p.lon - west) // cell_size_deg), n_cols - 1)
        grid[row][col] += 1
    return DensityGrid(
        south=south,
        west=west,
        north=north,
        east=east,
        cell_size_deg=cell_size_deg,
        counts=tuple(tuple(row) for row in grid),
    )


def emit_density_grids(
    predictions: Sequence[BuildingPrediction],
    buildings: Sequence[BuildingRecord],
    out_dir: Path,
    cell_size_deg: float = 0.005,
) -> dict[str, DensityGrid]:
    """One density grid per class that has predictions, over the city bbox."""
    centroids = {b.id: b.footprint.centroid for b in buildings}
    pts = [(p.label.value, centroids[p.building_id]) for p in predictions]
    if not pts:
        return {}
    lats = [c.lat for _, c in pts]
    lons = [c.lon for _, c in pts]
    pad = cell_size_deg / 2
    south, north = min(lats) - pad, max(lats) + pad
    west, east = min(lons) - pad, max(lons) + pad
    grids: dict[str, DensityGrid] = {}
    for cls in sorted({cls for cls, _ in pts}):
        grid = density_grid(
            [c for lbl, c in pts if lbl == cls], south, west, north, east, cell_size_deg
        )
        grids[cls] = grid
        out = Path(out_dir) / f"density_{cls}.json"
        out.write_text(json.dumps(grid.as_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return grids
