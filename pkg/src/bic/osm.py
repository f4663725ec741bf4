"""OSM XML ingest: closed building ways become footprint records with class labels.

Input is plain OSM XML (.osm). Multipolygon relations are skipped and counted;
ways with unresolved node refs or an open ring are skipped per way, never
fatally. Tag-to-class mapping is an exact table over the eight classes; any
other building value (including "yes") yields an unlabeled record.
"""

from __future__ import annotations

import enum
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Optional

from .geo import FootprintPolygon, GeoPoint


class MalformedXml(ValueError):
    """The input stream is not well-formed XML."""


class BuildingClass(enum.Enum):
    """The eight building classes, in stable (alphabetical) ordinal order."""

    APARTMENT = "apartment"
    CHURCH = "church"
    GARAGE = "garage"
    HOUSE = "house"
    INDUSTRIAL = "industrial"
    OFFICE_BUILDING = "office_building"
    RETAIL = "retail"
    ROOF = "roof"


BUILDING_LABELS: tuple[str, ...] = tuple(c.value for c in BuildingClass)

# Exact, conservative tag table; anything else carries no class information.
_TAG_TABLE = {
    "apartments": BuildingClass.APARTMENT,
    "church": BuildingClass.CHURCH,
    "garage": BuildingClass.GARAGE,
    "garages": BuildingClass.GARAGE,
    "house": BuildingClass.HOUSE,
    "industrial": BuildingClass.INDUSTRIAL,
    "office": BuildingClass.OFFICE_BUILDING,
    "retail": BuildingClass.RETAIL,
    "roof": BuildingClass.ROOF,
}


def map_tag_to_class(raw_tag: str) -> Optional[BuildingClass]:
    """Map an OSM building=* value to a class; total, case-insensitive, trimmed."""
    if raw_tag is None:
        return None
    return _TAG_TABLE.get(str(raw_tag).strip().lower())


@dataclass(frozen=True)
class BuildingRecord:
    """One building: footprint, original tag, and optional ground-truth class."""

    id: int
    footprint: FootprintPolygon
    raw_tag: str
    truth_label: Optional[BuildingClass] = None

    @property
    def centroid(self) -> GeoPoint:
        return self.footprint.centroid


@dataclass
class ParseReport:
    parsed: int = 0
    skipped_unclosed: int = 0
    skipped_unresolved: int = 0
    skipped_invalid: int = 0
    skipped_relations: int = 0
    unmapped: int = 0
    out_of_bbox: int = 0


@dataclass(frozen=True)
class BBox:
    """South/west/north/east bounds in degrees."""

    south: float
    west: float
    north: float
    east: float

    def contains(self, p: GeoPoint) -> bool:
        return self.south <= p.lat <= self.north and self.west <= p.lon <= self.east

    @classmethod
    def parse(cls, text: str) -> "BBox":
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"bbox needs S,W,N,E, got {text!r}")
        return cls(*parts)


def parse_osm(
    source: IO[bytes] | str | Path,
    bbox: Optional[BBox] = None,
) -> tuple[list[BuildingRecord], ParseReport]:
    """Parse an OSM XML stream into BuildingRecords, sorted by way id.

    One record per closed way carrying a building=* tag (centroid inside bbox
    when given). Per-way problems are counted in the report; only malformed
    XML is fatal.
    """
    report = ParseReport()
    nodes: dict[int, GeoPoint] = {}
    records: list[BuildingRecord] = []
    try:
        for _, elem in ET.iterparse(source, events=("end",)):
            if elem.tag == "node":
                try:
                    nodes[int(elem.get("id"))] = GeoPoint(
                        float(elem.get("lat")), float(elem.get("lon"))
                    )
                except (TypeError, ValueError):
                    pass
            elif elem.tag == "way":
                _ingest_way(elem, nodes, bbox, records, report)
                elem.clear()
            elif elem.tag == "relation":
                tags = {t.get("k"): t.get("v") for t in elem.findall("tag")}
                if tags.get("type") == "multipolygon" and "building" in tags:
                    report.skipped_relations += 1
                elem.clear()
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    records.sort(key=lambda r: r.id)
    return records, report


def _ingest_way(
    elem: ET.Element,
    nodes: dict[int, GeoPoint],
    bbox: Optional[BBox],
    records: list[BuildingRecord],
    report: ParseReport,
) -> None:
    tags = {t.get("k"): t.get("v") for t in elem.findall("tag")}
    raw_tag = tags.get("building")
    if raw_tag is None:
        return
    refs = [int(nd.get("ref")) for nd in elem.findall("nd")]
    if any(ref not in nodes for ref in refs):
        report.skipped_unresolved += 1
        return
    if len(refs) < 4 or refs[0] != refs[-1]:
        report.skipped_unclosed += 1
        return
    try:
        footprint = FootprintPolygon(tuple(nodes[ref] for ref in refs))
    except ValueError:
        report.skipped_invalid += 1
        return
    if bbox is not None and not bbox.contains(footprint.centroid):
        report.out_of_bbox += 1
        return
    label = map_tag_to_class(raw_tag)
    if label is None:
        report.unmapped += 1
    records.append(
        BuildingRecord(
            id=int(elem.get("id")),
            footprint=footprint,
            raw_tag=raw_tag,
            truth_label=label,
        )
    )
    report.parsed += 1


def write_buildings_jsonl(records: Iterable[BuildingRecord], path: Path) -> None:
    """Write one JSON object per building: id, [lat, lon] ring, raw_tag, label."""
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            row = {
                "id": rec.id,
                "ring": [[p.lat, p.lon] for p in rec.footprint.ring],
                "raw_tag": rec.raw_tag,
                "label": rec.truth_label.value if rec.truth_label else None,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_buildings_jsonl(path: Path) -> list[BuildingRecord]:
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(
                BuildingRecord(
                    id=row["id"],
                    footprint=FootprintPolygon(
                        tuple(GeoPoint(lat, lon) for lat, lon in row["ring"])
                    ),
                    raw_tag=row["raw_tag"],
                    truth_label=BuildingClass(row["label"]) if row["label"] else None,
                )
            )
    return records
