"""Decision core: scene-whitelist outlier removal, per-building fusion, spatial linking.

A building's kept image distributions are combined by arithmetic mean over the
eight class probabilities and the fused label is the argmax (earliest label on
ties). Fusion uses exact summation so the result is invariant under any
permutation of the inputs. Buildings end up with exactly one of a prediction
or an unclassified marker, never both, never neither.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .gateway import (
    ROLE_BUILDING,
    ROLE_SCENE,
    Backend,
    ClassDistribution,
    SCENE_CATEGORIES,
    classify_batch,
    top1,
)
from .geo import GeoPoint, SpatialIndex
from .imagery import FetchStatus, ImageRecord, StageStatus, with_stage_status
from .osm import BUILDING_LABELS, BuildingClass, BuildingRecord


class AlignmentError(ValueError):
    """Parallel record/distribution lists differ in length."""


class EmptyEvidence(ValueError):
    """Fusion was asked to combine zero distributions."""


class UnclassifiedReason(enum.Enum):
    NO_IMAGERY = "no_imagery"
    ALL_FILTERED = "all_filtered"


@dataclass(frozen=True)
class BuildingPrediction:
    """Fused class decision for one building."""

    building_id: int
    label: BuildingClass
    confidence: float
    images_used: int
    averaged: ClassDistribution

    def __post_init__(self) -> None:
        winner, winner_prob = top1(self.averaged)
        if self.label.value != winner:
            raise ValueError(f"label {self.label.value} is not the argmax ({winner})")
        if self.confidence != winner_prob:
            raise ValueError(f"confidence {self.confidence} != averaged max {winner_prob}")
        if self.images_used < 1:
            raise ValueError("a prediction needs at least one image")


@dataclass(frozen=True)
class UnclassifiedBuilding:
    building_id: int
    reason: UnclassifiedReason


@dataclass
class RunReport:
    """Per-stage tallies for one classification run."""

    buildings: int = 0
    images_fetched: int = 0
    images_kept: int = 0
    images_rejected: int = 0
    predicted: int = 0
    unclassified_no_imagery: int = 0
    unclassified_all_filtered: int = 0

    def as_dict(self) -> dict:
        return dict(vars(self))


def filter_outliers(
    records: Sequence[ImageRecord],
    scene_dists: Sequence[Optional[ClassDistribution]],
    *,
    whitelist: Sequence[str] = SCENE_CATEGORIES,
    top_k: int = 1,
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Partition records into (kept, rejected) by scene whitelist membership.

    A record is kept when any of the top_k scene labels (default: top-1 only)
    is in the whitelist. Records whose scene classification failed cannot prove
    membership and are rejected.
    """
    if len(records) != len(scene_dists):
        raise AlignmentError(
            f"{len(records)} records vs {len(scene_dists)} scene distributions"
        )
    allowed = set(whitelist)
    kept: list[ImageRecord] = []
    rejected: list[ImageRecord] = []
    for rec, dist in zip(records, scene_dists):
        if dist is not None and _any_top_k_allowed(dist, allowed, top_k):
            kept.append(with_stage_status(rec, StageStatus.KEPT))
        else:
            rejected.append(with_stage_status(rec, StageStatus.REJECTED_OUTLIER))
    return kept, rejected


def _any_top_k_allowed(dist: ClassDistribution, allowed: set[str], top_k: int) -> bool:
    if top_k <= 1:
        label, _ = top1(dist)
        return label in allowed
    order = sorted(range(len(dist.probs)), key=lambda i: (-dist.probs[i], i))
    return any(dist.labels[i] in allowed for i in order[:top_k])


def fuse(distributions: Sequence[ClassDistribution]) -> tuple[str, float, ClassDistribution]:
    """Average M distributions elementwise and take the argmax.

    Returns (label, confidence, averaged). Uses exact summation, so any
    permutation of the inputs yields the identical averaged vector.
    """
    m = len(distributions)
    if m == 0:
        raise EmptyEvidence("no distributions to fuse")
    labels = distributions[0].labels
    for d in distributions[1:]:
        if d.labels != labels:
            raise AlignmentError(f"label sets differ: {d.labels} vs {labels}")
    if all(d.probs == distributions[0].probs for d in distributions):
        # The mean of identical vectors is that vector, exactly.
        averaged = distributions[0]
    else:
        averaged_probs = tuple(
            math.fsum(d.probs[i] for d in distributions) / m for i in range(len(labels))
        )
        averaged = ClassDistribution(labels=labels, probs=averaged_probs)
    label, confidence = top1(averaged)
    return label, confidence, averaged


def link_predictions(
    points: Sequence[tuple[GeoPoint, object]],
    buildings: SpatialIndex,
    radius_m: float,
) -> tuple[list[tuple[object, object, float]], list[object]]:
    """Assign geo-tagged payloads to the nearest building centroid within radius.

    Returns (assignments, unassigned): assignments are (payload, building_id,
    distance_m); payloads with no building in range are reported, not dropped.
    """
    assigned: list[tuple[object, object, float]] = []
    unassigned: list[object] = []
    for point, payload in points:
        hit = buildings.nearest(point, radius_m)
        if hit is None:
            unassigned.append(payload)
        else:
            ident, dist = hit
            assigned.append((payload, ident, dist))
    return assigned, unassigned


def fuse_buildings(
    buildings: Sequence[BuildingRecord],
    dists_by_building: dict[int, list[ClassDistribution]],
    had_imagery: set[int],
    *,
    rejection_label: Optional[str] = None,
) -> tuple[list[BuildingPrediction], list[UnclassifiedBuilding]]:
    """Fuse per-building evidence; every building gets a prediction or a reason.

    had_imagery holds ids of buildings that had at least one fetched image,
    which separates all_filtered from no_imagery. With rejection_label set, a
    building whose fused argmax is that extra label is treated as filtered out.
    """
    predictions: list[BuildingPrediction] = []
    unclassified: list[UnclassifiedBuilding] = []
    for building in sorted(buildings, key=lambda b: b.id):
        dists = dists_by_building.get(building.id, [])
        if not dists:
            reason = (
                UnclassifiedReason.ALL_FILTERED
                if building.id in had_imagery
                else UnclassifiedReason.NO_IMAGERY
            )
            unclassified.append(UnclassifiedBuilding(building.id, reason))
            continue
        label, confidence, averaged = fuse(dists)
        if rejection_label is not None and label == rejection_label:
            unclassified.append(
                UnclassifiedBuilding(building.id, UnclassifiedReason.ALL_FILTERED)
            )
            continue
        predictions.append(
            BuildingPrediction(
                building_id=building.id,
                label=BuildingClass(label),
                confidence=confidence,
                images_used=len(dists),
                averaged=averaged,
            )
        )
    return predictions, unclassified


def classify_city(
    buildings: Sequence[BuildingRecord],
    images: Sequence[ImageRecord],
    cache_root: Path,
    scene_backend: Backend,
    building_backend: Backend,
    *,
    whitelist: Sequence[str] = SCENE_CATEGORIES,
    whitelist_top_k: int = 1,
    rejection_label: Optional[str] = None,
) -> tuple[list[BuildingPrediction], list[UnclassifiedBuilding], RunReport]:
    """Run filter + classify + fuse over a whole city of fetched images.

    Every building receives exactly one of a prediction or an unclassified
    marker. Output order is sorted by building id.
    """
    report = RunReport(buildings=len(buildings))
    fetched = [r for r in images if r.fetch_status is FetchStatus.FETCHED]
    report.images_fetched = len(fetched)

    paths = [Path(cache_root) / r.cache_path for r in fetched]
    scene_dists = classify_batch(paths, ROLE_SCENE, scene_backend)
    kept, rejected = filter_outliers(
        fetched, scene_dists, whitelist=whitelist, top_k=whitelist_top_k
    )
    report.images_kept = len(kept)
    report.images_rejected = len(rejected)

    kept_paths = [Path(cache_root) / r.cache_path for r in kept]
    building_dists = classify_batch(kept_paths, ROLE_BUILDING, building_backend)

    by_building: dict[int, list[ClassDistribution]] = {}
    for rec, dist in zip(kept, building_dists):
        if dist is not None:
            by_building.setdefault(rec.building_id, []).append(dist)
    had_imagery = {r.building_id for r in fetched}

    predictions, unclassified = fuse_buildings(
        buildings, by_building, had_imagery, rejection_label=rejection_label
    )
    report.predicted = len(predictions)
    report.unclassified_no_imagery = sum(
        1 for u in unclassified if u.reason is UnclassifiedReason.NO_IMAGERY
    )
    report.unclassified_all_filtered = sum(
        1 for u in unclassified if u.reason is UnclassifiedReason.ALL_FILTERED
    )
    return predictions, unclassified, report


def write_predictions_jsonl(predictions: Iterable[BuildingPrediction], path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for p in predictions:
            row = {
                "building_id": p.building_id,
                "label": p.label.value,
                "confidence": p.confidence,
                "images_used": p.images_used,
                "averaged": {
                    lbl: prob for lbl, prob in zip(p.averaged.labels, p.averaged.probs)
                },
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_predictions_jsonl(path: Path) -> list[BuildingPrediction]:
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            probs = row["averaged"]
            labels = tuple(
                [lbl for lbl in BUILDING_LABELS if lbl in probs]
                + sorted(k for k in probs if k not in BUILDING_LABELS)
            )
            averaged = ClassDistribution(
                labels=labels, probs=tuple(probs[lbl] for lbl in labels)
            )
            out.append(
                BuildingPrediction(
                    building_id=row["building_id"],
                    label=BuildingClass(row["label"]),
                    confidence=row["confidence"],
                    images_used=row["images_used"],
                    averaged=averaged,
                )
            )
    return out


def write_unclassified_jsonl(items: Iterable[UnclassifiedBuilding], path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for u in items:
            fh.write(
                json.dumps(
                    {"building_id": u.building_id, "reason": u.reason.value}, sort_keys=True
                )
                + "\n"
            )


def read_unclassified_jsonl(path: Path) -> list[UnclassifiedBuilding]:
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append(
                    UnclassifiedBuilding(row["building_id"], UnclassifiedReason(row["reason"]))
                )
    return out
