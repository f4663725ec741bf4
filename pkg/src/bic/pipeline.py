"""Stage orchestration: configuration, run manifest, resumable stage execution.

Stages run in a fixed order (ingest, fetch, filter, classify, fuse, eval, map);
each records sha256 digests of its outputs in the manifest and a finished stage
is a no-op on rerun unless forced. Intermediate data is newline-delimited JSON
so an interrupted run resumes by rescanning. One lock file guards each output
directory against concurrent runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import evaluation, fusion, imagery, mapping, osm
from .gateway import classify_batch, make_backend, ROLE_BUILDING, ROLE_SCENE
from .osm import BUILDING_LABELS

log = logging.getLogger(__name__)

STAGES = ("ingest", "fetch", "filter", "classify", "fuse", "eval", "map")

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".run.lock"
API_KEY_ENV = "SV_API_KEY"


class UpstreamIncomplete(RuntimeError):
    """A stage ran before its upstream stages finished."""


class StageFailed(RuntimeError):
    """A stage aborted; the manifest keeps partial progress for resume."""


class LockHeld(RuntimeError):
    """Another run is active in this output directory."""


@dataclass
class PipelineConfig:
    osm_path: str = ""
    out_dir: str = "out"
    bbox: Optional[str] = None  # "S,W,N,E"
    transport: str = "live"  # "live" or "replay:<dir>"
    api_key: Optional[str] = None  # None: read SV_API_KEY from the environment
    viewpoints_k: int = imagery.DEFAULT_VIEWPOINTS
    offset_m: float = imagery.DEFAULT_OFFSET_M
    pitch: float = imagery.DEFAULT_PITCH_DEG
    image_width: int = imagery.DEFAULT_IMAGE_SIZE
    image_height: int = imagery.DEFAULT_IMAGE_SIZE
    fov: float = imagery.DEFAULT_FOV_DEG
    scene_backend: str = "stub"
    building_backend: str = "stub"
    whitelist_top_k: int = 1
    link_radius_m: float = 50.0
    rate_limit: Optional[float] = None
    fetch_workers: int = 4
    retries: int = imagery.DEFAULT_RETRIES
    backoff_s: float = imagery.DEFAULT_BACKOFF_S
    seed: int = 0
    sample_n: Optional[int] = None
    rejection_label: Optional[str] = None
    density_cell_deg: float = 0.005

    def __post_init__(self) -> None:
        if self.viewpoints_k < 1:
            raise ValueError("viewpoints_k must be >= 1")
        if self.offset_m <= 0:
            raise ValueError("offset_m must be positive")
        if not -90 <= self.pitch <= 90:
            raise ValueError("pitch must be within [-90, 90]")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image size must be positive")
        if self.fov <= 0:
            raise ValueError("fov must be positive")
        if self.whitelist_top_k < 1:
            raise ValueError("whitelist_top_k must be >= 1")
        if self.link_radius_m <= 0:
            raise ValueError("link_radius_m must be positive")
        if self.rate_limit is not None and self.rate_limit <= 0:
            raise ValueError("rate_limit must be positive when set")
        if self.fetch_workers < 1:
            raise ValueError("fetch_workers must be >= 1")

    @classmethod
    def from_file(cls, path: Path, **overrides) -> "PipelineConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolve_api_key(self) -> str:
        if self.api_key is not None:
            return self.api_key
        return os.environ.get(API_KEY_ENV, "")

    def building_labels(self) -> tuple[str, ...]:
        if self.rejection_label:
            return BUILDING_LABELS + (self.rejection_label,)
        return BUILDING_LABELS


def make_transport(config: PipelineConfig) -> imagery.Transport:
    if config.transport == "live":
        return imagery.HttpTransport()
    if config.transport.startswith("replay:"):
        return imagery.ReplayTransport(Path(config.transport.split(":", 1)[1]))
    raise ValueError(f"unknown transport spec: {config.transport!r}")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config: dict
    stages: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: PipelineConfig) -> "RunManifest":
        stages = {name: {"status": "pending", "outputs": {}} for name in STAGES}
        return cls(run_id=uuid.uuid4().hex[:12], config=config.to_dict(), stages=stages)

    @classmethod
    def load_or_create(
        cls, out_dir: Path, config: PipelineConfig, *, force: bool = False
    ) -> "RunManifest":
        path = Path(out_dir) / MANIFEST_NAME
        if not path.exists():
            return cls.fresh(config)
        data = json.loads(path.read_text())
        manifest = cls(
            run_id=data["run_id"], config=data["config"], stages=data["stages"]
        )
        if manifest.config != config.to_dict():
            if not force:
                raise StageFailed(
                    "config does not match the manifest in this output directory; "
                    "use a fresh --out or pass --force to adopt the new config"
                )
            manifest.config = config.to_dict()
        return manifest

    def save(self, out_dir: Path) -> None:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(
            json.dumps(
                {"run_id": self.run_id, "config": self.config, "stages": self.stages},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )

    def stage_done(self, name: str, out_dir: Path) -> bool:
        entry = self.stages.get(name, {})
        if entry.get("status") != "done":
            return False
        for rel, digest in entry.get("outputs", {}).items():
            target = Path(out_dir) / rel
            if not target.exists() or sha256_file(target) != digest:
                return False
        return True


class run_lock:
    """Exclusive lock on an output directory for the duration of a run."""

    def __init__(self, out_dir: Path) -> None:
        self.path = Path(out_dir) / LOCK_NAME

    def __enter__(self) -> "run_lock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(f"another run holds {self.path}") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info) -> None:
        self.path.unlink(missing_ok=True)


def run_stage(
    name: str,
    config: PipelineConfig,
    manifest: RunManifest,
    *,
    force: bool = False,
) -> RunManifest:
    """Execute one stage; rerunning a finished stage is a no-op without force."""
    if name not in STAGES:
        raise ValueError(f"unknown stage: {name}")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for upstream in STAGES[: STAGES.index(name)]:
        if not manifest.stage_done(upstream, out_dir):
            raise UpstreamIncomplete(f"stage {name!r} needs {upstream!r} to finish first")
    if manifest.stage_done(name, out_dir) and not force:
        log.info("stage %s already done, skipping", name)
        return manifest

    manifest.stages[name] = {"status": "running", "outputs": {}}
    manifest.save(out_dir)
    runner = _STAGE_RUNNERS[name]
    try:
        outputs = runner(config, out_dir)
    except Exception as exc:
        manifest.stages[name] = {"status": "pending", "outputs": {}}
        manifest.save(out_dir)
        raise StageFailed(f"stage {name} failed: {exc}") from exc
    manifest.stages[name] = {
        "status": "done",
        "outputs": {rel: sha256_file(out_dir / rel) for rel in outputs},
    }
    manifest.save(out_dir)
    return manifest


def run_all(config: PipelineConfig, *, force: bool = False) -> RunManifest:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(out_dir):
        manifest = RunManifest.load_or_create(out_dir, config, force=force)
        for name in STAGES:
            manifest = run_stage(name, config, manifest, force=force)
    return manifest


def _stage_ingest(config: PipelineConfig, out_dir: Path) -> list[str]:
    bbox = osm.BBox.parse(config.bbox) if config.bbox else None
    records, report = osm.parse_osm(config.osm_path, bbox)
    osm.write_buildings_jsonl(records, out_dir / "buildings.jsonl")
    (out_dir / "ingest_report.json").write_text(
        json.dumps(vars(report), indent=2, sort_keys=True) + "\n"
    )
    log.info("ingest: %d buildings (%s)", len(records), vars(report))
    return ["buildings.jsonl", "ingest_report.json"]


def _stage_fetch(config: PipelineConfig, out_dir: Path) -> list[str]:
    buildings = osm.read_buildings_jsonl(out_dir / "buildings.jsonl")
    images_path = out_dir / "images.jsonl"
    skip_ids: set[int] = set()
    if images_path.exists():
        skip_ids = {r.building_id for r in imagery.read_records_jsonl(images_path)}
        log.info("fetch: resuming, %d buildings already recorded", len(skip_ids))
    transport = make_transport(config)

    def on_done(building_id: int, records: list[imagery.ImageRecord]) -> None:
        imagery.append_records_jsonl(records, images_path)

    imagery.fetch_city(
        buildings,
        out_dir,
        transport,
        config.resolve_api_key(),
        k=config.viewpoints_k,
        offset_m=config.offset_m,
        pitch=config.pitch,
        width=config.image_width,
        height=config.image_height,
        fov=config.fov,
        rate_limit=config.rate_limit,
        workers=config.fetch_workers,
        retries=config.retries,
        backoff_s=config.backoff_s,
        skip_ids=skip_ids,
        on_building_done=on_done,
    )
    if not images_path.exists():
        images_path.write_text("")
    return ["images.jsonl"]


def _fetched_sorted(out_dir: Path) -> list[imagery.ImageRecord]:
    records = imagery.read_records_jsonl(out_dir / "images.jsonl")
    fetched = [r for r in records if r.fetch_status is imagery.FetchStatus.FETCHED]
    fetched.sort(key=lambda r: (r.building_id, r.cache_path))
    return fetched


def _stage_filter(config: PipelineConfig, out_dir: Path) -> list[str]:
    fetched = _fetched_sorted(out_dir)
    backend = make_backend(config.scene_backend)
    dists = classify_batch([out_dir / r.cache_path for r in fetched], ROLE_SCENE, backend)
    kept, rejected = fusion.filter_outliers(fetched, dists, top_k=config.whitelist_top_k)
    merged = sorted(kept + rejected, key=lambda r: (r.building_id, r.cache_path))
    filtered_path = out_dir / "filtered.jsonl"
    filtered_path.unlink(missing_ok=True)
    imagery.append_records_jsonl(merged, filtered_path)
    log.info("filter: kept %d of %d images", len(kept), len(fetched))
    return ["filtered.jsonl"]


def _stage_classify(config: PipelineConfig, out_dir: Path) -> list[str]:
    records = imagery.read_records_jsonl(out_dir / "filtered.jsonl")
    kept = [r for r in records if r.stage_status is imagery.StageStatus.KEPT]
    kept.sort(key=lambda r: (r.building_id, r.cache_path))
    backend = make_backend(config.building_backend, config.building_labels())
    dists = classify_batch([out_dir / r.cache_path for r in kept], ROLE_BUILDING, backend)
    with (out_dir / "classified.jsonl").open("w", encoding="utf-8") as fh:
        for rec, dist in zip(kept, dists):
            row = {
                "building_id": rec.building_id,
                "cache_path": rec.cache_path,
                "probs": None
                if dist is None
                else {lbl: p for lbl, p in zip(dist.labels, dist.probs)},
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return ["classified.jsonl"]


def _stage_fuse(config: PipelineConfig, out_dir: Path) -> list[str]:
    buildings = osm.read_buildings_jsonl(out_dir / "buildings.jsonl")
    all_images = imagery.read_records_jsonl(out_dir / "images.jsonl")
    had_imagery = {
        r.building_id
        for r in all_images
        if r.fetch_status is imagery.FetchStatus.FETCHED
    }
    labels = config.building_labels()
    by_building: dict[int, list] = {}
    with (out_dir / "classified.jsonl").open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if row["probs"] is None:
                continue
            dist = fusion.ClassDistribution(
                labels=labels, probs=tuple(row["probs"].get(lbl, 0.0) for lbl in labels)
            )
            by_building.setdefault(row["building_id"], []).append(dist)
    predictions, unclassified = fusion.fuse_buildings(
        buildings, by_building, had_imagery, rejection_label=config.rejection_label
    )
    fusion.write_predictions_jsonl(predictions, out_dir / "predictions.jsonl")
    fusion.write_unclassified_jsonl(unclassified, out_dir / "unclassified.jsonl")
    report = {
        "buildings": len(buildings),
        "images_fetched": sum(
            1 for r in all_images if r.fetch_status is imagery.FetchStatus.FETCHED
        ),
        "predicted": len(predictions),
        "unclassified_no_imagery": sum(
            1 for u in unclassified if u.reason is fusion.UnclassifiedReason.NO_IMAGERY
        ),
        "unclassified_all_filtered": sum(
            1 for u in unclassified if u.reason is fusion.UnclassifiedReason.ALL_FILTERED
        ),
    }
    (out_dir / "run_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    return ["predictions.jsonl", "unclassified.jsonl", "run_report.json"]


def _stage_eval(config: PipelineConfig, out_dir: Path) -> list[str]:
    buildings = osm.read_buildings_jsonl(out_dir / "buildings.jsonl")
    predictions = fusion.read_predictions_jsonl(out_dir / "predictions.jsonl")
    unclassified = fusion.read_unclassified_jsonl(out_dir / "unclassified.jsonl")
    truth = {b.id: b.truth_label for b in buildings if b.truth_label is not None}
    predicted_by_id = {p.building_id: p for p in predictions}
    evaluable = sorted(set(truth) & set(predicted_by_id))
    audit: Optional[list[int]] = None
    if config.sample_n is not None:
        audit = evaluation.sample_for_audit(evaluable, config.sample_n, config.seed)
        evaluable = sorted(audit)
    pairs = [(truth[i], predicted_by_id[i].label) for i in evaluable]
    matrix = evaluation.confusion(pairs)
    metrics = evaluation.class_metrics(matrix)
    proportions = evaluation.class_proportions(predictions)
    payload = evaluation.metrics_payload(
        matrix, metrics, proportions, unclassified, audit_sample=audit
    )
    evaluation.write_metrics_json(payload, out_dir / "metrics.json")
    (out_dir / "metrics.txt").write_text(evaluation.render_metrics_table(metrics))
    return ["metrics.json", "metrics.txt"]


def _stage_map(config: PipelineConfig, out_dir: Path) -> list[str]:
    buildings = osm.read_buildings_jsonl(out_dir / "buildings.jsonl")
    predictions = fusion.read_predictions_jsonl(out_dir / "predictions.jsonl")
    unclassified = fusion.read_unclassified_jsonl(out_dir / "unclassified.jsonl")
    mapping.emit_footprint_map(
        buildings, predictions, unclassified, out_dir / "map_footprints.geojson"
    )
    mapping.emit_point_map(predictions, buildings, out_dir / "map_points.geojson")
    grids = mapping.emit_density_grids(
        predictions, buildings, out_dir, config.density_cell_deg
    )
    outputs = ["map_footprints.geojson", "map_points.geojson"]
    outputs.extend(f"density_{cls}.json" for cls in sorted(grids))
    return outputs


_STAGE_RUNNERS = {
    "ingest": _stage_ingest,
    "fetch": _stage_fetch,
    "filter": _stage_filter,
    "classify": _stage_classify,
    "fuse": _stage_fuse,
    "eval": _stage_eval,
    "map": _stage_map,
}
