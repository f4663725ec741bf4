"""Street-view image acquisition: viewpoint sampling, request building, cached fetching.

Viewpoints ring the footprint centroid at equally spaced azimuths, each camera
heading pointing back at the centroid. The transport is injected (live HTTP or
directory-backed replay) so every fetch path can run offline. Fetching is
idempotent over the on-disk cache and survives partial outages: failures are
recorded on the ImageRecord, never raised out of a city-scale run.
"""

from __future__ import annotations

import collections
import enum
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import requests

from .geo import GeoPoint, destination_point, haversine_m, initial_bearing
from .osm import BuildingRecord

log = logging.getLogger(__name__)

IMAGE_ENDPOINT = "https://maps.googleapis.com/maps/api/streetview"
METADATA_ENDPOINT = "https://maps.googleapis.com/maps/api/streetview/metadata"

DEFAULT_PITCH_DEG = 10.0
DEFAULT_IMAGE_SIZE = 512
DEFAULT_FOV_DEG = 90.0
DEFAULT_VIEWPOINTS = 4
DEFAULT_OFFSET_M = 30.0
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF_S = 0.5


class TransportError(RuntimeError):
    """Network failure, HTTP >= 500, or a missing replay fixture."""


@dataclass(frozen=True)
class ViewpointSpec:
    """A single street-view camera request: location plus orientation."""

    query_location: GeoPoint
    heading: float
    pitch: float = DEFAULT_PITCH_DEG
    width: int = DEFAULT_IMAGE_SIZE
    height: int = DEFAULT_IMAGE_SIZE
    fov: float = DEFAULT_FOV_DEG

    def __post_init__(self) -> None:
        if not 0.0 <= self.heading < 360.0:
            raise ValueError(f"heading out of range: {self.heading}")
        if not -90.0 <= self.pitch <= 90.0:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive: {self.width}x{self.height}")
        if self.fov <= 0:
            raise ValueError(f"fov must be positive: {self.fov}")


class PanoStatus(enum.Enum):
    OK = "OK"
    ZERO_RESULTS = "ZERO_RESULTS"
    ERROR = "ERROR"


@dataclass(frozen=True)
class PanoMetadata:
    status: PanoStatus
    pano_id: Optional[str] = None
    pano_location: Optional[GeoPoint] = None

    def __post_init__(self) -> None:
        has_location = self.pano_location is not None
        if (self.status is PanoStatus.OK) != has_location:
            raise ValueError("pano_location must be present exactly when status is OK")


class FetchStatus(enum.Enum):
    FETCHED = "fetched"
    NO_PANO = "no_pano"
    FAILED = "failed"


class StageStatus(enum.Enum):
    RAW = "raw"
    KEPT = "kept"
    REJECTED_OUTLIER = "rejected_outlier"


@dataclass(frozen=True)
class ImageRecord:
    """One fetched (or attempted) street-view image for one building."""

    building_id: int
    viewpoint: ViewpointSpec
    fetch_status: FetchStatus
    pano_id: Optional[str] = None
    cache_path: Optional[str] = None
    stage_status: StageStatus = StageStatus.RAW

    def __post_init__(self) -> None:
        if (self.fetch_status is FetchStatus.FETCHED) != (self.cache_path is not None):
            raise ValueError("cache_path must be present exactly when fetched")


def sample_viewpoints(
    building: BuildingRecord,
    k: int = DEFAULT_VIEWPOINTS,
    offset_m: float = DEFAULT_OFFSET_M,
    *,
    pitch: float = DEFAULT_PITCH_DEG,
    width: int = DEFAULT_IMAGE_SIZE,
    height: int = DEFAULT_IMAGE_SIZE,
    fov: float = DEFAULT_FOV_DEG,
) -> list[ViewpointSpec]:
    """k viewpoints ringed offset_m around the centroid, starting due north.

    Each heading points back at the centroid, so the camera faces the building.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if offset_m <= 0:
        raise ValueError(f"offset must be positive, got {offset_m}")
    centroid = building.footprint.centroid
    specs = []
    for i in range(k):
        azimuth = 360.0 * i / k
        query = destination_point(centroid, azimuth, offset_m)
        heading = initial_bearing(query, centroid)
        specs.append(
            ViewpointSpec(
                query_location=query,
                heading=heading,
                pitch=pitch,
                width=width,
                height=height,
                fov=fov,
            )
        )
    return specs


def build_image_request(v: ViewpointSpec, api_key: str) -> str:
    """Exact image URL; parameter order is fixed so the string doubles as a cache key."""
    loc = v.query_location
    return (
        f"{IMAGE_ENDPOINT}?size={v.width}x{v.height}"
        f"&location={loc.lat:.6f},{loc.lon:.6f}"
        f"&heading={float(v.heading)}&pitch={float(v.pitch)}&fov={float(v.fov)}"
        f"&key={api_key}"
    )


def build_metadata_request(v: ViewpointSpec, api_key: str) -> str:
    loc = v.query_location
    return f"{METADATA_ENDPOINT}?location={loc.lat:.6f},{loc.lon:.6f}&key={api_key}"


class Transport(Protocol):
    def get(self, url: str) -> tuple[int, bytes]: ...


class HttpTransport:
    """Live transport over requests; HTTP >= 500 and network errors raise TransportError."""

    def __init__(self, timeout_s: float = 30.0) -> None:
        self.timeout_s = timeout_s
        self.calls: list[str] = []

    def get(self, url: str) -> tuple[int, bytes]:
        self.calls.append(url)
        try:
            resp = requests.get(url, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code} for {url}")
        return resp.status_code, resp.content


class ReplayTransport:
    """Answers requests from an on-disk archive of <url-hash>.meta.json / .body files."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.calls: list[str] = []

    @staticmethod
    def url_hash(url: str) -> str:
        return hashlib.sha256(url.encode("utf-8")).hexdigest()

    @classmethod
    def store(cls, root: Path, url: str, body: bytes, status: int = 200) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        h = cls.url_hash(url)
        (root / f"{h}.meta.json").write_text(
            json.dumps({"url": url, "status": status}, sort_keys=True)
        )
        (root / f"{h}.body").write_bytes(body)

    def get(self, url: str) -> tuple[int, bytes]:
        self.calls.append(url)
        h = self.url_hash(url)
        meta_path = self.root / f"{h}.meta.json"
        body_path = self.root / f"{h}.body"
        if not meta_path.exists() or not body_path.exists():
            raise TransportError(f"no replay fixture for {url}")
        meta = json.loads(meta_path.read_text())
        return int(meta.get("status", 200)), body_path.read_bytes()


class RateLimiter:
    """Sliding-window limiter: at most `rate` acquisitions per rolling second."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic) -> None:
        if rate <= 0:
            raise ValueError(f"rate must be positive, got {rate}")
        self.rate = int(rate)
        self._clock = clock
        self._lock = threading.Lock()
        self._stamps: collections.deque[float] = collections.deque()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and self._stamps[0] <= now - 1.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.rate:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + 1.0 - now
            time.sleep(max(wait, 1e-4))


def _get_with_retry(
    transport: Transport,
    url: str,
    retries: int,
    backoff_s: float,
    limiter: Optional[RateLimiter],
) -> tuple[int, bytes]:
    last: Optional[TransportError] = None
    for attempt in range(retries):
        if limiter is not None:
            limiter.acquire()
        try:
            return transport.get(url)
        except TransportError as exc:
            last = exc
            if attempt + 1 < retries:
                time.sleep(backoff_s * (2**attempt))
    assert last is not None
    raise last


def fetch_metadata(
    v: ViewpointSpec,
    transport: Transport,
    api_key: str = "",
    *,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    limiter: Optional[RateLimiter] = None,
) -> PanoMetadata:
    """Resolve the closest panorama for a viewpoint. ZERO_RESULTS is data, not an error."""
    url = build_metadata_request(v, api_key)
    _, body = _get_with_retry(transport, url, retries, backoff_s, limiter)
    try:
        payload = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return PanoMetadata(status=PanoStatus.ERROR)
    status = payload.get("status")
    if status == "OK":
        loc = payload.get("location") or {}
        try:
            return PanoMetadata(
                status=PanoStatus.OK,
                pano_id=str(payload["pano_id"]),
                pano_location=GeoPoint(float(loc["lat"]), float(loc["lng"])),
            )
        except (KeyError, TypeError, ValueError):
            return PanoMetadata(status=PanoStatus.ERROR)
    if status == "ZERO_RESULTS":
        return PanoMetadata(status=PanoStatus.ZERO_RESULTS)
    return PanoMetadata(status=PanoStatus.ERROR)


def cache_relpath(pano_id: str, heading: float) -> str:
    return f"cache/{pano_id}/{round(heading)}.png"


def fetch_image(
    building_id: int,
    v: ViewpointSpec,
    meta: PanoMetadata,
    cache_root: Path,
    transport: Transport,
    api_key: str = "",
    *,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    limiter: Optional[RateLimiter] = None,
) -> ImageRecord:
    """Fetch one image into the cache; a cache hit never touches the transport."""
    if meta.status is not PanoStatus.OK or meta.pano_id is None:
        raise ValueError("fetch_image requires metadata with status OK")
    rel = cache_relpath(meta.pano_id, v.heading)
    target = Path(cache_root) / rel
    if target.exists():
        return ImageRecord(
            building_id=building_id,
            viewpoint=v,
            fetch_status=FetchStatus.FETCHED,
            pano_id=meta.pano_id,
            cache_path=rel,
        )
    url = build_image_request(v, api_key)
    try:
        _, body = _get_with_retry(transport, url, retries, backoff_s, limiter)
    except TransportError as exc:
        log.warning("image fetch failed for building %s: %s", building_id, exc)
        return ImageRecord(
            building_id=building_id,
            viewpoint=v,
            fetch_status=FetchStatus.FAILED,
            pano_id=meta.pano_id,
        )
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
    tmp.write_bytes(body)
    os.replace(tmp, target)
    return ImageRecord(
        building_id=building_id,
        viewpoint=v,
        fetch_status=FetchStatus.FETCHED,
        pano_id=meta.pano_id,
        cache_path=rel,
    )


def fetch_building(
    building: BuildingRecord,
    cache_root: Path,
    transport: Transport,
    api_key: str = "",
    *,
    k: int = DEFAULT_VIEWPOINTS,
    offset_m: float = DEFAULT_OFFSET_M,
    pitch: float = DEFAULT_PITCH_DEG,
    width: int = DEFAULT_IMAGE_SIZE,
    height: int = DEFAULT_IMAGE_SIZE,
    fov: float = DEFAULT_FOV_DEG,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    limiter: Optional[RateLimiter] = None,
) -> list[ImageRecord]:
    """All records for one building; duplicate panoramas across viewpoints keep one record."""
    records: list[ImageRecord] = []
    seen_panos: set[str] = set()
    for v in sample_viewpoints(
        building, k, offset_m, pitch=pitch, width=width, height=height, fov=fov
    ):
        try:
            meta = fetch_metadata(
                v, transport, api_key, retries=retries, backoff_s=backoff_s, limiter=limiter
            )
        except TransportError as exc:
            log.warning("metadata failed for building %s: %s", building.id, exc)
            records.append(
                ImageRecord(
                    building_id=building.id, viewpoint=v, fetch_status=FetchStatus.FAILED
                )
            )
            continue
        if meta.status is PanoStatus.ZERO_RESULTS:
            records.append(
                ImageRecord(
                    building_id=building.id, viewpoint=v, fetch_status=FetchStatus.NO_PANO
                )
            )
            continue
        if meta.status is PanoStatus.ERROR:
            records.append(
                ImageRecord(
                    building_id=building.id, viewpoint=v, fetch_status=FetchStatus.FAILED
                )
            )
            continue
        assert meta.pano_id is not None
        if meta.pano_id in seen_panos:
            continue
        seen_panos.add(meta.pano_id)
        records.append(
            fetch_image(
                building.id,
                v,
                meta,
                cache_root,
                transport,
                api_key,
                retries=retries,
                backoff_s=backoff_s,
                limiter=limiter,
            )
        )
    return records


def fetch_city(
    buildings: Sequence[BuildingRecord],
    cache_root: Path,
    transport: Transport,
    api_key: str = "",
    *,
    k: int = DEFAULT_VIEWPOINTS,
    offset_m: float = DEFAULT_OFFSET_M,
    pitch: float = DEFAULT_PITCH_DEG,
    width: int = DEFAULT_IMAGE_SIZE,
    height: int = DEFAULT_IMAGE_SIZE,
    fov: float = DEFAULT_FOV_DEG,
    rate_limit: Optional[float] = None,
    workers: int = 4,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    skip_ids: Optional[set[int]] = None,
    on_building_done: Optional[Callable[[int, list[ImageRecord]], None]] = None,
) -> dict[int, list[ImageRecord]]:
    """Fetch every building with a bounded worker pool and a shared rate limit.

    Buildings in skip_ids are left untouched (resume support). on_building_done
    fires once per completed building, in completion order.
    """
    limiter = RateLimiter(rate_limit) if rate_limit else None
    skip = skip_ids or set()
    todo = [b for b in buildings if b.id not in skip]
    results: dict[int, list[ImageRecord]] = {}
    lock = threading.Lock()

    def work(building: BuildingRecord) -> None:
        recs = fetch_building(
            building,
            cache_root,
            transport,
            api_key,
            k=k,
            offset_m=offset_m,
            pitch=pitch,
            width=width,
            height=height,
            fov=fov,
            retries=retries,
            backoff_s=backoff_s,
            limiter=limiter,
        )
        with lock:
            results[building.id] = recs
            if on_building_done is not None:
                on_building_done(building.id, recs)

    if workers <= 1:
        for b in todo:
            work(b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, todo))
    return results


def record_to_json(rec: ImageRecord) -> dict:
    v = rec.viewpoint
    return {
        "building_id": rec.building_id,
        "pano_id": rec.pano_id,
        "viewpoint": {
            "lat": v.query_location.lat,
            "lon": v.query_location.lon,
            "heading": v.heading,
            "pitch": v.pitch,
            "width": v.width,
            "height": v.height,
            "fov": v.fov,
        },
        "cache_path": rec.cache_path,
        "fetch_status": rec.fetch_status.value,
        "stage_status": rec.stage_status.value,
    }


def record_from_json(row: dict) -> ImageRecord:
    v = row["viewpoint"]
    return ImageRecord(
        building_id=row["building_id"],
        viewpoint=ViewpointSpec(
            query_location=GeoPoint(v["lat"], v["lon"]),
            heading=v["heading"],
            pitch=v["pitch"],
            width=v["width"],
            height=v["height"],
            fov=v["fov"],
        ),
        fetch_status=FetchStatus(row["fetch_status"]),
        pano_id=row["pano_id"],
        cache_path=row["cache_path"],
        stage_status=StageStatus(row["stage_status"]),
    )


def append_records_jsonl(records: Iterable[ImageRecord], path: Path) -> None:
    with path.open("a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), sort_keys=True) + "\n")


def read_records_jsonl(path: Path) -> list[ImageRecord]:
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(record_from_json(json.loads(line)))
    return records


def with_stage_status(rec: ImageRecord, status: StageStatus) -> ImageRecord:
    return replace(rec, stage_status=status)
