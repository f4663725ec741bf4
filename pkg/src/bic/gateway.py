"""Uniform classifier access: probability distributions, HTTP protocol, offline stub.

Two model roles cross this gateway: "scene" (the facade/outlier filter) and
"building" (the eight-class instance classifier). Every distribution is
validated on receipt; a backend returning junk marks that item failed instead
of killing the batch. The stub backend answers from sidecar label files when
present, else from a simplex point seeded by the image content hash, which
makes end-to-end runs fully reproducible with no model anywhere.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import requests

from .osm import BUILDING_LABELS

log = logging.getLogger(__name__)

# Building-related scene categories whose presence marks a usable facade image.
SCENE_CATEGORIES: tuple[str, ...] = (
    "apartment",
    "church",
    "house",
    "industrial area",
    "museum",
    "building facade",
    "embassy",
    "hospital",
    "parking garage",
    "hotel",
)

# Catch-all label the stub uses for everything the whitelist does not cover.
SCENE_OTHER = "other"
STUB_SCENE_LABELS: tuple[str, ...] = SCENE_CATEGORIES + (SCENE_OTHER,)

SIMPLEX_TOLERANCE = 1e-6
DEFAULT_TIMEOUT_S = 30.0

ROLE_SCENE = "scene"
ROLE_BUILDING = "building"


class BackendUnavailable(RuntimeError):
    """The classifier backend cannot be reached; the stage can be resumed later."""


class InvalidDistribution(ValueError):
    """A distribution violated the simplex invariants or used unknown labels."""


@dataclass(frozen=True)
class ClassDistribution:
    """A probability vector aligned to an ordered label list."""

    labels: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.probs):
            raise InvalidDistribution(
                f"{len(self.labels)} labels vs {len(self.probs)} probabilities"
            )
        if not self.labels:
            raise InvalidDistribution("empty label set")
        if any(p < 0.0 or not math.isfinite(p) for p in self.probs):
            raise InvalidDistribution(f"negative or non-finite probability in {self.probs}")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > SIMPLEX_TOLERANCE:
            raise InvalidDistribution(f"probabilities sum to {total}, not 1")

    def prob_of(self, label: str) -> float:
        return self.probs[self.labels.index(label)]


def top1(d: ClassDistribution) -> tuple[str, float]:
    """Label of maximal probability; ties break to the earliest label."""
    best = 0
    for i in range(1, len(d.probs)):
        if d.probs[i] > d.probs[best]:
            best = i
    return d.labels[best], d.probs[best]


def _distribution_from_probs(
    role: str,
    probs: dict[str, float],
    building_labels: tuple[str, ...] = BUILDING_LABELS,
) -> ClassDistribution:
    """Build a validated distribution from a label->probability mapping.

    The building role is pinned to the canonical labels (unknown keys are an
    error, missing ones are zero); building_labels may carry an extra rejection
    label when that mode is configured. The scene role keeps the mapping's own
    labels: scene backends legitimately expose category sets of their own.
    """
    if role == ROLE_BUILDING:
        unknown = set(probs) - set(building_labels)
        if unknown:
            raise InvalidDistribution(f"unknown building labels: {sorted(unknown)}")
        return ClassDistribution(
            labels=building_labels,
            probs=tuple(float(probs.get(lbl, 0.0)) for lbl in building_labels),
        )
    return ClassDistribution(
        labels=tuple(probs.keys()),
        probs=tuple(float(v) for v in probs.values()),
    )


class Backend(Protocol):
    def classify(
        self, role: str, items: Sequence[tuple[str, Path]]
    ) -> list[Optional[ClassDistribution]]: ...


class StubBackend:
    """Deterministic offline classifier.

    A sidecar `<image>.labels.json` wins when present: either a flat
    {label: prob} mapping, or keyed by role ({"scene": {...}, "building":
    {...}}). Without a sidecar the distribution is a pseudo-random simplex
    point seeded by the image content hash, so identical bytes always get the
    identical answer.
    """

    def __init__(self, building_labels: tuple[str, ...] = BUILDING_LABELS) -> None:
        self.building_labels = building_labels

    def classify(
        self, role: str, items: Sequence[tuple[str, Path]]
    ) -> list[Optional[ClassDistribution]]:
        out: list[Optional[ClassDistribution]] = []
        for item_id, path in items:
            try:
                out.append(self._classify_one(role, Path(path)))
            except InvalidDistribution as exc:
                log.warning("stub: invalid distribution for %s: %s", item_id, exc)
                out.append(None)
            except OSError as exc:
                log.warning("stub: cannot read %s: %s", path, exc)
                out.append(None)
        return out

    def _classify_one(self, role: str, path: Path) -> ClassDistribution:
        sidecar = Path(str(path) + ".labels.json")
        if sidecar.exists():
            data = json.loads(sidecar.read_text())
            if set(data) <= {ROLE_SCENE, ROLE_BUILDING} and all(
                isinstance(v, dict) for v in data.values()
            ):
                probs = data.get(role)
                if probs is not None:
                    return _distribution_from_probs(role, probs, self.building_labels)
            else:
                return _distribution_from_probs(role, data, self.building_labels)
        return self._hash_seeded(role, path.read_bytes())

    def _hash_seeded(self, role: str, content: bytes) -> ClassDistribution:
        labels = self.building_labels if role == ROLE_BUILDING else STUB_SCENE_LABELS
        digest = hashlib.sha256(role.encode("utf-8") + content).hexdigest()
        rng = random.Random(int(digest, 16))
        draws = [-math.log(rng.random()) for _ in labels]
        total = math.fsum(draws)
        return ClassDistribution(labels=labels, probs=tuple(d / total for d in draws))


class HttpBackend:
    """Speaks POST /v1/classify with base64 PNG payloads."""

    def __init__(
        self,
        endpoint: str,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        building_labels: tuple[str, ...] = BUILDING_LABELS,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self.building_labels = building_labels

    def classify(
        self, role: str, items: Sequence[tuple[str, Path]]
    ) -> list[Optional[ClassDistribution]]:
        if not items:
            return []
        payload = {
            "model": role,
            "images": [
                {
                    "id": item_id,
                    "png_base64": base64.b64encode(Path(path).read_bytes()).decode("ascii"),
                }
                for item_id, path in items
            ],
        }
        try:
            resp = requests.post(
                f"{self.endpoint}/v1/classify", json=payload, timeout=self.timeout_s
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(str(exc)) from exc
        if resp.status_code >= 500:
            raise BackendUnavailable(f"backend returned HTTP {resp.status_code}")
        try:
            results = {r["id"]: r.get("probs") for r in resp.json().get("results", [])}
        except (ValueError, TypeError, KeyError) as exc:
            raise BackendUnavailable(f"malformed backend response: {exc}") from exc
        out: list[Optional[ClassDistribution]] = []
        for item_id, _ in items:
            probs = results.get(item_id)
            if not isinstance(probs, dict):
                log.warning("backend returned no result for item %s", item_id)
                out.append(None)
                continue
            try:
                out.append(_distribution_from_probs(role, probs, self.building_labels))
            except InvalidDistribution as exc:
                log.warning("invalid distribution for item %s: %s", item_id, exc)
                out.append(None)
        return out


def classify_batch(
    images: Sequence[Path],
    model_role: str,
    backend: Backend,
) -> list[Optional[ClassDistribution]]:
    """One distribution per image, order-preserving; failed items come back as None."""
    if model_role not in (ROLE_SCENE, ROLE_BUILDING):
        raise ValueError(f"unknown model role: {model_role}")
    items = [(str(i), Path(p)) for i, p in enumerate(images)]
    result = backend.classify(model_role, items)
    if len(result) != len(items):
        raise BackendUnavailable(
            f"backend returned {len(result)} results for {len(items)} items"
        )
    return result


def make_backend(
    spec: str, building_labels: tuple[str, ...] = BUILDING_LABELS
) -> Backend:
    """'stub' or an http(s) endpoint URL."""
    if spec == "stub":
        return StubBackend(building_labels=building_labels)
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpBackend(spec, building_labels=building_labels)
    raise ValueError(f"unknown backend spec: {spec!r}")
