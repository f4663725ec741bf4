"""Fusion tests: averaging identities, whitelist partition, linking, conservation."""

import math
import random

import pytest

from bic.gateway import ClassDistribution, SCENE_CATEGORIES, StubBackend
from bic.geo import FootprintPolygon, GeoPoint, SpatialIndex
from bic.imagery import FetchStatus, ImageRecord, StageStatus, ViewpointSpec
from bic.fusion import (
    AlignmentError,
    EmptyEvidence,
    UnclassifiedReason,
    classify_city,
    filter_outliers,
    fuse,
    fuse_buildings,
    link_predictions,
)
from bic.osm import BUILDING_LABELS, BuildingClass, BuildingRecord


def dist(*probs, labels=BUILDING_LABELS):
    return ClassDistribution(labels=labels, probs=tuple(probs))


def random_simplex(rng, labels=BUILDING_LABELS):
    draws = [-math.log(rng.random()) for _ in labels]
    total = math.fsum(draws)
    return ClassDistribution(labels=labels, probs=tuple(d / total for d in draws))


def scene_one_hot(label):
    labels = SCENE_CATEGORIES + ("other",)
    return ClassDistribution(
        labels=labels, probs=tuple(1.0 if lbl == label else 0.0 for lbl in labels)
    )


def image_record(building_id=1, heading=0.0):
    vp = ViewpointSpec(query_location=GeoPoint(40.0, -75.0), heading=heading)
    return ImageRecord(
        building_id=building_id,
        viewpoint=vp,
        fetch_status=FetchStatus.FETCHED,
        pano_id=f"p{building_id}-{heading}",
        cache_path=f"cache/p{building_id}/{round(heading)}.png",
    )


class TestFuse:
    def test_single_image_identity(self):
        d = dist(0.1, 0.9, 0, 0, 0, 0, 0, 0)
        label, confidence, averaged = fuse([d])
        assert label == BUILDING_LABELS[1]
        assert confidence == 0.9
        assert averaged == d

    def test_two_image_hand_average(self):
        d1 = dist(0.6, 0.4, 0, 0, 0, 0, 0, 0)
        d2 = dist(0.2, 0.8, 0, 0, 0, 0, 0, 0)
        label, confidence, averaged = fuse([d1, d2])
        assert averaged.probs[0] == pytest.approx(0.4, abs=1e-15)
        assert averaged.probs[1] == pytest.approx(0.6, abs=1e-15)
        assert label == BUILDING_LABELS[1]
        assert confidence == pytest.approx(0.6, abs=1e-15)

    def test_identical_inputs_are_a_fixed_point(self):
        d = dist(0.05, 0.15, 0.25, 0.05, 0.1, 0.2, 0.1, 0.1)
        _, _, averaged = fuse([d, d, d])
        assert averaged.probs == d.probs

    def test_empty_evidence(self):
        with pytest.raises(EmptyEvidence):
            fuse([])

    def test_mismatched_label_sets(self):
        with pytest.raises(AlignmentError):
            fuse([dist(*([0.125] * 8)), scene_one_hot("house")])

    def test_permutation_invariance_exact(self):
        rng = random.Random(42)
        for _ in range(200):
            dists = [random_simplex(rng) for _ in range(rng.randint(2, 6))]
            _, _, base = fuse(dists)
            shuffled = dists[:]
            rng.shuffle(shuffled)
            _, _, again = fuse(shuffled)
            assert again.probs == base.probs  # exact equality, not approx

    def test_argmax_dominance(self):
        rng = random.Random(43)
        for _ in range(200):
            winner = rng.randrange(8)
            dists = []
            for _ in range(rng.randint(1, 5)):
                d = random_simplex(rng)
                probs = list(d.probs)
                top = max(range(8), key=lambda i: probs[i])
                probs[top], probs[winner] = probs[winner], probs[top]
                dists.append(ClassDistribution(labels=BUILDING_LABELS, probs=tuple(probs)))
            label, _, _ = fuse(dists)
            assert label == BUILDING_LABELS[winner]


class TestFilterOutliers:
    def test_whitelist_partition(self):
        records = [image_record(1, 0.0), image_record(1, 90.0), image_record(2, 0.0)]
        dists = [
            scene_one_hot("building facade"),
            scene_one_hot("other"),
            scene_one_hot("church"),
        ]
        kept, rejected = filter_outliers(records, dists)
        assert [r.pano_id for r in kept] == [records[0].pano_id, records[2].pano_id]
        assert [r.pano_id for r in rejected] == [records[1].pano_id]
        assert all(r.stage_status is StageStatus.KEPT for r in kept)
        assert all(r.stage_status is StageStatus.REJECTED_OUTLIER for r in rejected)

    def test_empty_input(self):
        assert filter_outliers([], []) == ([], [])

    def test_alignment_error(self):
        with pytest.raises(AlignmentError):
            filter_outliers([image_record()], [])

    def test_failed_scene_classification_rejects(self):
        kept, rejected = filter_outliers([image_record()], [None])
        assert kept == []
        assert len(rejected) == 1

    def test_monotone_in_whitelist(self):
        rng = random.Random(7)
        labels = SCENE_CATEGORIES + ("other",)
        records = [image_record(i) for i in range(40)]
        dists = [random_simplex(rng, labels=labels) for _ in records]
        small = set(rng.sample(SCENE_CATEGORIES, 4))
        big = small | set(rng.sample(SCENE_CATEGORIES, 6))
        kept_small, _ = filter_outliers(records, dists, whitelist=tuple(small))
        kept_big, _ = filter_outliers(records, dists, whitelist=tuple(big))
        assert {r.pano_id for r in kept_small} <= {r.pano_id for r in kept_big}

    def test_top_k_widens_membership(self):
        labels = SCENE_CATEGORIES + ("other",)
        probs = {lbl: 0.0 for lbl in labels}
        probs["other"] = 0.6
        probs["house"] = 0.4
        d = ClassDistribution(labels=labels, probs=tuple(probs[lbl] for lbl in labels))
        kept1, _ = filter_outliers([image_record()], [d], top_k=1)
        kept2, _ = filter_outliers([image_record()], [d], top_k=2)
        assert kept1 == []
        assert len(kept2) == 1


class TestLinkPredictions:
    def test_exact_centroid_hit(self):
        idx = SpatialIndex([(1, GeoPoint(40.0, -75.0)), (2, GeoPoint(40.01, -75.0))])
        assigned, unassigned = link_predictions(
            [(GeoPoint(40.0, -75.0), "payload")], idx, radius_m=50.0
        )
        assert assigned == [("payload", 1, 0.0)]
        assert unassigned == []

    def test_beyond_radius_unassigned(self):
        idx = SpatialIndex([(1, GeoPoint(40.0, -75.0))])
        assigned, unassigned = link_predictions(
            [(GeoPoint(40.01, -75.0), "far")], idx, radius_m=50.0
        )
        assert assigned == []
        assert unassigned == ["far"]

    def test_matches_linear_scan(self):
        rng = random.Random(11)
        entries = [
            (i, GeoPoint(40.0 + rng.uniform(0, 0.02), -75.0 + rng.uniform(0, 0.02)))
            for i in range(300)
        ]
        idx = SpatialIndex(entries)
        from bic.geo import haversine_m

        for _ in range(100):
            q = GeoPoint(40.0 + rng.uniform(0, 0.02), -75.0 + rng.uniform(0, 0.02))
            assigned, unassigned = link_predictions([(q, "x")], idx, radius_m=400.0)
            best = min(
                ((haversine_m(q, p), str(i), i) for i, p in entries), key=lambda t: t[:2]
            )
            if best[0] <= 400.0:
                assert assigned[0][1] == best[2]
                assert assigned[0][2] == pytest.approx(best[0])
            else:
                assert unassigned == ["x"]


def _square_building(bid, lat, lon, side=2e-4, label=BuildingClass.HOUSE):
    ring = tuple(
        GeoPoint(a, b)
        for a, b in [
            (lat, lon),
            (lat, lon + side),
            (lat + side, lon + side),
            (lat + side, lon),
            (lat, lon),
        ]
    )
    return BuildingRecord(
        id=bid, footprint=FootprintPolygon(ring), raw_tag="house", truth_label=label
    )


class TestClassifyCity:
    def _setup(self, tmp_path):
        buildings = [
            _square_building(1, 40.0, -75.0),
            _square_building(2, 40.01, -75.0),
            _square_building(3, 40.02, -75.0),
        ]
        records = []
        # Building 1: two kept house images; building 2: all images are outliers;
        # building 3: nothing fetched.
        for bid, heading, scene in [(1, 0.0, "building facade"), (1, 90.0, "house"), (2, 0.0, "other")]:
            rec = image_record(bid, heading)
            img = tmp_path / rec.cache_path
            img.parent.mkdir(parents=True, exist_ok=True)
            img.write_bytes(f"{bid}-{heading}".encode())
            sidecar = {"scene": {scene: 1.0}, "building": {"house": 1.0}}
            (tmp_path / (rec.cache_path + ".labels.json")).write_text(
                __import__("json").dumps(sidecar)
            )
            records.append(rec)
        return buildings, records

    def test_every_building_accounted_for(self, tmp_path):
        buildings, records = self._setup(tmp_path)
        stub = StubBackend()
        predictions, unclassified, report = classify_city(
            buildings, records, tmp_path, stub, stub
        )
        assert len(predictions) + len(unclassified) == len(buildings)
        assert [p.building_id for p in predictions] == [1]
        assert predictions[0].label is BuildingClass.HOUSE
        assert predictions[0].images_used == 2
        reasons = {u.building_id: u.reason for u in unclassified}
        assert reasons == {
            2: UnclassifiedReason.ALL_FILTERED,
            3: UnclassifiedReason.NO_IMAGERY,
        }
        assert report.buildings == 3
        assert report.images_fetched == 3
        assert report.images_kept == 2
        assert report.images_rejected == 1
        assert report.predicted == 1
        assert report.unclassified_no_imagery == 1
        assert report.unclassified_all_filtered == 1

    def test_rejection_label_mode(self):
        labels = BUILDING_LABELS + ("rejection",)
        building = _square_building(1, 40.0, -75.0)
        d = ClassDistribution(
            labels=labels, probs=(0.0,) * 8 + (1.0,)
        )
        predictions, unclassified = fuse_buildings(
            [building], {1: [d]}, {1}, rejection_label="rejection"
        )
        assert predictions == []
        assert unclassified[0].reason is UnclassifiedReason.ALL_FILTERED
