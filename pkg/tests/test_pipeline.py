"""Pipeline tests: full synthetic-city runs, determinism, resume, stage contracts, CLI."""

import json
from pathlib import Path

import pytest

from bic import cli
from bic.fusion import read_predictions_jsonl, read_unclassified_jsonl
from bic.imagery import StageStatus, read_records_jsonl
from bic.pipeline import (
    LockHeld,
    PipelineConfig,
    RunManifest,
    STAGES,
    StageFailed,
    UpstreamIncomplete,
    run_all,
    run_lock,
    run_stage,
    sha256_file,
)

from synthcity import seed_sidecars


def city_config(city_root: Path, out_dir: Path, **overrides) -> PipelineConfig:
    defaults = dict(
        osm_path=str(city_root / "city.osm"),
        out_dir=str(out_dir),
        transport=f"replay:{city_root / 'fixtures'}",
        scene_backend="stub",
        building_backend="stub",
        fetch_workers=4,
        backoff_s=0.0,
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


def run_city(city, tmp_path, name="run", **overrides):
    root, plan = city
    out_dir = tmp_path / name
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_sidecars(plan, out_dir)
    config = city_config(root, out_dir, **overrides)
    manifest = run_all(config)
    return out_dir, config, manifest


class TestEndToEnd:
    def test_predictions_match_planted_labels(self, city, tmp_path):
        root, plan = city
        out_dir, _, _ = run_city(city, tmp_path)
        predictions = read_predictions_jsonl(out_dir / "predictions.jsonl")
        got = {p.building_id: p.label.value for p in predictions}
        want = {
            b["id"]: b["class"]
            for b in plan["buildings"]
            if b["id"] not in set(plan["no_imagery_ids"])
        }
        assert got == want
        assert all(p.confidence == 1.0 for p in predictions)
        kept_per_building = {
            b["id"]: sum(1 for p in b["panos"] if not p["outlier"])
            for b in plan["buildings"]
        }
        for p in predictions:
            assert p.images_used == kept_per_building[p.building_id]

    def test_unclassified_matches_plan(self, city, tmp_path):
        root, plan = city
        out_dir, _, _ = run_city(city, tmp_path, name="run-uncls")
        unclassified = read_unclassified_jsonl(out_dir / "unclassified.jsonl")
        assert sorted(u.building_id for u in unclassified) == plan["no_imagery_ids"]
        assert all(u.reason.value == "no_imagery" for u in unclassified)
        report = json.loads((out_dir / "run_report.json").read_text())
        assert report["predicted"] == plan["expected"]["predicted"]
        assert report["unclassified_no_imagery"] == plan["expected"]["no_imagery"]
        assert report["unclassified_all_filtered"] == plan["expected"]["all_filtered"]

    def test_cache_matches_archive_manifest(self, city, tmp_path):
        root, plan = city
        out_dir, _, _ = run_city(city, tmp_path, name="run-cache")
        cached = sorted((out_dir / "cache").rglob("*.png"))
        assert len(cached) == plan["expected"]["cache_files"]
        planned_paths = {
            p["cache_path"] for b in plan["buildings"] for p in b["panos"]
        }
        assert {str(p.relative_to(out_dir)) for p in cached} == planned_paths

    def test_filter_stage_matches_plan(self, city, tmp_path):
        root, plan = city
        out_dir, _, _ = run_city(city, tmp_path, name="run-filter")
        filtered = read_records_jsonl(out_dir / "filtered.jsonl")
        kept = [r for r in filtered if r.stage_status is StageStatus.KEPT]
        rejected = [r for r in filtered if r.stage_status is StageStatus.REJECTED_OUTLIER]
        assert len(kept) == plan["expected"]["images_kept"]
        assert len(rejected) == plan["expected"]["images_rejected"]
        outlier_paths = {
            p["cache_path"]
            for b in plan["buildings"]
            for p in b["panos"]
            if p["outlier"]
        }
        assert {r.cache_path for r in rejected} == outlier_paths

    def test_metrics_perfect_accuracy(self, city, tmp_path):
        out_dir, _, _ = run_city(city, tmp_path, name="run-metrics")
        metrics = json.loads((out_dir / "metrics.json").read_text())
        assert metrics["overall"]["precision"] == 1.0
        assert metrics["overall"]["recall"] == 1.0
        assert metrics["overall"]["f1"] == 1.0
        diag = sum(metrics["confusion"][i][i] for i in range(8))
        assert diag == metrics["evaluated"] == 43
        assert metrics["unclassified"]["no_imagery"] == 7

    def test_map_products(self, city, tmp_path):
        root, plan = city
        out_dir, _, _ = run_city(city, tmp_path, name="run-map")
        fp = json.loads((out_dir / "map_footprints.geojson").read_text())
        assert len(fp["features"]) == plan["expected"]["buildings"]
        pts = json.loads((out_dir / "map_points.geojson").read_text())
        assert len(pts["features"]) == plan["expected"]["predicted"]
        for cls, count in plan["expected"]["class_counts"].items():
            grid = json.loads((out_dir / f"density_{cls}.json").read_text())
            assert sum(map(sum, grid["counts"])) == count

    def test_byte_identical_across_runs(self, city, tmp_path):
        out_a, _, _ = run_city(city, tmp_path, name="run-a")
        out_b, _, _ = run_city(city, tmp_path, name="run-b")
        for artifact in [
            "predictions.jsonl",
            "unclassified.jsonl",
            "metrics.json",
            "metrics.txt",
            "map_footprints.geojson",
            "map_points.geojson",
        ]:
            assert sha256_file(out_a / artifact) == sha256_file(out_b / artifact), artifact
        # The image caches are byte-identical trees as well.
        rel_a = {p.relative_to(out_a): p for p in (out_a / "cache").rglob("*.png")}
        rel_b = {p.relative_to(out_b): p for p in (out_b / "cache").rglob("*.png")}
        assert rel_a.keys() == rel_b.keys()
        for rel, path_a in rel_a.items():
            assert path_a.read_bytes() == rel_b[rel].read_bytes(), rel


class TestStageContracts:
    def test_fetch_before_ingest_fails(self, city, tmp_path):
        root, _ = city
        config = city_config(root, tmp_path / "bad")
        manifest = RunManifest.fresh(config)
        with pytest.raises(UpstreamIncomplete):
            run_stage("fetch", config, manifest)

    def test_rerun_done_stage_is_noop(self, city, tmp_path):
        out_dir, config, _ = run_city(city, tmp_path, name="run-noop")
        manifest_bytes = (out_dir / "manifest.json").read_bytes()
        digests = {
            name: sha256_file(out_dir / name)
            for name in ["predictions.jsonl", "metrics.json"]
        }
        run_all(config)  # every stage already done: full no-op
        assert (out_dir / "manifest.json").read_bytes() == manifest_bytes
        for name, digest in digests.items():
            assert sha256_file(out_dir / name) == digest

    def test_resume_between_stages_reaches_same_digests(self, city, tmp_path):
        root, plan = city
        out_dir = tmp_path / "run-resume"
        out_dir.mkdir()
        seed_sidecars(plan, out_dir)
        config = city_config(root, out_dir)
        # First session dies after the classify stage.
        manifest = RunManifest.load_or_create(out_dir, config)
        for name in STAGES[: STAGES.index("fuse")]:
            manifest = run_stage(name, config, manifest)
        # Second session resumes from the manifest on disk.
        resumed = RunManifest.load_or_create(out_dir, config)
        for name in STAGES:
            resumed = run_stage(name, config, resumed)
        reference, _, _ = run_city(city, tmp_path, name="run-reference")
        for artifact in ["predictions.jsonl", "metrics.json"]:
            assert sha256_file(out_dir / artifact) == sha256_file(reference / artifact)

    def test_fetch_resume_skips_recorded_buildings(self, city, tmp_path):
        out_dir, config, _ = run_city(city, tmp_path, name="run-refetch")
        before = sha256_file(out_dir / "images.jsonl")
        manifest = RunManifest.load_or_create(out_dir, config)
        run_stage("fetch", config, manifest, force=True)
        assert sha256_file(out_dir / "images.jsonl") == before

    def test_config_drift_rejected(self, city, tmp_path):
        root, _ = city
        out_dir, config, _ = run_city(city, tmp_path, name="run-drift")
        changed = city_config(root, out_dir, link_radius_m=99.0)
        with pytest.raises(StageFailed):
            RunManifest.load_or_create(out_dir, changed)

    def test_lock_excludes_concurrent_runs(self, tmp_path):
        with run_lock(tmp_path):
            with pytest.raises(LockHeld):
                with run_lock(tmp_path):
                    pass
        # Released: can lock again.
        with run_lock(tmp_path):
            pass

    def test_unknown_stage(self, city, tmp_path):
        root, _ = city
        config = city_config(root, tmp_path / "x")
        with pytest.raises(ValueError):
            run_stage("polish", config, RunManifest.fresh(config))


class TestConfig:
    def test_defaults_are_pinned(self):
        config = PipelineConfig()
        assert config.viewpoints_k == 4
        assert config.offset_m == 30.0
        assert config.pitch == 10.0
        assert config.image_width == 512 and config.image_height == 512
        assert config.fov == 90.0
        assert config.whitelist_top_k == 1
        assert config.link_radius_m == 50.0

    def test_range_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(viewpoints_k=0)
        with pytest.raises(ValueError):
            PipelineConfig(pitch=120.0)
        with pytest.raises(ValueError):
            PipelineConfig(rate_limit=-1.0)

    def test_from_file_with_overrides(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"osm_path": "a.osm", "seed": 5}))
        config = PipelineConfig.from_file(path, out_dir="elsewhere")
        assert config.osm_path == "a.osm"
        assert config.seed == 5
        assert config.out_dir == "elsewhere"
        path.write_text(json.dumps({"bogus_key": 1}))
        with pytest.raises(ValueError):
            PipelineConfig.from_file(path)


class TestCli:
    def test_run_all_and_eval_sample(self, city, tmp_path):
        root, plan = city
        out_dir = tmp_path / "cli-run"
        out_dir.mkdir()
        seed_sidecars(plan, out_dir)
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "osm_path": str(root / "city.osm"),
                    "out_dir": str(out_dir),
                    "transport": f"replay:{root / 'fixtures'}",
                    "backoff_s": 0.0,
                }
            )
        )
        assert cli.main(["run", "--all", "--config", str(cfg_path)]) == 0
        assert (out_dir / "metrics.json").exists()
        assert (
            cli.main(
                ["eval", "--config", str(cfg_path), "--sample-n", "20", "--seed", "3", "--force"]
            )
            == 0
        )
        metrics = json.loads((out_dir / "metrics.json").read_text())
        assert len(metrics["audit_sample"]) == 20
        assert metrics["evaluated"] == 20

    def test_stage_order_error_returns_nonzero(self, city, tmp_path):
        root, _ = city
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "osm_path": str(root / "city.osm"),
                    "out_dir": str(tmp_path / "cli-bad"),
                    "transport": f"replay:{root / 'fixtures'}",
                }
            )
        )
        assert cli.main(["fuse", "--config", str(cfg_path)]) == 1
