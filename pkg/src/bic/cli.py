"""Command-line entry point: one subcommand per pipeline stage plus `run --all`."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .pipeline import (
    PipelineConfig,
    RunManifest,
    STAGES,
    run_all,
    run_lock,
    run_stage,
)

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bic",
        description="Classify the functionality of individual buildings from "
        "street-level imagery linked to OSM footprints.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="rerun finished stages")

    p_ingest = sub.add_parser("ingest", parents=[common], help="parse OSM XML footprints")
    p_ingest.add_argument("--osm", type=Path, help="input .osm file")
    p_ingest.add_argument("--bbox", help="S,W,N,E bounds filter")

    for name, blurb in (
        ("fetch", "fetch street-view images with caching"),
        ("filter", "drop non-facade images by scene whitelist"),
        ("classify", "classify kept images into the 8 classes"),
        ("fuse", "fuse per-image distributions into building labels"),
        ("map", "emit GeoJSON maps and density grids"),
    ):
        sub.add_parser(name, parents=[common], help=blurb)

    p_eval = sub.add_parser("eval", parents=[common], help="score against OSM truth labels")
    p_eval.add_argument("--sample-n", type=int, help="audit-sample size")
    p_eval.add_argument("--seed", type=int, help="audit-sample seed")

    p_run = sub.add_parser("run", parents=[common], help="run stages end to end")
    p_run.add_argument("--all", action="store_true", required=True, help="run every stage")
    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if getattr(args, "osm", None) is not None:
        overrides["osm_path"] = str(args.osm)
    if getattr(args, "bbox", None) is not None:
        overrides["bbox"] = args.bbox
    if getattr(args, "sample_n", None) is not None:
        overrides["sample_n"] = args.sample_n
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config is not None:
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig(**overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    config = _load_config(args)
    try:
        if args.command == "run":
            run_all(config, force=args.force)
        else:
            out_dir = Path(config.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            with run_lock(out_dir):
                manifest = RunManifest.load_or_create(out_dir, config, force=args.force)
                run_stage(args.command, config, manifest, force=args.force)
    except Exception as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
