"""CLI: fine-tune on a directory-per-class dataset, serve a trained checkpoint."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import BUILDING_CLASSES, SCENE_CLASSES, TrainingConfig
from .data import DatasetLayout


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="model-lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fine-tune a classifier")
    p_train.add_argument("--data", type=Path, required=True, help="dataset root")
    p_train.add_argument("--out", type=Path, required=True, help="checkpoint/curves dir")
    p_train.add_argument("--role", choices=["building", "scene"], default="building")
    p_train.add_argument("--backbone", default="tiny")
    p_train.add_argument("--epochs", type=int, default=60)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--val-fraction", type=float, default=0.2)
    p_train.add_argument(
        "--pretrained-fc",
        action="store_true",
        help="keep pretrained inner FC layers instead of random init",
    )

    p_serve = sub.add_parser("serve", help="serve a checkpoint over /v1/classify")
    p_serve.add_argument("--checkpoint", type=Path, required=True)
    p_serve.add_argument("--port", type=int, default=8500)
    p_serve.add_argument("--host", default="127.0.0.1")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "train":
        from .train import finetune

        config = TrainingConfig(
            backbone=args.backbone,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            pretrained_fc=args.pretrained_fc,
        )
        expected = BUILDING_CLASSES if args.role == "building" else SCENE_CLASSES
        layout = DatasetLayout.from_directory(
            args.data, expected_classes=expected, val_fraction=args.val_fraction, seed=args.seed
        )
        result = finetune(config, layout, out_dir=args.out, role=args.role)
        print(f"best val top-1: {result.best_val_top1:.3f}; artifact: {result.artifact_path}")
        return 0
    if args.command == "serve":
        from .serve import serve

        serve(args.checkpoint, args.port, args.host)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
