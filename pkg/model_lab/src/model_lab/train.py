"""Fine-tuning: pretrained convolutional backbone, freshly initialized head, SGD.

Backbones: a small built-in GroupNorm CNN ("tiny", trained from scratch) and
the torchvision architectures studied at full scale (alexnet, vgg16, resnet18,
resnet34). Pretrained weights are attempted for the torchvision backbones and
fall back to random initialization when the weight host is unreachable; the
outcome is recorded in the artifact. Fully connected layers are always
initialized from a uniform distribution unless pretrained_fc keeps the inner
ones.
"""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .config import TrainingConfig, learning_rate_at
from .data import DatasetLayout, SplitLoader

log = logging.getLogger(__name__)

TORCHVISION_BACKBONES = ("alexnet", "vgg16", "resnet18", "resnet34")


class DivergedTraining(RuntimeError):
    """Loss became non-finite; curves up to the failing epoch were dumped."""


@dataclass
class EpochRow:
    epoch: int  # 1-based, as written to the curves CSV
    train_loss: float
    val_loss: float
    val_top1: float


@dataclass
class TrainResult:
    model: nn.Module
    classes: tuple[str, ...]
    curves: list[EpochRow]
    best_val_top1: float
    pretrained_loaded: bool
    artifact_path: Optional[Path] = None


class TinyBackbone(nn.Module):
    """Small GroupNorm CNN trained from scratch; enough for toy-scale fixtures."""

    def __init__(self, n_classes: int, dropout: float, head_init_bound: float) -> None:
        super().__init__()
        width = 128
        self.features = nn.Sequential(
            nn.Conv2d(3, width // 2, 7, stride=4, padding=3),
            nn.GroupNorm(8, width // 2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
            nn.GroupNorm(8, width),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.classifier = nn.Sequential(nn.Dropout(dropout), nn.Linear(width, n_classes))
        _uniform_init(self.classifier[1], head_init_bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x).flatten(1))


def _uniform_init(linear: nn.Linear, bound: float) -> None:
    nn.init.uniform_(linear.weight, -bound, bound)
    if linear.bias is not None:
        nn.init.uniform_(linear.bias, -bound, bound)


def build_model(config: TrainingConfig, n_classes: int) -> tuple[nn.Module, bool]:
    """Instantiate the backbone; returns (model, pretrained_weights_loaded)."""
    if config.backbone == "tiny":
        return TinyBackbone(n_classes, config.dropout, config.head_init_bound), False
    if config.backbone not in TORCHVISION_BACKBONES:
        raise ValueError(f"unknown backbone: {config.backbone!r}")
    import torchvision.models as tvm

    ctor = getattr(tvm, config.backbone)
    loaded = False
    model = None
    if config.pretrained:
        try:
            model = ctor(weights="DEFAULT")
            loaded = True
        except Exception as exc:  # weight host unreachable in offline sandboxes
            log.warning("pretrained weights unavailable (%s); using random init", exc)
    if model is None:
        model = ctor(weights=None)

    if config.backbone in ("alexnet", "vgg16"):
        for module in model.classifier:
            if isinstance(module, nn.Dropout):
                module.p = config.dropout
        in_features = model.classifier[-1].in_features
        model.classifier[-1] = nn.Linear(in_features, n_classes)
        _uniform_init(model.classifier[-1], config.head_init_bound)
        if not config.pretrained_fc:
            for module in model.classifier:
                if isinstance(module, nn.Linear) and module.out_features != n_classes:
                    _uniform_init(module, config.head_init_bound)
    else:  # resnets: single fc layer
        in_features = model.fc.in_features
        model.fc = nn.Linear(in_features, n_classes)
        _uniform_init(model.fc, config.head_init_bound)
    return model, loaded


def finetune(
    config: TrainingConfig,
    dataset: DatasetLayout,
    *,
    out_dir: Optional[Path] = None,
    role: str = "building",
) -> TrainResult:
    """Train with the configured recipe; track curves and keep the best-val model.

    Writes curves.csv (epoch, train_loss, val_loss, val_top1) and
    checkpoint.pt (best validation top-1) under out_dir when given.
    """
    if not dataset.train or not dataset.val:
        raise ValueError("dataset needs non-empty train and val splits")
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)

    model, pretrained_loaded = build_model(config, len(dataset.classes))
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    loss_fn = nn.CrossEntropyLoss()

    train_split = SplitLoader(dataset, dataset.train, config.source_size)
    val_split = SplitLoader(dataset, dataset.val, config.source_size)

    curves: list[EpochRow] = []
    best_top1 = -1.0
    best_state: Optional[dict] = None

    for epoch_index in range(config.epochs):
        lr = learning_rate_at(config, epoch_index)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        order = list(range(len(train_split)))
        rng.shuffle(order)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            x, y = train_split.train_batch(
                batch_idx, config.crop_size, rng, flip=config.horizontal_flip
            )
            optimizer.zero_grad()
            loss = loss_fn(model(x), y)
            if not math.isfinite(loss.item()):
                _write_curves(curves, out_dir)
                raise DivergedTraining(f"non-finite loss at epoch {epoch_index + 1}")
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        model.eval()
        with torch.no_grad():
            xv, yv = val_split.eval_batch(config.crop_size)
            logits = model(xv)
            val_loss = loss_fn(logits, yv).item()
            val_top1 = (logits.argmax(1) == yv).float().mean().item()
        curves.append(
            EpochRow(
                epoch=epoch_index + 1,
                train_loss=sum(losses) / len(losses),
                val_loss=val_loss,
                val_top1=val_top1,
            )
        )
        log.info(
            "epoch %d: lr %.2e train %.4f val %.4f top1 %.3f",
            epoch_index + 1,
            lr,
            curves[-1].train_loss,
            val_loss,
            val_top1,
        )
        if val_top1 > best_top1:
            best_top1 = val_top1
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    artifact_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_curves(curves, out_dir)
        artifact_path = out_dir / "checkpoint.pt"
        save_artifact(model, dataset.classes, config, role, pretrained_loaded, artifact_path)
    return TrainResult(
        model=model,
        classes=dataset.classes,
        curves=curves,
        best_val_top1=best_top1,
        pretrained_loaded=pretrained_loaded,
        artifact_path=artifact_path,
    )


def _write_curves(curves: list[EpochRow], out_dir: Optional[Path]) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "curves.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_top1"])
        for row in curves:
            writer.writerow([row.epoch, row.train_loss, row.val_loss, row.val_top1])


def save_artifact(
    model: nn.Module,
    classes: tuple[str, ...],
    config: TrainingConfig,
    role: str,
    pretrained_loaded: bool,
    path: Path,
) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "classes": list(classes),
            "role": role,
            "config": config.to_dict(),
            "pretrained_loaded": pretrained_loaded,
        },
        path,
    )


def load_artifact(path: Path) -> tuple[nn.Module, tuple[str, ...], str, TrainingConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainingConfig(**payload["config"])
    classes = tuple(payload["classes"])
    model, _ = build_model(config, len(classes))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, classes, payload["role"], config
