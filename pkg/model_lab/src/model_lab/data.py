"""Dataset layout (one directory per class) with disjoint splits and augmentation.

Augmentation follows the training recipe: resize to the source size, take a
random crop, flip horizontally at random. Evaluation uses the deterministic
center crop. Crops always come out at crop_size x crop_size for any input at
least that large.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .config import BUILDING_CLASSES


class DatasetInvalid(ValueError):
    """The dataset directory does not satisfy the layout contract."""


@dataclass
class DatasetLayout:
    """Class-labeled image files under one root, split into train/val/test."""

    root: Path
    classes: tuple[str, ...]
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        splits = [set(self.train), set(self.val), set(self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = splits[i] & splits[j]
                if overlap:
                    raise DatasetInvalid(f"files appear in two splits: {sorted(overlap)[:3]}")

    @classmethod
    def from_directory(
        cls,
        root: Path,
        *,
        expected_classes: Optional[Sequence[str]] = BUILDING_CLASSES,
        val_fraction: float = 0.2,
        test_fraction: float = 0.0,
        seed: int = 0,
    ) -> "DatasetLayout":
        """Scan one-subdirectory-per-class and draw disjoint splits per class."""
        root = Path(root)
        if not root.is_dir():
            raise DatasetInvalid(f"dataset root is not a directory: {root}")
        found = tuple(sorted(p.name for p in root.iterdir() if p.is_dir()))
        if expected_classes is not None and found != tuple(sorted(expected_classes)):
            raise DatasetInvalid(
                f"class directories {found} do not match expected {tuple(sorted(expected_classes))}"
            )
        if not found:
            raise DatasetInvalid(f"no class directories under {root}")
        rng = random.Random(seed)
        train: list[str] = []
        val: list[str] = []
        test: list[str] = []
        for cls_name in found:
            files = sorted(
                str(p.relative_to(root))
                for p in (root / cls_name).iterdir()
                if p.suffix.lower() in (".png", ".jpg", ".jpeg")
            )
            if not files:
                raise DatasetInvalid(f"class directory {cls_name!r} has no images")
            rng.shuffle(files)
            n_val = round(len(files) * val_fraction)
            n_test = round(len(files) * test_fraction)
            val.extend(files[:n_val])
            test.extend(files[n_val : n_val + n_test])
            train.extend(files[n_val + n_test :])
        return cls(root=root, classes=found, train=sorted(train), val=sorted(val), test=sorted(test))

    def label_of(self, relpath: str) -> int:
        return self.classes.index(Path(relpath).parts[0])


def load_image(path: Path, source_size: int) -> np.ndarray:
    """Image file -> float32 HWC array in [0, 1], resized to source_size square."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        if rgb.size != (source_size, source_size):
            rgb = rgb.resize((source_size, source_size), Image.BILINEAR)
        return np.asarray(rgb, dtype=np.float32) / 255.0


def random_crop_flip(
    img: np.ndarray, crop_size: int, rng: random.Random, *, flip: bool = True
) -> np.ndarray:
    """Random crop_size crop plus optional horizontal flip; input must be >= crop."""
    h, w = img.shape[:2]
    if h < crop_size or w < crop_size:
        raise DatasetInvalid(f"image {h}x{w} smaller than crop {crop_size}")
    y0 = rng.randint(0, h - crop_size)
    x0 = rng.randint(0, w - crop_size)
    out = img[y0 : y0 + crop_size, x0 : x0 + crop_size]
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def center_crop(img: np.ndarray, crop_size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < crop_size or w < crop_size:
        raise DatasetInvalid(f"image {h}x{w} smaller than crop {crop_size}")
    y0 = (h - crop_size) // 2
    x0 = (w - crop_size) // 2
    return np.ascontiguousarray(img[y0 : y0 + crop_size, x0 : x0 + crop_size])


def to_batch_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack HWC float arrays into an NCHW tensor."""
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2))


class SplitLoader:
    """Materialized split: images resized to source size, labels as a tensor."""

    def __init__(self, layout: DatasetLayout, relpaths: Sequence[str], source_size: int):
        self.images = [load_image(layout.root / rel, source_size) for rel in relpaths]
        self.labels = torch.tensor([layout.label_of(rel) for rel in relpaths], dtype=torch.long)

    def __len__(self) -> int:
        return len(self.images)

    def train_batch(
        self, indexes: Sequence[int], crop_size: int, rng: random.Random, flip: bool
    ) -> tuple[torch.Tensor, torch.Tensor]:
        crops = [random_crop_flip(self.images[i], crop_size, rng, flip=flip) for i in indexes]
        return to_batch_tensor(crops), self.labels[list(indexes)]

    def eval_batch(self, crop_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        crops = [center_crop(img, crop_size) for img in self.images]
        return to_batch_tensor(crops), self.labels
