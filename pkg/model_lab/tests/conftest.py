"""Toy fixtures: color-separable datasets generated once per session."""

import numpy as np
import pytest
from PIL import Image

from model_lab.config import BUILDING_CLASSES, SCENE_CLASSES

CLASS_COLORS = [
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (67, 99, 216),
    (245, 130, 49),
    (145, 30, 180),
    (66, 212, 244),
    (128, 128, 0),
    (250, 190, 212),
    (0, 128, 128),
]


def write_color_dataset(root, classes, images_per_class=10, size=256, seed=3):
    rng = np.random.RandomState(seed)
    for ci, cls in enumerate(classes):
        cls_dir = root / cls
        cls_dir.mkdir(parents=True)
        base = np.array(CLASS_COLORS[ci % len(CLASS_COLORS)], dtype=np.float32)
        for j in range(images_per_class):
            noise = rng.uniform(-5.0, 5.0, (size, size, 3)).astype(np.float32)
            img = np.clip(base[None, None, :] + noise, 0, 255).astype(np.uint8)
            Image.fromarray(img).save(cls_dir / f"{cls.replace(' ', '_')}_{j}.png")
    return root


@pytest.fixture(scope="session")
def toy_building_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-building")
    return write_color_dataset(root, BUILDING_CLASSES)


@pytest.fixture(scope="session")
def toy_scene_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-scene")
    return write_color_dataset(root, SCENE_CLASSES, images_per_class=6)
