"""Training configuration with the published fine-tuning hyperparameters as defaults."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict


BUILDING_CLASSES = (
    "apartment",
    "church",
    "garage",
    "house",
    "industrial",
    "office_building",
    "retail",
    "roof",
)

SCENE_CLASSES = (
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


@dataclass
class TrainingConfig:
    """SGD fine-tuning setup. Defaults are the published values; change knowingly."""

    batch_size: int = 64
    learning_rate: float = 5e-4
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 30  # epochs
    weight_decay: float = 1e-5
    dropout: float = 0.25
    crop_size: int = 224
    source_size: int = 256
    horizontal_flip: bool = True
    epochs: int = 60
    seed: int = 0
    backbone: str = "tiny"
    head_init_bound: float = 0.01
    pretrained: bool = True
    pretrained_fc: bool = False  # keep pretrained inner FC layers instead of random init

    def __post_init__(self) -> None:
        positive = {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_every": self.lr_decay_every,
            "weight_decay": self.weight_decay,
            "crop_size": self.crop_size,
            "source_size": self.source_size,
            "epochs": self.epochs,
            "head_init_bound": self.head_init_bound,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.crop_size > self.source_size:
            raise ValueError("crop_size cannot exceed source_size")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate_at(config: TrainingConfig, epoch_index: int) -> float:
    """Step-decayed learning rate for a zero-based epoch index.

    lr(e) = base * factor^(e // every): epochs 0..29 run at the base rate and
    epoch index 30 (the 31st epoch) is the first decayed one.
    """
    if epoch_index < 0:
        raise ValueError(f"epoch_index must be >= 0, got {epoch_index}")
    return config.learning_rate * config.lr_decay_factor ** (
        epoch_index // config.lr_decay_every
    )
