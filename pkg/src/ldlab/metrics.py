"""Controllability and diversity measurements at desk scale.

mini_cas follows the crop-classification recipe: object regions are cropped
at their ground-truth boxes, resized to 32x32, a small fixed convolutional
classifier is trained on crops from generated images and scored on crops
from real images. The classifier is a controlled constant (fixed seed,
fixed epoch budget) because the score compares generators, not classifiers.

The diversity proxy replaces a learned perceptual distance with the mean
absolute difference in a fixed seeded random-projection feature space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from PIL import Image

from .data import Sample
from .errors import InsufficientData, ShapeMismatch
from .rng import numpy_generator

DIVERSITY_PROJECTION_TAG = "diversity-projection-v1"
DIVERSITY_FEATURES = 256


@dataclass
class CropBatch:
    images: np.ndarray  # N x size x size x 3 float32 in [-1, 1]
    labels: np.ndarray  # N int64, zero-based category index
    provenance: str  # "generated" | "real"


def crop_objects(sample: Sample, size: int = 32) -> list[tuple[np.ndarray, int]]:
    """Crop each ground-truth box from the sample and resize to size x size."""
    h, w = sample.image.shape[:2]
    crops = []
    for obj in sample.layout:
        x0 = int(np.floor(obj.bbox.x0 * w))
        y0 = int(np.floor(obj.bbox.y0 * h))
        x1 = max(x0 + 1, int(np.ceil(obj.bbox.x1 * w)))
        y1 = max(y0 + 1, int(np.ceil(obj.bbox.y1 * h)))
        patch = sample.image[y0:y1, x0:x1]
        as_uint8 = np.clip((patch + 1.0) * 127.5, 0, 255).astype(np.uint8)
        resized = Image.fromarray(as_uint8).resize((size, size), Image.BILINEAR)
        arr = np.asarray(resized, dtype=np.float32) / 127.5 - 1.0
        crops.append((arr, obj.category - 1))
    return crops


def crop_batch(samples: Sequence[Sample], provenance: str, size: int = 32) -> CropBatch:
    images, labels = [], []
    for sample in samples:
        for arr, label in crop_objects(sample, size):
            images.append(arr)
            labels.append(label)
    return CropBatch(
        np.stack(images).astype(np.float32),
        np.array(labels, dtype=np.int64),
        provenance,
    )


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int = 12
    channels: tuple = (32, 64, 128, 128)
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    min_per_class: int = 20
    crop_size: int = 32


class CropClassifier(nn.Module):
    """Four stride-2 conv blocks, global average pool, linear head."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        layers = []
        prev = 3
        for ch in config.channels:
            layers += [
                nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, ch), ch),
                nn.SiLU(),
            ]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, config.num_classes)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return self.head(h)


def _to_tensor(batch: CropBatch) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(batch.images).permute(0, 3, 1, 2).contiguous()
    return x, torch.from_numpy(batch.labels)


def train_crop_classifier(train: CropBatch, config: ClassifierConfig) -> CropClassifier:
    counts = np.bincount(train.labels, minlength=config.num_classes)
    short = [int(c) for c in counts if c < config.min_per_class]
    if short:
        raise InsufficientData(
            f"need >= {config.min_per_class} crops per class, got counts {counts.tolist()}"
        )
    torch.manual_seed(config.seed)
    model = CropClassifier(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    x, y = _to_tensor(train)
    order_rng = numpy_generator("cas-order", config.seed)
    model.train()
    for _ in range(config.epochs):
        perm = torch.from_numpy(order_rng.permutation(len(y)))
        for start in range(0, len(y), config.batch_size):
            idx = perm[start : start + config.batch_size]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


def classifier_accuracy(model: CropClassifier, batch: CropBatch, num_classes: int):
    x, y = _to_tensor(batch)
    with torch.no_grad():
        pred = model(x).argmax(dim=1)
    correct = (pred == y).numpy()
    per_class = {}
    for c in range(num_classes):
        mask = batch.labels == c
        if mask.any():
            per_class[c] = float(correct[mask].mean())
    return float(correct.mean()), per_class


def mini_cas(
    generated: Sequence[Sample],
    real: Sequence[Sample],
    config: ClassifierConfig = ClassifierConfig(),
) -> dict:
    """Train on generated crops, score top-1 accuracy on real crops."""
    train = crop_batch(generated, "generated", config.crop_size)
    test = crop_batch(real, "real", config.crop_size)
    model = train_crop_classifier(train, config)
    accuracy, per_class = classifier_accuracy(model, test, config.num_classes)
    return {
        "metric": "mini_cas",
        "value": accuracy,
        "per_class": per_class,
        "n_train": int(len(train.labels)),
        "n_test": int(len(test.labels)),
        "seed": config.seed,
    }


def _projection(shape: tuple) -> np.ndarray:
    rng = numpy_generator(DIVERSITY_PROJECTION_TAG, tuple(shape))
    n = int(np.prod(shape))
    return rng.standard_normal((n, DIVERSITY_FEATURES)) / np.sqrt(n)


def diversity_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"pair shapes differ: {a.shape} vs {b.shape}")
    proj = _projection(a.shape)
    fa = a.reshape(-1).astype(np.float64) @ proj
    fb = b.reshape(-1).astype(np.float64) @ proj
    return float(np.mean(np.abs(fa - fb)))


def diversity_proxy(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float]:
    """Mean and standard deviation of pairwise feature distances."""
    values = np.array([diversity_distance(a, b) for a, b in pairs], dtype=np.float64)
    return float(values.mean()), float(values.std())
