"""Procedural 10-class image task standing in for ImageNet.

Each class is a sinusoidal grating with a class-specific spatial frequency
vector.  Every image also carries a weaker grating of a different class (the
distractor), so the label is decided by comparing amplitudes rather than by
mere presence of a frequency.  Phase, contrast, distractor ratio and colour
tint are random per image, and Gaussian pixel noise is added.  Labels are
assigned round-robin so every class gets the same count (+-1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# cycles per image along (y, x)
CLASS_FREQUENCIES = (
    (2, 0),
    (0, 2),
    (2, 2),
    (2, -2),
    (4, 0),
    (0, 4),
    (4, 2),
    (2, 4),
    (4, -2),
    (2, -4),
)
NUM_CLASSES = len(CLASS_FREQUENCIES)


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, ch] float32 in [0, 1]
    labels: np.ndarray  # [N] int32

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index])

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.labels[idx]


def generate(
    n: int,
    seed: int,
    image_size: int = 32,
    channels: int = 3,
    noise: float = 0.2,
    distractor: tuple = (0.5, 0.9),
) -> Dataset:
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % NUM_CLASSES).astype(np.int32)
    other = (labels + rng.integers(1, NUM_CLASSES, size=n)) % NUM_CLASSES
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    table = np.asarray(CLASS_FREQUENCIES, dtype=np.float64)

    def grating(classes, amplitude):
        f = table[classes]
        phase = rng.uniform(0.0, 2 * np.pi, size=n)
        arg = 2 * np.pi * (f[:, 0, None, None] * yy + f[:, 1, None, None] * xx) / image_size
        return amplitude[:, None, None] * np.sin(arg + phase[:, None, None])

    contrast = rng.uniform(0.15, 0.35, size=n)
    wave = grating(labels, contrast) + grating(other, contrast * rng.uniform(*distractor, size=n))
    tint = rng.uniform(0.6, 1.0, size=(n, channels))
    images = 0.5 + wave[..., None] * tint[:, None, None, :]
    images = images + rng.normal(0.0, noise, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels)


def generate_split(seed: int, n_train: int = 5120, n_eval: int = 1024, image_size: int = 32, channels: int = 3):
    train = generate(n_train, seed, image_size, channels)
    evaluation = generate(n_eval, seed + 1_000_003, image_size, channels)
    return train, evaluation
