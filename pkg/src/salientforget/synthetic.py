"""Procedural stand-in for CIFAR-10, written in the real binary layout.

Used when the real archives are unavailable (offline machines, CI). Each
class owns a smooth colour template; every image mixes its class template
with a per-image smooth nuisance pattern, a random shift and pixel noise, so
a small CNN can memorize the training set but generalizes only partially.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES, encode_cifar10


def _smooth_fields(rng: np.random.Generator, n: int, grid: int = 4) -> np.ndarray:
    """n random 3x32x32 fields in roughly [-1, 1], bilinearly upsampled from a coarse grid."""
    coarse = rng.uniform(-1.0, 1.0, size=(n, 3, grid + 1, grid + 1))
    pos = np.linspace(0, grid, 32)
    i0 = np.minimum(pos.astype(int), grid - 1)
    frac = pos - i0
    rows = coarse[:, :, i0, :] * (1 - frac)[None, None, :, None] + coarse[:, :, i0 + 1, :] * frac[None, None, :, None]
    return rows[:, :, :, i0] * (1 - frac) + rows[:, :, :, i0 + 1] * frac


def synthetic_cifar10(train_per_class: int = 600, test_per_class: int = 200, seed: int = 0,
                      signal: float = 22.0, nuisance: float = 60.0, noise: float = 15.0, max_shift: int = 3,
                      nuisance_grid: int = 8):
    """Return (train_images, train_labels, test_images, test_labels) as uint8 / int arrays."""
    rng = np.random.default_rng(seed)
    templates = _smooth_fields(rng, 10)

    def draw(per_class: int):
        labels = np.repeat(np.arange(10), per_class)
        labels = labels[rng.permutation(len(labels))]
        n = len(labels)
        contrast = rng.uniform(0.6, 1.4, size=(n, 1, 1, 1))
        img = 128.0 + signal * contrast * templates[labels] + nuisance * _smooth_fields(rng, n, nuisance_grid)
        img += rng.normal(0.0, noise, size=img.shape)
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            img[i] = np.roll(img[i], (dy, dx), axis=(1, 2))
        return np.clip(np.rint(img), 0, 255).astype(np.uint8), labels.astype(np.uint8)

    train_x, train_y = draw(train_per_class)
    test_x, test_y = draw(test_per_class)
    return train_x, train_y, test_x, test_y


def write_synthetic_cifar10(directory, train_per_class: int = 600, test_per_class: int = 200, seed: int = 0,
                            **kw) -> Path:
    """Write five training batches and one test batch in the CIFAR-10 binary format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = synthetic_cifar10(train_per_class, test_per_class, seed, **kw)
    for name, chunk in zip(CIFAR10_TRAIN_FILES, np.array_split(np.arange(len(train_y)), 5)):
        (directory / name).write_bytes(encode_cifar10(train_x[chunk], train_y[chunk]))
    (directory / CIFAR10_TEST_FILE).write_bytes(encode_cifar10(test_x, test_y))
    return directory
