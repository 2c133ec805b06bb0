"""Procedural image-classification data for desk-scale victim models.

Each class is a fixed single-channel pattern (see :data:`RECIPES`) plus
seeded Gaussian pixel noise.  Sample ``j`` of class ``c`` sits at index
``c * samples_per_class + j``; even indices form the training split and odd
indices the test split.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, PreconditionError
from ..nnengine import Dataset
from ..prng import CounterRNG

NOISE_STREAM = 0x4E4F4953  # "NOIS"


def _grid(n):
    r, c = np.mgrid[0:n, 0:n].astype(np.float64)
    return r, c, (n - 1) / 2.0


def _stripes(n, fn):
    r, c, _ = _grid(n)
    return np.where(fn(r.astype(int), c.astype(int)) % 2 == 0, 1.0, -1.0)


def _blob(n):
    r, c, m = _grid(n)
    return 2.0 * np.exp(-((r - m) ** 2 + (c - m) ** 2) / (2 * (n / 6.0) ** 2)) - 1.0


def _ring(n):
    r, c, m = _grid(n)
    d = np.sqrt((r - m) ** 2 + (c - m) ** 2)
    return np.where(np.abs(d - n / 3.0) < n / 10.0, 1.0, -1.0)


def _cross(n):
    r, c, m = _grid(n)
    w = max(1.0, n / 10.0)
    return np.where((np.abs(r - m) < w) | (np.abs(c - m) < w), 1.0, -1.0)


def _ramp(n):
    r, c, _ = _grid(n)
    return (r + c) / (n - 1) - 1.0


# name -> pattern generator; values lie in [-1, 1]
RECIPES = {
    "horizontal_bars": lambda n: _stripes(n, lambda r, c: r // 2),
    "vertical_bars": lambda n: _stripes(n, lambda r, c: c // 2),
    "diagonal_bars": lambda n: _stripes(n, lambda r, c: (r + c) // 2),
    "antidiagonal_bars": lambda n: _stripes(n, lambda r, c: (r - c + 4 * n) // 2),
    "blob": _blob,
    "ring": _ring,
    "checker_fine": lambda n: _stripes(n, lambda r, c: r // 2 + c // 2),
    "checker_coarse": lambda n: _stripes(n, lambda r, c: r // 4 + c // 4),
    "cross": _cross,
    "ramp": _ramp,
}


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 8
    samples_per_class: int = 500
    image_size: int = 16
    noise_sigma: float = 0.3
    seed: int = 0
    # pattern contrast; kept below 1 so noise makes the task non-trivial
    amplitude: float = 0.3

    def to_json(self) -> dict:
        return asdict(self)


def class_templates(spec: SyntheticDatasetSpec) -> np.ndarray:
    if spec.classes < 2:
        raise PreconditionError("need at least 2 classes")
    if spec.classes > len(RECIPES):
        raise ConfigError(f"{spec.classes} classes requested but only {len(RECIPES)} recipes exist")
    if spec.image_size < 4:
        raise ConfigError("image_size must be >= 4")
    fns = list(RECIPES.values())[:spec.classes]
    return np.stack([spec.amplitude * fn(spec.image_size) for fn in fns]).astype(np.float32)


def gen_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    tmpl = class_templates(spec)
    n = spec.samples_per_class
    x = np.repeat(tmpl, n, axis=0)[:, None, :, :].astype(np.float64)
    if spec.noise_sigma:
        x += spec.noise_sigma * CounterRNG(spec.seed, NOISE_STREAM).normal(x.size).reshape(x.shape)
    y = np.repeat(np.arange(spec.classes, dtype=np.int64), n)
    return Dataset(x.astype(np.float32), y)


def split(data: Dataset) -> tuple[Dataset, Dataset]:
    """(train, test) by index parity."""
    return data.take(slice(0, None, 2)), data.take(slice(1, None, 2))
