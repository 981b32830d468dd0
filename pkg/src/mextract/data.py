"""Datasets and locally trained victims for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class Dataset:
    name: str
    inputs: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise ValueError(f"dataset {self.name!r} is unlabeled")
        return int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.name, self.inputs[idx], None if self.labels is None else self.labels[idx])


def load_digits() -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits, 10 classes, 1797 images."""
    from sklearn.datasets import load_digits as _load

    d = _load()
    x = (d.images / 16.0).astype(np.float32)[:, None, :, :]
    return Dataset("digits", x, d.target.astype(np.int64))


def make_blobs_images(n: int = 600, num_classes: int = 4, side: int = 8, seed: int = 0,
                      noise: float = 0.08) -> Dataset:
    """Smooth class-prototype images plus noise; cheap stand-in for tests."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    protos = []
    for c in range(num_classes):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        protos.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.05))
    labels = rng.integers(0, num_classes, size=n)
    x = np.stack([protos[c] for c in labels]) + rng.normal(0, noise, size=(n, side, side))
    x = np.clip(x, 0, 1).astype(np.float32)[:, None]
    return Dataset("blobs", x, labels.astype(np.int64))


def load_npz(path: str | Path, name: str | None = None) -> Dataset:
    """``.npz`` with ``x`` (n, c, h, w) in [0, 1] and optional integer ``y``."""
    with np.load(Path(path), allow_pickle=False) as z:
        if "x" not in z:
            raise ConfigError(f"{path}: missing array 'x'")
        x = z["x"].astype(np.float32)
        y = z["y"].astype(np.int64) if "y" in z else None
    return Dataset(name or Path(path).stem, x, y)


def load_dataset(ref: str) -> Dataset:
    if ref == "digits":
        return load_digits()
    if ref.startswith("blobs"):
        return make_blobs_images()
    if ref.endswith(".npz"):
        return load_npz(ref)
    raise ConfigError(f"unknown dataset {ref!r}")
