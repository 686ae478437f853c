"""Synthetic patch-sequence classification data.

Every class owns a random prototype over a fixed subset of "informative"
patch positions.  A sample is Gaussian noise on all patches plus
``separation`` times its class prototype on the informative ones, so the
classifier has to find those positions; the remaining patches carry no signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import storage


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    informative: np.ndarray
    meta: dict

    @property
    def num_classes(self) -> int:
        return int(self.meta["classes"])

    @property
    def patches(self) -> int:
        return self.x_train.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.x_train.shape[2]


def generate(seed: int, classes: int, train_samples: int, test_samples: int, patches: int,
             patch_dim: int, separation: float = 1.5, informative_patches: int = 4,
             noise: float = 1.0) -> Dataset:
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 1 <= informative_patches <= patches:
        raise ValueError("informative_patches must lie in [1, patches]")
    rng = np.random.default_rng(seed)
    informative = np.sort(rng.choice(patches, size=informative_patches, replace=False))
    protos = rng.standard_normal((classes, informative_patches, patch_dim))
    protos /= np.linalg.norm(protos, axis=-1, keepdims=True)
    protos *= np.sqrt(patch_dim)

    def draw(n: int):
        y = np.arange(n) % classes
        rng.shuffle(y)
        x = noise * rng.standard_normal((n, patches, patch_dim))
        x[:, informative] += separation * protos[y]
        return x.astype(np.float32), y.astype(np.int64)

    x_tr, y_tr = draw(train_samples)
    x_te, y_te = draw(test_samples)
    meta = {
        "seed": seed,
        "classes": classes,
        "patches": patches,
        "patch_dim": patch_dim,
        "separation": separation,
        "noise": noise,
        "informative_patches": [int(i) for i in informative],
    }
    return Dataset(x_tr, y_tr, x_te, y_te, informative, meta)


def save(path: str | Path, ds: Dataset) -> dict:
    tensors = {
        "x_train": ds.x_train,
        "y_train": ds.y_train.astype(np.float32),
        "x_test": ds.x_test,
        "y_test": ds.y_test.astype(np.float32),
    }
    return storage.write_bundle(path, storage.DATASET, tensors, ds.meta)


def load(path: str | Path) -> Dataset:
    manifest, t = storage.read_bundle(path, storage.DATASET)
    meta = manifest["meta"]
    return Dataset(
        t["x_train"], t["y_train"].astype(np.int64), t["x_test"], t["y_test"].astype(np.int64),
        np.asarray(meta["informative_patches"], dtype=np.int64), meta,
    )
