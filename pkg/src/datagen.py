#!/usr/bin/env python3
"""
Datagen - Synthetic source/target domain pairs, dataset containers and seeded minibatch sampling.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Tuple

import numpy as np
import pandas as pd

from config import ShiftSpec
from errors import DataError
from objective import DomainBatch

logger = logging.getLogger(__name__)

MOON_CENTER = np.array([0.5, 0.25])

# 5x5 glyphs for the patch-blend family
GLYPHS = np.array([
    [[0, 0, 0, 0, 0], [0, 0, 0, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 0], [0, 0, 0, 0, 0]],  # bar
    [[0, 0, 1, 0, 0], [0, 0, 1, 0, 0], [0, 0, 1, 0, 0], [0, 0, 1, 0, 0], [0, 0, 1, 0, 0]],  # pillar
    [[1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 1, 0, 0], [0, 0, 0, 1, 0], [0, 0, 0, 0, 1]],  # diagonal
    [[1, 1, 1, 1, 1], [1, 0, 0, 0, 1], [1, 0, 0, 0, 1], [1, 0, 0, 0, 1], [1, 1, 1, 1, 1]],  # box
], dtype=np.float64)


@dataclass
class DomainDataset:
    inputs: np.ndarray
    labels: Optional[np.ndarray]
    domain: Literal["source", "target"]
    n_classes: int
    name: str = field(default="")

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.inputs):
                raise DataError(f"{self.domain}: {len(self.inputs)} inputs but {len(self.labels)} labels")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataError(f"{self.domain}: labels outside [0, {self.n_classes})")
        elif self.domain == "source":
            raise DataError("source dataset requires labels")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, index: np.ndarray) -> "DomainDataset":
        labels = None if self.labels is None else self.labels[index]
        return DomainDataset(self.inputs[index], labels, self.domain, self.n_classes, self.name)

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.inputs, None, "target", self.n_classes, self.name)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def rotation_matrix(degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def _balanced_labels(n_per_class: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(k), n_per_class))


def _two_moons(labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    t = rng.uniform(0.0, np.pi, size=len(labels))
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.where(labels[:, None] == 0, upper, lower)
    return x - MOON_CENTER + rng.normal(0.0, noise, size=x.shape)


def moon_class_means() -> np.ndarray:
    """Closed-form class means of the centered two-moons family."""
    return np.array([[0.0, 2.0 / np.pi], [1.0, 0.5 - 2.0 / np.pi]]) - MOON_CENTER


def blob_centers(k: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _blobs(labels: np.ndarray, k: int, radius: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    return blob_centers(k, radius)[labels] + rng.normal(0.0, max(noise, 1e-12), size=(len(labels), 2))


def _glyph_images(labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    images = np.zeros((n, 3, 8, 8))
    offsets = rng.integers(0, 4, size=(n, 2))
    for i, (lab, (dy, dx)) in enumerate(zip(labels, offsets)):
        images[i, :, dy:dy + 5, dx:dx + 5] = GLYPHS[lab]
    return np.clip(images + rng.normal(0.0, noise, size=images.shape), 0.0, 1.0)


def _blend_patches(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Blend each glyph with a random color patch (|patch - glyph|), MNIST-M style."""
    n = len(images)
    colors = rng.uniform(0.0, 1.0, size=(n, 3, 1, 1))
    texture = np.clip(colors + rng.normal(0.0, 0.1, size=images.shape), 0.0, 1.0)
    return np.abs(texture - images)


def _shift_points(x: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    return x @ rotation_matrix(spec.rotation_deg).T + np.asarray(spec.translation)


def gen_pair(spec: ShiftSpec) -> Tuple[DomainDataset, DomainDataset]:
    """Source from the base family, target from the shifted family; a pure function of ``spec``."""
    k = spec.classes()
    src_rng, tgt_rng, palette_rng = (np.random.default_rng(s) for s in
                                     np.random.SeedSequence([spec.seed, spec.patch_seed]).spawn(3))
    y_s = _balanced_labels(spec.n_per_class, k, src_rng)
    y_t = _balanced_labels(spec.n_per_class, k, tgt_rng)

    if spec.family == "two-moons":
        x_s = _two_moons(y_s, spec.noise_std, src_rng)
        x_t = _shift_points(_two_moons(y_t, spec.noise_std, tgt_rng), spec)
    elif spec.family == "gaussian-blobs":
        x_s = _blobs(y_s, k, spec.blob_radius, spec.noise_std, src_rng)
        x_t = _shift_points(_blobs(y_t, k, spec.blob_radius, spec.noise_std, tgt_rng), spec)
    elif spec.family == "patch-blend-images":
        x_s = _glyph_images(y_s, spec.noise_std, src_rng)
        x_t = _blend_patches(_glyph_images(y_t, spec.noise_std, tgt_rng), palette_rng)
    else:
        raise DataError(f"unknown family {spec.family!r}")

    logger.info(f"Generated {spec.family} pair: {len(x_s)} source / {len(x_t)} target samples, K={k}")
    return (DomainDataset(x_s, y_s, "source", k, spec.family),
            DomainDataset(x_t, y_t, "target", k, spec.family))


def split_validation(target: DomainDataset, size: int, seed: int) -> Tuple[DomainDataset, Optional[DomainDataset]]:
    """Hold out ``size`` labeled target samples for model selection."""
    if size == 0:
        return target, None
    if target.labels is None:
        raise DataError("validation split needs target labels")
    if size >= len(target):
        raise DataError(f"validation_size {size} leaves no target samples (have {len(target)})")
    order = np.random.default_rng([seed, 7]).permutation(len(target))
    return target.subset(np.sort(order[size:])), target.subset(np.sort(order[:size]))


class EpochSampler:
    """Epoch-wise shuffled index stream; the tail that does not fill a batch is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise DataError("cannot sample from an empty dataset")
        if batch_size > n:
            raise DataError(f"batch size {batch_size} larger than dataset ({n})")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.perm = rng.permutation(n)
        self.cursor = 0

    def next_indices(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.cursor = 0
        idx = self.perm[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx


class DomainBatchSampler:
    """Independent epoch streams over the source and target sets, one minibatch pair per draw."""

    def __init__(self, source: DomainDataset, target: DomainDataset, batch_size: int, seed: int):
        if batch_size < 2:
            raise DataError(f"batch size must be >= 2, got {batch_size}")
        src_rng = np.random.default_rng([seed, 2])
        tgt_rng = np.random.default_rng([seed, 3])
        self.source = source
        self.target = target
        self.source_stream = EpochSampler(len(source), batch_size, src_rng)
        self.target_stream = EpochSampler(len(target), batch_size, tgt_rng)

    def sample(self) -> DomainBatch:
        si = self.source_stream.next_indices()
        ti = self.target_stream.next_indices()
        return DomainBatch(source_x=self.source.inputs[si],
                           source_y=one_hot(self.source.labels[si], self.source.n_classes),
                           target_x=self.target.inputs[ti])


def sample_minibatch(source: DomainDataset, target: DomainDataset, b: int, rng: np.random.Generator) -> DomainBatch:
    """b labeled source samples and b target inputs drawn without replacement; labels never leave the source."""
    if b < 2:
        raise DataError(f"batch size must be >= 2, got {b}")
    if b > len(source) or b > len(target):
        raise DataError(f"batch size {b} larger than dataset ({len(source)} source, {len(target)} target)")
    si = rng.choice(len(source), size=b, replace=False)
    ti = rng.choice(len(target), size=b, replace=False)
    return DomainBatch(source_x=source.inputs[si], source_y=one_hot(source.labels[si], source.n_classes),
                       target_x=target.inputs[ti])


def export_csv(dataset: DomainDataset, path: Path) -> None:
    flat = dataset.inputs.reshape(len(dataset), -1)
    frame = pd.DataFrame(flat, columns=[f"x{i}" for i in range(flat.shape[1])])
    frame["label"] = dataset.labels if dataset.labels is not None else -1
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    logger.info(f"Wrote {len(frame)} rows to {path}")
