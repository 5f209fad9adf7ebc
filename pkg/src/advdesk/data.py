"""Deterministic synthetic image datasets.

Classification renders one parametric shape per class (disc, ring, bar,
cross) at a randomized position and intensity; segmentation renders
elliptical bright "lesions" on a textured background with an exact pixel
mask. Generation is a pure function of (seed, parameters); pixels always
land in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorfile import read_tensor_file, write_tensor_file

SPLIT_FRACTIONS = {"train": 0.70, "calibration": 0.15, "test": 0.15}


@dataclass(frozen=True)
class ClassificationDataset:
    images: np.ndarray          # (n, 1, H, W) float64 in [0,1]
    labels: np.ndarray          # (n,) int
    class_count: int
    splits: dict                # name -> index array

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.images[idx], self.labels[idx]


@dataclass(frozen=True)
class SegmentationDataset:
    images: np.ndarray          # (n, 1, H, W)
    masks: np.ndarray           # (n, 1, H, W) binary
    splits: dict

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.images[idx], self.masks[idx]


def _stratified_splits(labels: np.ndarray, rng: np.random.Generator) -> dict:
    """Disjoint covering splits with every class represented in each split."""
    n = labels.shape[0]
    buckets: dict = {name: [] for name in SPLIT_FRACTIONS}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_c = idx.size
        n_train = max(1, int(round(n_c * SPLIT_FRACTIONS["train"])))
        n_cal = max(1, int(round(n_c * SPLIT_FRACTIONS["calibration"])))
        if n_train + n_cal >= n_c:
            n_train = n_c - 2
            n_cal = 1
        buckets["train"].append(idx[:n_train])
        buckets["calibration"].append(idx[n_train:n_train + n_cal])
        buckets["test"].append(idx[n_train + n_cal:])
    return {name: np.sort(np.concatenate(parts)) for name, parts in buckets.items()}


def _render_shape(img: np.ndarray, shape_kind: int, rng: np.random.Generator) -> None:
    """Draw one of disc / ring / bar / cross at a random position and intensity."""
    size = img.shape[0]
    margin = size // 4
    cy = rng.integers(margin, size - margin)
    cx = rng.integers(margin, size - margin)
    intensity = rng.uniform(0.6, 0.95)
    yy, xx = np.mgrid[0:size, 0:size]
    r = rng.uniform(size * 0.15, size * 0.24)
    if shape_kind == 0:  # disc
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    elif shape_kind == 1:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif shape_kind == 2:  # bar
        half = max(1, int(round(r * 0.4)))
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= r)
    else:  # cross
        half = max(1, int(round(r * 0.35)))
        mask = ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= r)) | \
               ((np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= r))
    img[mask] = intensity


def make_blobs_classification(seed: int, n: int, image_size: int,
                              class_count: int) -> ClassificationDataset:
    if class_count not in (2, 3, 4):
        raise ValueError(f"class_count must be 2, 3 or 4, got {class_count}")
    if image_size not in (16, 28):
        raise ValueError(f"image_size must be 16 or 28, got {image_size}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count  # balanced by construction
    rng.shuffle(labels)
    images = np.zeros((n, 1, image_size, image_size))
    for i in range(n):
        img = np.zeros((image_size, image_size))
        _render_shape(img, int(labels[i]), rng)
        img += rng.uniform(0.0, 0.1, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    splits = _stratified_splits(labels, rng)
    return ClassificationDataset(images=images, labels=labels.astype(np.int64),
                                 class_count=class_count, splits=splits)


def make_lesion_segmentation(seed: int, n: int, image_size: int = 32) -> SegmentationDataset:
    if image_size != 32:
        raise ValueError(f"image_size must be 32, got {image_size}")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 1, image_size, image_size))
    masks = np.zeros((n, 1, image_size, image_size))
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    for i in range(n):
        # low-frequency background texture
        fy, fx = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        bg = 0.15 + 0.1 * np.sin(2 * np.pi * fy * yy / image_size + phase[0]) \
                  * np.cos(2 * np.pi * fx * xx / image_size + phase[1])
        img = bg + rng.uniform(0.0, 0.08, size=bg.shape)
        mask = np.zeros_like(img, dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy = rng.integers(6, image_size - 6)
            cx = rng.integers(6, image_size - 6)
            ry = rng.uniform(2.0, 5.0)
            rx = rng.uniform(2.0, 5.0)
            lesion = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            mask |= lesion
        img[mask] = rng.uniform(0.65, 0.9)
        images[i, 0] = np.clip(img, 0.0, 1.0)
        masks[i, 0] = mask.astype(np.float64)
    splits = _stratified_splits(np.zeros(n, dtype=np.int64), rng)
    return SegmentationDataset(images=images, masks=masks, splits=splits)


# ---------------------------------------------------------------------------
# dataset directories: tensor files plus a JSON manifest


def save_classification(directory, ds: ClassificationDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor_file(directory / "images.atns", ds.images)
    manifest = {
        "kind": "classification",
        "images": "images.atns",
        "labels": ds.labels.tolist(),
        "class_count": ds.class_count,
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def save_segmentation(directory, ds: SegmentationDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor_file(directory / "images.atns", ds.images)
    write_tensor_file(directory / "masks.atns", ds.masks)
    manifest = {
        "kind": "segmentation",
        "images": "images.atns",
        "masks": "masks.atns",
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def load_dataset(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    splits = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["splits"].items()}
    images = read_tensor_file(directory / manifest["images"])
    if manifest["kind"] == "classification":
        return ClassificationDataset(
            images=images,
            labels=np.asarray(manifest["labels"], dtype=np.int64),
            class_count=int(manifest["class_count"]),
            splits=splits)
    if manifest["kind"] == "segmentation":
        return SegmentationDataset(
            images=images,
            masks=read_tensor_file(directory / manifest["masks"]),
            splits=splits)
    raise ValueError(f"unknown dataset kind '{manifest['kind']}'")
