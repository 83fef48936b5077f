"""Synthetic image tasks with known ground truth."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LABEL_NAMES, ArrayDataset


def separable_images(n: int = 32, size: int = 16, seed: int = 0) -> ArrayDataset:
    """Half dark, half bright noisy images; balanced labels."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    level = np.where(labels == 1, 0.7, 0.3)[:, None, None, None]
    imgs = np.clip(level + 0.1 * rng.standard_normal((n, 3, size, size)), 0, 1)
    return ArrayDataset(imgs.astype(np.float32), labels)


@dataclass
class PlantedTask:
    data: ArrayDataset
    masks: np.ndarray  # [N, S, S] bool, planted patch location (empty for negatives)
    patch: int


PATCH_COLOR = np.array([1.0, 0.1, 0.1], dtype=np.float32)
DISTRACTOR_COLOR = np.array([0.1, 0.1, 1.0], dtype=np.float32)


def planted_patch_task(n: int = 64, size: int = 224, patch: int = 32, margin: int = 48,
                       noise: float = 0.08, distractor: bool = False, contrast: float = 1.0,
                       seed: int = 0) -> PlantedTask:
    """Gray noise images; malignant-labelled ones carry a saturated red square.

    The square's top-left corner is uniform in ``[margin, size - margin - patch]``
    per axis, away from the border frame. With ``distractor`` every negative
    gets a blue square at a random place instead, so colour, not mere presence
    of a square, decides the class. ``contrast`` < 1 blends the square towards
    the background.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    imgs = np.clip(0.5 + noise * rng.standard_normal((n, 3, size, size)), 0, 1).astype(np.float32)
    masks = np.zeros((n, size, size), dtype=bool)
    hi = size - margin - patch
    for i in range(n):
        y, x = rng.integers(margin, hi + 1, size=2)
        if labels[i] == 1:
            color = PATCH_COLOR
        elif distractor:
            color = DISTRACTOR_COLOR
        else:
            continue
        region = imgs[i, :, y:y + patch, x:x + patch]
        imgs[i, :, y:y + patch, x:x + patch] = (1 - contrast) * region + contrast * color[:, None, None]
        if labels[i] == 1:
            masks[i, y:y + patch, x:x + patch] = True
    return PlantedTask(ArrayDataset(imgs, labels), masks, patch)


def search_task(n: int = 2000, size: int = 32, seed: int = 0, val_fraction: float = 0.25):
    """Train/val split of a small planted-feature task for proxy evaluation."""
    task = planted_patch_task(n, size, patch=6, margin=2, noise=0.15, distractor=True,
                              contrast=0.35, seed=seed)
    n_val = int(round(val_fraction * n))
    idx = np.arange(n)
    return task.data.subset(idx[n_val:]), task.data.subset(idx[:n_val])


def write_image_folder(data: ArrayDataset, root, manifest_name: str = "manifest.csv") -> Path:
    """Save ``data`` as PNG files plus a ``path,label`` manifest under ``root``."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(data)):
        rel = f"images/img_{i:05d}.png"
        px = np.clip(np.round(data.load(i).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(px).save(root / rel)
        rows.append((rel, LABEL_NAMES[int(data.labels[i])]))
    out = root / manifest_name
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerows(rows)
    return out
