"""Manifest ingestion, balanced partitioning, image loading, augmentation and batching."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Protocol

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

LABELS = {"benign": 0, "malignant": 1}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class DatasetManifest:
    paths: list
    labels: np.ndarray
    split: Optional[list] = None
    root: Path = field(default_factory=Path)
    missing: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.paths) != len(self.labels):
            raise DataError("paths and labels differ in length")
        if len(set(self.paths)) != len(self.paths):
            raise DataError("duplicate paths in manifest")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 (benign) or 1 (malignant)")

    def __len__(self) -> int:
        return len(self.paths)

    def class_counts(self) -> dict:
        return {name: int((self.labels == v).sum()) for name, v in LABELS.items()}

    def indices(self, split: str) -> np.ndarray:
        if self.split is None:
            raise DataError("manifest has not been partitioned")
        return np.array([i for i, s in enumerate(self.split) if s == split], dtype=np.int64)

    def subset(self, split: str) -> "DatasetManifest":
        idx = self.indices(split)
        return DatasetManifest([self.paths[i] for i in idx], self.labels[idx],
                               [split] * len(idx), self.root)

    def resolve(self, i: int) -> Path:
        p = Path(self.paths[i])
        return p if p.is_absolute() else self.root / p

    def split_counts(self) -> dict:
        out = {}
        for s in SPLITS:
            idx = self.indices(s)
            out[s] = {name: int((self.labels[idx] == v).sum()) for name, v in LABELS.items()}
        return out


def ingest(manifest_path, check_files: bool = True) -> DatasetManifest:
    """Read a ``path,label`` CSV (an optional ``split`` column is kept).

    Relative paths resolve against the CSV's directory. Files that do not exist
    are listed in ``manifest.missing`` and logged rather than raised.
    """
    manifest_path = Path(manifest_path)
    try:
        fh = manifest_path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    paths, labels, splits = [], [], []
    seen = set()
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise DataError(f"{manifest_path}: header must contain 'path,label'")
        has_split = "split" in reader.fieldnames
        for row_no, row in enumerate(reader, start=2):
            token = (row["label"] or "").strip().lower()
            if token not in LABELS:
                raise DataError(f"{manifest_path} row {row_no}: unknown label {row['label']!r}")
            path = (row["path"] or "").strip()
            if path in seen:
                raise DataError(f"{manifest_path} row {row_no}: duplicate path {path!r}")
            seen.add(path)
            paths.append(path)
            labels.append(LABELS[token])
            if has_split:
                s = (row["split"] or "").strip()
                if s not in SPLITS:
                    raise DataError(f"{manifest_path} row {row_no}: unknown split {s!r}")
                splits.append(s)
    m = DatasetManifest(paths, labels, splits if has_split else None, manifest_path.parent)
    if check_files:
        m.missing = [p for i, p in enumerate(paths) if not m.resolve(i).is_file()]
        if m.missing:
            logger.warning("%d of %d manifest files are missing", len(m.missing), len(paths))
    return m


def write_split_csv(manifest: DatasetManifest, out_path) -> None:
    """Write ``path,label,split``; paths are resolved so the CSV can live anywhere."""
    if manifest.split is None:
        raise DataError("manifest has not been partitioned")
    with Path(out_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for i, (lab, s) in enumerate(zip(manifest.labels, manifest.split)):
            w.writerow([str(manifest.resolve(i).resolve()), LABEL_NAMES[int(lab)], s])


@dataclass
class SplitConfig:
    seed: int = 0
    val_fraction: float = 0.1
    test_per_class: int = 221

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise DataError("val_fraction must lie in (0, 1)")
        if self.test_per_class < 1:
            raise DataError("test_per_class must be positive")


def partition(manifest: DatasetManifest, cfg: SplitConfig) -> DatasetManifest:
    """Balanced test split, remainder split into train/val by ``val_fraction``."""
    if 2 * cfg.test_per_class > len(manifest):
        raise DataError(f"need {2 * cfg.test_per_class} records, manifest has {len(manifest)}")
    rng = np.random.default_rng(cfg.seed)
    split = np.empty(len(manifest), dtype=object)
    rest = []
    for name, v in LABELS.items():
        idx = np.flatnonzero(manifest.labels == v)
        if len(idx) < cfg.test_per_class:
            raise DataError(f"insufficient {name} records: {len(idx)} < {cfg.test_per_class}")
        idx = rng.permutation(idx)
        split[idx[:cfg.test_per_class]] = "test"
        rest.append(idx[cfg.test_per_class:])
    rest = rng.permutation(np.concatenate(rest))
    n_val = int(round(cfg.val_fraction * len(rest)))
    split[rest[:n_val]] = "val"
    split[rest[n_val:]] = "train"
    return DatasetManifest(list(manifest.paths), manifest.labels.copy(), list(split),
                           manifest.root, list(manifest.missing))


# --------------------------------------------------------------------------
# images


def _axis_weights(src: int, dst: int):
    # half-pixel centres, edge clamped
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` to ``size`` (int or (h, w))."""
    th, tw = (size, size) if np.isscalar(size) else size
    c, h, w = img.shape
    ylo, yhi, fy = _axis_weights(h, th)
    xlo, xhi, fx = _axis_weights(w, tw)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    rows = img[:, ylo] * (1 - fy) + img[:, yhi] * fy
    return (rows[:, :, xlo] * (1 - fx) + rows[:, :, xhi] * fx).astype(np.float32)


def load_and_resize(path, target_size: int = 224) -> np.ndarray:
    """Decode an 8-bit image to ``float32 [3, S, S]`` in [0, 1].

    Grayscale is replicated to three channels and alpha is dropped.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1", "P", "LA"):
                im = im.convert("L").convert("RGB")
            else:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    return resize_bilinear(arr.transpose(2, 0, 1), target_size)


@dataclass
class AugmentConfig:
    max_rotation_deg: float = 30.0
    max_shift_frac: float = 0.10
    hflip: bool = True
    vflip: bool = True
    target_size: int = 224

    def __post_init__(self):
        if not 0 <= self.max_rotation_deg <= 180:
            raise DataError("max_rotation_deg must lie in [0, 180]")
        if not 0 <= self.max_shift_frac < 1:
            raise DataError("max_shift_frac must lie in [0, 1)")


@dataclass
class AugmentDraw:
    angle: float
    shift_y: float
    shift_x: float
    hflip: bool
    vflip: bool


def sample_augment(cfg: AugmentConfig, size: int, rng: np.random.Generator) -> AugmentDraw:
    a = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    m = cfg.max_shift_frac * size
    dy, dx = rng.uniform(-m, m, size=2)
    hf = bool(rng.random() < 0.5) if cfg.hflip else False
    vf = bool(rng.random() < 0.5) if cfg.vflip else False
    return AugmentDraw(float(a), float(dy), float(dx), hf, vf)


def apply_augment(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Rotate about the centre, translate, then flip; vacated pixels copy the nearest edge."""
    out = image
    if draw.angle != 0.0 or draw.shift_y != 0.0 or draw.shift_x != 0.0:
        _, h, w = image.shape
        t = math.radians(draw.angle)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        # output coord o samples input at rot @ (o - centre - shift) + centre
        shift = np.array([draw.shift_y, draw.shift_x])
        offset = centre - rot @ (centre + shift)
        out = np.stack([ndimage.affine_transform(ch, rot, offset=offset, order=1, mode="nearest")
                        for ch in image]).astype(image.dtype)
    if draw.hflip:
        out = out[:, :, ::-1]
    if draw.vflip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, cfg: AugmentConfig, seed) -> np.ndarray:
    """Random rotation, shift and flips; ``seed`` is an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_augment(image, sample_augment(cfg, image.shape[-1], rng))


# --------------------------------------------------------------------------
# datasets and batches


class ImageSource(Protocol):
    labels: np.ndarray

    def load(self, i: int) -> np.ndarray: ...

    def __len__(self) -> int: ...


class ArrayDataset:
    """In-memory images ``[N, 3, S, S]`` with integer labels."""

    def __init__(self, images: np.ndarray, labels):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def load(self, i: int) -> np.ndarray:
        return self.images[i]

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx)
        return ArrayDataset(self.images[idx], self.labels[idx])


class ManifestDataset:
    """Lazily decoded images of one manifest split."""

    def __init__(self, manifest: DatasetManifest, split: Optional[str] = None,
                 target_size: int = 224):
        self.manifest = manifest if split is None else manifest.subset(split)
        self.labels = self.manifest.labels
        self.target_size = target_size

    def __len__(self):
        return len(self.labels)

    def load(self, i: int) -> np.ndarray:
        return load_and_resize(self.manifest.resolve(i), self.target_size)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def batch_order(labels: np.ndarray, batch_size: int, rebalance: bool,
                rng: np.random.Generator) -> list:
    """Index lists for one epoch.

    With ``rebalance`` the majority class is visited once (shuffled, without
    replacement) and paired with minority records drawn with replacement so
    every batch holds ceil(B/2) majority and floor(B/2) minority samples.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise DataError("empty split")
    if not rebalance:
        order = rng.permutation(n)
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batch_size < 2:
        raise DataError("batch_size must be >= 2 with rebalancing")
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("rebalancing needs both classes in the split")
    major, minor = (neg, pos) if len(neg) >= len(pos) else (pos, neg)
    n_major, n_minor = -(-batch_size // 2), batch_size // 2
    n_batches = -(-len(major) // n_major)
    major_order = rng.permutation(major)
    short = n_batches * n_major - len(major)
    if short:
        major_order = np.concatenate([major_order, rng.choice(major, size=short, replace=True)])
    minor_draws = rng.choice(minor, size=n_batches * n_minor, replace=True)
    batches = []
    for b in range(n_batches):
        idx = np.concatenate([major_order[b * n_major:(b + 1) * n_major],
                              minor_draws[b * n_minor:(b + 1) * n_minor]])
        batches.append(rng.permutation(idx))
    return batches


def make_batches(source: ImageSource, batch_size: int, rebalance: bool = True, seed=0,
                 augment_cfg: Optional[AugmentConfig] = None) -> Iterator[Batch]:
    """One epoch of batches; fully determined by ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for idx in batch_order(source.labels, batch_size, rebalance, rng):
        imgs = [source.load(int(i)) for i in idx]
        if augment_cfg is not None:
            imgs = [apply_augment(im, sample_augment(augment_cfg, im.shape[-1], rng)) for im in imgs]
        yield Batch(np.stack(imgs).astype(np.float32), source.labels[idx], idx)


def load_all(source: ImageSource) -> np.ndarray:
    return np.stack([source.load(i) for i in range(len(source))]).astype(np.float32)


def synthetic_manifest(n_benign: int, n_malignant: int, seed: int = 0) -> DatasetManifest:
    """Manifest of ``n`` placeholder paths in shuffled label order (no files)."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.r_[np.zeros(n_benign, int), np.ones(n_malignant, int)])
    return DatasetManifest([f"img_{i:06d}.png" for i in range(len(labels))], labels)
