"""Occlusion-sensitivity saliency, border-artifact audit and PNG overlays."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .archspec import Network
from .tensor import softmax


@dataclass
class SaliencyMap:
    values: np.ndarray  # [S, S] in [0, 1]
    method: str
    target_class: int
    grid: np.ndarray = field(repr=False, default=None)  # raw probability drops per placement

    @property
    def shape(self):
        return self.values.shape


def occlusion_positions(size: int, patch: int, stride: int) -> np.ndarray:
    """Top-left offsets along one axis; the last patch is clamped to the image."""
    n = -(-(size - patch) // stride) + 1
    return np.minimum(np.arange(n) * stride, size - patch)


def _fill_value(image: np.ndarray, y: int, x: int, patch: int, baseline: str,
                mean_color: np.ndarray) -> np.ndarray:
    if baseline == "mean":
        return mean_color
    # edge: mean colour of the one-pixel ring around the patch
    _, h, w = image.shape
    y0, y1 = max(y - 1, 0), min(y + patch + 1, h)
    x0, x1 = max(x - 1, 0), min(x + patch + 1, w)
    ring = image[:, y0:y1, x0:x1].copy()
    inner = np.zeros(ring.shape[1:], dtype=bool)
    inner[y - y0:y - y0 + patch, x - x0:x - x0 + patch] = True
    if inner.all():
        return mean_color
    return ring[:, ~inner].mean(axis=1)


def normalize_map(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= tol:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def _smear(grid: np.ndarray, centres: np.ndarray, size: int) -> np.ndarray:
    # separable linear interpolation between placement centres, edge clamped
    px = np.arange(size) + 0.5
    rows = np.stack([np.interp(px, centres, grid[:, j]) for j in range(grid.shape[1])], axis=1)
    return np.stack([np.interp(px, centres, rows[i]) for i in range(size)], axis=0)


def occlusion_saliency(network: Network, image: np.ndarray, target_class: int, patch: int = 32,
                       stride: int = 16, baseline: str = "mean",
                       mean_color: Optional[Sequence[float]] = None,
                       chunk: int = 64) -> SaliencyMap:
    """Drop in target-class probability as a baseline patch slides over ``image``.

    ``image`` is ``[3, S, S]``. ``mean_color`` is the dataset mean used by the
    ``mean`` baseline (defaults to the image's own mean colour).
    """
    if not isinstance(network, Network) or not network.params() or network.params()[0].data is None:
        raise TypeError("occlusion_saliency needs a built network")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"image must be [C, S, S], got {image.shape}")
    size = image.shape[1]
    if not 1 <= patch <= size:
        raise ValueError(f"patch must lie in [1, {size}]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if baseline not in ("mean", "edge"):
        raise ValueError(f"unknown baseline {baseline!r}")
    mc = (image.mean(axis=(1, 2)) if mean_color is None
          else np.asarray(mean_color, dtype=np.float32))
    pos = occlusion_positions(size, patch, stride)
    base_p = softmax(network.predict_logits(image[None]).astype(np.float64))[0, target_class]
    placements = [(y, x) for y in pos for x in pos]
    drops = np.empty(len(placements))
    for start in range(0, len(placements), chunk):
        block = placements[start:start + chunk]
        batch = np.repeat(image[None], len(block), axis=0)
        for k, (y, x) in enumerate(block):
            fill = _fill_value(image, y, x, patch, baseline, mc)
            batch[k, :, y:y + patch, x:x + patch] = fill[:, None, None]
        probs = softmax(network.predict_logits(batch).astype(np.float64))
        drops[start:start + len(block)] = base_p - probs[:, target_class]
    grid = drops.reshape(len(pos), len(pos))
    full = _smear(grid, pos + patch / 2.0, size)
    return SaliencyMap(normalize_map(full), f"occlusion(patch={patch},stride={stride},"
                       f"baseline={baseline})", int(target_class), grid)


def top_fraction_mask(values: np.ndarray, fraction: float = 0.05) -> np.ndarray:
    """Boolean mask of the ``fraction`` highest-valued pixels (stable ranking)."""
    k = max(1, int(round(fraction * values.size)))
    order = np.argsort(-values.reshape(-1), kind="stable")[:k]
    mask = np.zeros(values.size, dtype=bool)
    mask[order] = True
    return mask.reshape(values.shape)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def border_mass(values: np.ndarray, border: int = 16) -> float:
    total = float(values.sum())
    if total <= 0:
        return 0.0
    inner = values[border:-border, border:-border].sum() if min(values.shape) > 2 * border else 0.0
    return (total - float(inner)) / total


@dataclass
class AuditEntry:
    image_id: str
    peak: tuple
    border_mass: float
    top5_mass: float
    overlap: Optional[float]
    flags: list

    @property
    def passed(self) -> bool:
        return not self.flags


@dataclass
class AuditReport:
    entries: list
    rules: dict

    @property
    def pass_rate(self) -> float:
        return sum(e.passed for e in self.entries) / len(self.entries) if self.entries else 0.0

    def to_dict(self) -> dict:
        return {"rules": self.rules, "pass_rate": self.pass_rate,
                "entries": [dict(asdict(e), peak=list(e.peak), passed=e.passed)
                            for e in self.entries]}

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def audit_maps(maps: Sequence[SaliencyMap], border_mass_max: float = 0.5,
               top_region_min_overlap: Optional[float] = None,
               reference_masks: Optional[Sequence[np.ndarray]] = None,
               image_ids: Optional[Sequence[str]] = None, border: int = 16) -> AuditReport:
    """Apply the audit rules to precomputed saliency maps.

    An image is flagged when more than ``border_mass_max`` of its saliency
    mass lies in the ``border``-pixel frame, or, when reference masks and
    ``top_region_min_overlap`` are given, when the top-5% region's IoU with
    the reference falls below it.
    """
    entries = []
    for i, sm in enumerate(maps):
        v = sm.values
        bm = border_mass(v, border)
        top = top_fraction_mask(v)
        total = float(v.sum())
        top_mass = float(v[top].sum() / total) if total > 0 else 0.0
        peak = tuple(int(t) for t in np.unravel_index(int(np.argmax(v)), v.shape))
        flags = []
        if bm > border_mass_max:
            flags.append("border_mass")
        ov = None
        if reference_masks is not None:
            ov = iou(top, reference_masks[i])
            if top_region_min_overlap is not None and ov < top_region_min_overlap:
                flags.append("top_region_overlap")
        name = image_ids[i] if image_ids is not None else str(i)
        entries.append(AuditEntry(name, peak, bm, top_mass, ov, flags))
    rules = {"border_mass_max": border_mass_max, "border_px": border,
             "top_region_min_overlap": top_region_min_overlap}
    return AuditReport(entries, rules)


def audit(network: Network, images: Sequence[np.ndarray], border_mass_max: float = 0.5,
          top_region_min_overlap: Optional[float] = None,
          reference_masks: Optional[Sequence[np.ndarray]] = None, target_class: int = 1,
          patch: int = 32, stride: int = 16, baseline: str = "mean",
          mean_color=None, image_ids: Optional[Sequence[str]] = None):
    """Saliency for each image followed by :func:`audit_maps`; returns ``(report, maps)``."""
    if len(images) < 1:
        raise ValueError("audit needs at least one image")
    maps = [occlusion_saliency(network, im, target_class, patch, stride, baseline, mean_color)
            for im in images]
    report = audit_maps(maps, border_mass_max, top_region_min_overlap, reference_masks, image_ids)
    return report, maps


def dimmed_source(image: np.ndarray, dim: float = 0.5) -> np.ndarray:
    """Luminance of ``[3, H, W]`` scaled by ``dim``, as ``[H, W]`` in [0, 1]."""
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return np.clip(lum, 0, 1) * dim


def overlay(image: np.ndarray, sal: SaliencyMap, dim: float = 0.5) -> np.ndarray:
    """uint8 ``[H, W, 3]``: dimmed grayscale brightened towards white where salient."""
    base = dimmed_source(image, dim)
    out = base + (1.0 - base) * sal.values
    return np.repeat(np.round(out * 255).astype(np.uint8)[..., None], 3, axis=2)


def overlay_export(image: np.ndarray, sal: SaliencyMap, out_path, dim: float = 0.5) -> Path:
    from PIL import Image

    if sal.values.shape != image.shape[1:]:
        raise ValueError(f"saliency {sal.values.shape} does not match image {image.shape[1:]}")
    if sal.values.min() < 0 or sal.values.max() > 1:
        raise ValueError("saliency map is not normalized")
    out_path = Path(out_path)
    try:
        Image.fromarray(overlay(image, sal, dim)).save(out_path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write overlay {out_path}: {exc}") from None
    return out_path
