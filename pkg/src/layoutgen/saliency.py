"""Saliency maps: thresholding, salient-region boxes, and map fusion.

A saliency map is an H x W float array in [0, 1]. Thresholding gives a
binary mask; each 4-connected component of the mask that is large enough
contributes the minimal axis-aligned rectangle enclosing it, reported as
a normalized center-convention box. Multiple maps for one canvas are
fused pixelwise with max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.5
DEFAULT_MIN_AREA = 0.001  # fraction of the canvas
DEFAULT_K_MAX = 8


class SaliencyError(ValueError):
    """Invalid saliency map, threshold, or mask input."""


def validate_map(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.size == 0:
        raise SaliencyError(f"saliency map must be a nonempty 2D array, got {pixels.shape}")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise SaliencyError(
            f"saliency values must lie in [0,1], got range [{pixels.min()}, {pixels.max()}]"
        )
    return pixels


@dataclass(frozen=True)
class SalientBoxSet:
    boxes: tuple[tuple[float, float, float, float], ...]  # (x, y, w, h), center
    threshold_used: float

    def __len__(self) -> int:
        return len(self.boxes)


def binarize(pixels: np.ndarray, s: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """0/1 mask; a pixel is salient iff strictly above s."""
    if not 0.0 <= s < 1.0:
        raise SaliencyError(f"threshold must be in [0, 1), got {s}")
    pixels = validate_map(pixels)
    return (pixels > s).astype(np.uint8)


def extract_boxes(
    mask: np.ndarray,
    k_max: int = DEFAULT_K_MAX,
    min_area: float = DEFAULT_MIN_AREA,
) -> SalientBoxSet:
    """Enclosing rectangles of the 4-connected components of a binary mask.

    Components below min_area (fraction of the canvas) are dropped; the
    rest are sorted by pixel area descending, ties broken by scanline
    order of the component's first pixel, and truncated to k_max. Boxes
    are normalized to [0,1] with (x, y) at the rectangle center.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise SaliencyError(f"mask must be a 2D 0/1 array, got shape {mask.shape}")
    h, w = mask.shape
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])  # 4-connectivity
    labels, n = ndimage.label(mask, structure=structure)
    candidates = []
    for lab in range(1, n + 1):
        rows, cols = np.nonzero(labels == lab)
        area = rows.size
        if area / (h * w) < min_area:
            continue
        r0, r1 = rows.min(), rows.max() + 1  # pixel rows [r0, r1)
        c0, c1 = cols.min(), cols.max() + 1
        first = np.lexsort((cols, rows))[0]  # scanline-first pixel for ties
        box = (
            (c0 + c1) / 2 / w,
            (r0 + r1) / 2 / h,
            (c1 - c0) / w,
            (r1 - r0) / h,
        )
        candidates.append((-area, int(rows[first]), int(cols[first]), box))
    candidates.sort()
    boxes = tuple(box for *_, box in candidates[:k_max])
    return SalientBoxSet(boxes=boxes, threshold_used=float("nan"))


def salient_boxes(
    pixels: np.ndarray,
    s: float = DEFAULT_THRESHOLD,
    k_max: int = DEFAULT_K_MAX,
    min_area: float = DEFAULT_MIN_AREA,
) -> SalientBoxSet:
    """binarize then extract_boxes, recording the threshold used."""
    out = extract_boxes(binarize(pixels, s), k_max=k_max, min_area=min_area)
    return SalientBoxSet(boxes=out.boxes, threshold_used=float(s))


def fuse_max(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pixelwise maximum of two saliency maps of identical shape."""
    a, b = validate_map(a), validate_map(b)
    if a.shape != b.shape:
        raise SaliencyError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.maximum(a, b)
