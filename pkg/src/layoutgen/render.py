"""Rasterize layouts over canvases as colored category boxes."""

from __future__ import annotations

import numpy as np

from .data import save_image
from .layout import CategorySet, Layout, LayoutElement

# fixed palette so renders are stable across runs, values in [0,1]
PALETTE = {
    "logo": (0.26, 0.40, 0.96),  # blue
    "text": (0.20, 0.66, 0.33),  # green
    "underlay": (1.00, 0.60, 0.00),  # orange
    "embellishment": (0.61, 0.15, 0.69),  # purple
}
FALLBACK_COLOR = (0.38, 0.38, 0.38)
FILL_ALPHA = 0.4


def category_color(name: str) -> tuple[float, float, float]:
    return PALETTE.get(name, FALLBACK_COLOR)


def _pixel_rect(el: LayoutElement, h: int, w: int):
    """Clipped integer pixel bounds (r0, r1, c0, c1) of an element."""
    x0, y0, x1, y1 = el.edges()
    c0 = int(np.clip(round(x0 * w), 0, w))
    c1 = int(np.clip(round(x1 * w), 0, w))
    r0 = int(np.clip(round(y0 * h), 0, h))
    r1 = int(np.clip(round(y1 * h), 0, h))
    return r0, r1, c0, c1


def _blend(img: np.ndarray, r0, r1, c0, c1, color, alpha: float) -> None:
    if r1 <= r0 or c1 <= c0:
        return
    rgb = np.asarray(color, dtype=np.float64)
    img[r0:r1, c0:c1] = (1.0 - alpha) * img[r0:r1, c0:c1] + alpha * rgb


def _outline(img: np.ndarray, r0, r1, c0, c1, color) -> None:
    if r1 <= r0 or c1 <= c0:
        return
    rgb = np.asarray(color, dtype=np.float64)
    img[r0 : min(r0 + 1, r1), c0:c1] = rgb
    img[max(r1 - 1, r0) : r1, c0:c1] = rgb
    img[r0:r1, c0 : min(c0 + 1, c1)] = rgb
    img[r0:r1, max(c1 - 1, c0) : c1] = rgb


def render(layout: Layout, canvas: np.ndarray, cats: CategorySet, alpha: float = FILL_ALPHA) -> np.ndarray:
    """Draw the layout over a copy of the canvas; output has the canvas shape.

    Underlays come first as semi-transparent fills, then all other elements
    as translucent fills with an opaque outline, so overlapped element
    outlines always stay visible.
    """
    canvas = np.asarray(canvas, dtype=np.float64)
    out = canvas.copy()
    h, w = out.shape[:2]
    elements = layout.nonempty_elements
    for el in elements:
        if cats.is_underlay(el.category) and el.area > 0:
            r0, r1, c0, c1 = _pixel_rect(el, h, w)
            _blend(out, r0, r1, c0, c1, category_color(cats.names[el.category]), alpha)
    for el in elements:
        if cats.is_underlay(el.category) or el.area <= 0:
            continue
        r0, r1, c0, c1 = _pixel_rect(el, h, w)
        color = category_color(cats.names[el.category])
        _blend(out, r0, r1, c0, c1, color, alpha)
        _outline(out, r0, r1, c0, c1, color)
    return out


def render_to_file(path, layout: Layout, canvas: np.ndarray, cats: CategorySet, alpha: float = FILL_ALPHA) -> None:
    save_image(path, render(layout, canvas, cats, alpha))
