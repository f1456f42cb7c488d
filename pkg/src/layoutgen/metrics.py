"""Layout quality metrics over canvases and saliency maps.

Seven scalars per corpus: occlusion of salient content (occ), text
readability via background gradients (rea), loose and strict underlay
effectiveness (und_l, und_s), pairwise element overlap (ove), small
element rate (sma), and non-salient space utilization (uti).

Geometry is computed analytically: unions of boxes are decomposed into
disjoint cells by a coordinate sweep, and integrals of a saliency map
over a rectangle are exact for the piecewise-constant per-pixel field
(2D prefix sums with fractional edge handling). A brute-force pixel-grid
oracle lives in the test suite, not here.

Metrics whose denominator is empty (no underlays, no plain-text pixels,
no non-salient area, no elements) return None so reports can distinguish
"not applicable" from a true zero. occ and ove keep their meaningful
zeros (an empty layout occludes nothing and overlaps nothing).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layout import CategorySet, Layout

STRICT_UNDERLAY_TOL = 1e-6  # ratio >= 1 - tol counts as full coverage
DEFAULT_UTI_THRESHOLD = 0.5

Rect = tuple[float, float, float, float]  # (x0, y0, x1, y1)


class MetricError(ValueError):
    """Invalid metric input (shape or pairing mismatch)."""


def _rect(el) -> Rect:
    x0, y0, x1, y1 = el.edges()
    return (max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0))


def rect_area(r: Rect) -> float:
    return max(r[2] - r[0], 0.0) * max(r[3] - r[1], 0.0)


def intersect(a: Rect, b: Rect) -> Rect:
    return (max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3]))


def overlap_ratio(a_box, b_box) -> float:
    """area(a intersect b) / area(a); 0 for a degenerate a."""
    a, b = _box_rect(a_box), _box_rect(b_box)
    area_a = rect_area(a)
    if area_a == 0.0:
        return 0.0
    return rect_area(intersect(a, b)) / area_a


def iou(a_box, b_box) -> float:
    a, b = _box_rect(a_box), _box_rect(b_box)
    inter = rect_area(intersect(a, b))
    union = rect_area(a) + rect_area(b) - inter
    if union == 0.0:
        return 0.0
    return inter / union


def _box_rect(box) -> Rect:
    x, y, w, h = box
    return (x - w / 2, y - h / 2, x + w / 2, y + h / 2)


def disjoint_cells(rects: list[Rect]) -> list[Rect]:
    """Decompose a union of rectangles into non-overlapping cells.

    Sweep over the sorted edge coordinates on both axes; a grid cell
    belongs to the union iff its center lies in some input rectangle.
    """
    rects = [r for r in rects if rect_area(r) > 0.0]
    if not rects:
        return []
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    ys = sorted({r[1] for r in rects} | {r[3] for r in rects})
    cells = []
    for y0, y1 in zip(ys, ys[1:]):
        cy = (y0 + y1) / 2
        for x0, x1 in zip(xs, xs[1:]):
            cx = (x0 + x1) / 2
            if any(r[0] <= cx <= r[2] and r[1] <= cy <= r[3] for r in rects):
                cells.append((x0, y0, x1, y1))
    return cells


def union_area(rects: list[Rect]) -> float:
    return sum(rect_area(c) for c in disjoint_cells(rects))


class PixelField:
    """Exact rectangle integrals of a per-pixel constant field on [0,1]^2.

    The field value is constant on each pixel, so the cumulative integral
    is bilinear within a pixel; prefix sums at pixel corners plus the
    fractional corner term give the integral of any axis-aligned
    rectangle with no discretization error.
    """

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise MetricError(f"field must be a nonempty 2D array, got {values.shape}")
        self.values = values
        h, w = values.shape
        self.h, self.w = h, w
        c = np.zeros((h + 1, w + 1))
        c[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
        self._c = c

    def _corner(self, x: float, y: float) -> float:
        """Integral over [0,x] x [0,y] in pixel units."""
        u = min(max(x, 0.0), 1.0) * self.w
        v = min(max(y, 0.0), 1.0) * self.h
        iu = min(int(u), self.w - 1)
        iv = min(int(v), self.h - 1)
        fu, fv = u - iu, v - iv
        c = self._c
        row = c[iv + 1, iu] - c[iv, iu]  # sum of pixel row iv, cols < iu
        col = c[iv, iu + 1] - c[iv, iu]  # sum of pixel col iu, rows < iv
        return c[iv, iu] + fv * row + fu * col + fu * fv * self.values[iv, iu]

    def integral(self, r: Rect) -> float:
        """Integral of the field over r, in normalized canvas units."""
        x0, y0, x1, y1 = r
        if x1 <= x0 or y1 <= y0:
            return 0.0
        raw = (
            self._corner(x1, y1)
            - self._corner(x0, y1)
            - self._corner(x1, y0)
            + self._corner(x0, y0)
        )
        return raw / (self.h * self.w)

    def mean_over(self, cells: list[Rect]) -> float | None:
        area = sum(rect_area(c) for c in cells)
        if area == 0.0:
            return None
        return sum(self.integral(c) for c in cells) / area


def occ(layout: Layout, saliency: np.ndarray, cats: CategorySet | None = None,
        include_underlays: bool = True) -> float:
    """Mean saliency under the union of element boxes; 0 for empty union."""
    els = layout.nonempty_elements
    if not include_underlays:
        if cats is None:
            raise MetricError("cats required when excluding underlays from occ")
        els = tuple(e for e in els if not cats.is_underlay(e.category))
    cells = disjoint_cells([_rect(e) for e in els])
    mean = PixelField(saliency).mean_over(cells)
    return 0.0 if mean is None else mean


def luminance(canvas: np.ndarray) -> np.ndarray:
    canvas = np.asarray(canvas, dtype=np.float64)
    if canvas.ndim != 3 or canvas.shape[2] != 3:
        raise MetricError(f"canvas must be (H, W, 3), got {canvas.shape}")
    return canvas @ np.array([0.299, 0.587, 0.114])


def gradient_magnitude(lum: np.ndarray) -> np.ndarray:
    """Central differences with replicated borders."""
    padded = np.pad(lum, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return np.sqrt(gx * gx + gy * gy)


def _pixels_in_rects(rects: list[Rect], h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask of pixels whose centers fall in any rect."""
    mask = np.zeros((h, w), dtype=bool)
    if not rects:
        return mask
    cx = (np.arange(w) + 0.5) / w
    cy = (np.arange(h) + 0.5) / h
    for x0, y0, x1, y1 in rects:
        mask |= ((cy >= y0) & (cy <= y1))[:, None] & ((cx >= x0) & (cx <= x1))[None, :]
    return mask


def rea(layout: Layout, canvas: np.ndarray, cats: CategorySet) -> float | None:
    """Mean background gradient under plain text (text minus underlays).

    None when no pixel center lands in that region.
    """
    grad = gradient_magnitude(luminance(canvas))
    h, w = grad.shape
    text_rects = [_rect(e) for e in layout.nonempty_elements if cats.is_text(e.category)]
    under_rects = [_rect(e) for e in layout.nonempty_elements if cats.is_underlay(e.category)]
    region = _pixels_in_rects(text_rects, h, w) & ~_pixels_in_rects(under_rects, h, w)
    if not region.any():
        return None
    return float(grad[region].mean())


def underlay_ratios(layout: Layout, cats: CategorySet) -> list[float]:
    """Best overlap ratio r(u) for each underlay in the layout.

    r(u) = max over non-underlay elements e of area(e&u)/area(e), the
    degree to which the best-covered element sits on the underlay.
    """
    els = layout.nonempty_elements
    unders = [e for e in els if cats.is_underlay(e.category)]
    others = [e for e in els if not cats.is_underlay(e.category)]
    ratios = []
    for u in unders:
        best = 0.0
        for e in others:
            best = max(best, overlap_ratio(e.box, u.box))
        ratios.append(best)
    return ratios


def und(layout: Layout, cats: CategorySet) -> tuple[float | None, float | None]:
    """(und_l, und_s) over this layout's underlays; (None, None) if none."""
    ratios = underlay_ratios(layout, cats)
    if not ratios:
        return None, None
    loose = float(np.mean(ratios))
    strict = float(np.mean([r >= 1.0 - STRICT_UNDERLAY_TOL for r in ratios]))
    return loose, strict


def ove(layout: Layout, cats: CategorySet) -> float:
    """Mean pairwise IoU of non-underlay elements; 0 below two elements."""
    els = [e for e in layout.nonempty_elements if not cats.is_underlay(e.category)]
    if len(els) < 2:
        return 0.0
    vals = [
        iou(els[i].box, els[j].box) for i in range(len(els)) for j in range(i + 1, len(els))
    ]
    return float(np.mean(vals))


def sma(layout: Layout) -> float | None:
    """Fraction of elements that are degenerately small.

    Small = area < 0.1% of the canvas, or width < 2%, or height < 2%.
    None for layouts with no elements.
    """
    els = layout.nonempty_elements
    if not els:
        return None
    flags = [e.box[2] * e.box[3] < 0.001 or e.box[2] < 0.02 or e.box[3] < 0.02 for e in els]
    return float(np.mean(flags))


def uti(layout: Layout, saliency: np.ndarray, s: float = DEFAULT_UTI_THRESHOLD) -> float | None:
    """Share of the non-salient region {S <= s} covered by the layout.

    None when that region has zero area (fully salient canvas).
    """
    nonsalient = PixelField((np.asarray(saliency, dtype=np.float64) <= s).astype(np.float64))
    denom = float(nonsalient.values.mean())
    if denom == 0.0:
        return None
    cells = disjoint_cells([_rect(e) for e in layout.nonempty_elements])
    num = sum(nonsalient.integral(c) for c in cells)
    return num / denom


@dataclass
class MetricReport:
    occ: float | None
    rea: float | None
    und_l: float | None
    und_s: float | None
    ove: float | None
    sma: float | None
    uti: float | None
    n_layouts: int = 0
    n_underlays: int = 0
    per_layout: list[dict] = field(default_factory=list)

    def summary_dict(self) -> dict:
        return {
            "occ": self.occ,
            "rea": self.rea,
            "und_l": self.und_l,
            "und_s": self.und_s,
            "ove": self.ove,
            "sma": self.sma,
            "uti": self.uti,
            "n_layouts": self.n_layouts,
            "n_underlays": self.n_underlays,
        }

    def to_json(self, path) -> None:
        payload = dict(self.summary_dict(), per_layout=self.per_layout)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        cols = ["id", "occ", "rea", "und_l", "und_s", "ove", "sma", "uti"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.per_layout:
                writer.writerow({k: row.get(k, "") for k in cols})


def _mean_defined(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def evaluate_corpus(
    layouts: list[Layout],
    bundles: list,
    cats: CategorySet,
    uti_threshold: float = DEFAULT_UTI_THRESHOLD,
    include_underlays_in_occ: bool = True,
    out_json=None,
    out_csv=None,
) -> MetricReport:
    """Per-layout metrics plus corpus aggregates.

    occ/rea/ove/sma/uti average per layout then across layouts (skipping
    not-applicable layouts); und_l/und_s aggregate over every underlay in
    the corpus so underlay-free layouts carry no weight.
    """
    if len(layouts) != len(bundles):
        raise MetricError(f"{len(layouts)} layouts vs {len(bundles)} bundles")
    per_layout = []
    all_ratios: list[float] = []
    for i, (layout, bundle) in enumerate(zip(layouts, bundles)):
        ratios = underlay_ratios(layout, cats)
        all_ratios.extend(ratios)
        und_l_i, und_s_i = und(layout, cats)
        row = {
            "id": getattr(bundle, "id", str(i)),
            "occ": occ(layout, bundle.saliency, cats, include_underlays=include_underlays_in_occ),
            "rea": rea(layout, bundle.canvas, cats),
            "und_l": und_l_i,
            "und_s": und_s_i,
            "ove": ove(layout, cats),
            "sma": sma(layout),
            "uti": uti(layout, bundle.saliency, uti_threshold),
        }
        per_layout.append(row)
    report = MetricReport(
        occ=_mean_defined([r["occ"] for r in per_layout]),
        rea=_mean_defined([r["rea"] for r in per_layout]),
        und_l=_mean_defined(all_ratios) if all_ratios else None,
        und_s=(
            float(np.mean([r >= 1.0 - STRICT_UNDERLAY_TOL for r in all_ratios]))
            if all_ratios
            else None
        ),
        ove=_mean_defined([r["ove"] for r in per_layout]),
        sma=_mean_defined([r["sma"] for r in per_layout]),
        uti=_mean_defined([r["uti"] for r in per_layout]),
        n_layouts=len(layouts),
        n_underlays=len(all_ratios),
        per_layout=per_layout,
    )
    if out_json is not None:
        report.to_json(out_json)
    if out_csv is not None:
        report.to_csv(out_csv)
    return report


# ---------------------------------------------------------------------------
# pixel-grid path: rasterized recomputation of the geometric metrics, kept
# free of the analytic helpers above so the two routes can cross-check each
# other at eval time

def _grid_box_mask(box, grid: int) -> np.ndarray:
    x, y, w, h = box
    u = (np.arange(grid) + 0.5) / grid
    v = (np.arange(grid) + 0.5) / grid
    in_x = (u >= x - w / 2) & (u < x + w / 2)
    in_y = (v >= y - h / 2) & (v < y + h / 2)
    return in_y[:, None] & in_x[None, :]


def _grid_saliency(saliency: np.ndarray, grid: int) -> np.ndarray:
    """Sample the piecewise-constant map at grid pixel centers."""
    h, w = saliency.shape
    rows = np.minimum(((np.arange(grid) + 0.5) / grid * h).astype(int), h - 1)
    cols = np.minimum(((np.arange(grid) + 0.5) / grid * w).astype(int), w - 1)
    return saliency[np.ix_(rows, cols)]


def grid_metrics(
    layout: Layout,
    saliency: np.ndarray,
    cats: CategorySet,
    grid: int = 512,
    uti_threshold: float = DEFAULT_UTI_THRESHOLD,
    include_underlays: bool = True,
) -> dict:
    """occ/uti/ove plus per-underlay ratios, all computed on a pixel grid."""
    elements = [el for el in layout.nonempty_elements if el.area > 0]
    non_under = [el for el in elements if not cats.is_underlay(el.category)]
    occ_els = elements if include_underlays else non_under
    masks = {id(el): _grid_box_mask(el.box, grid) for el in elements}

    sal = _grid_saliency(np.asarray(saliency, dtype=np.float64), grid)
    union = np.zeros((grid, grid), dtype=bool)
    for el in occ_els:
        union |= masks[id(el)]
    occ_value = float(sal[union].mean()) if union.any() else 0.0

    low = sal <= uti_threshold
    uti_value = float((union & low).sum() / low.sum()) if low.any() else None

    if len(non_under) < 2:
        ove_value = 0.0
    else:
        pair_vals = []
        for i in range(len(non_under)):
            for j in range(i + 1, len(non_under)):
                a = masks[id(non_under[i])]
                b = masks[id(non_under[j])]
                union_ab = (a | b).sum()
                pair_vals.append((a & b).sum() / union_ab if union_ab else 0.0)
        ove_value = float(np.mean(pair_vals))

    ratios = []
    for u_el in elements:
        if not cats.is_underlay(u_el.category):
            continue
        best = 0.0
        for el in non_under:
            area = masks[id(el)].sum()
            if area == 0:
                continue
            best = max(best, (masks[id(el)] & masks[id(u_el)]).sum() / area)
        ratios.append(float(best))
    return {"occ": occ_value, "uti": uti_value, "ove": ove_value, "ratios": ratios}


def pixel_crosscheck(
    layouts: list[Layout],
    bundles: list,
    cats: CategorySet,
    grid: int = 512,
    uti_threshold: float = DEFAULT_UTI_THRESHOLD,
    include_underlays_in_occ: bool = True,
) -> dict:
    """Corpus aggregates from the grid path plus deltas against the analytic path."""
    report = evaluate_corpus(
        layouts, bundles, cats,
        uti_threshold=uti_threshold,
        include_underlays_in_occ=include_underlays_in_occ,
    )
    occs, utis, oves = [], [], []
    all_ratios: list[float] = []
    for layout, bundle in zip(layouts, bundles):
        g = grid_metrics(
            layout, bundle.saliency, cats, grid,
            uti_threshold=uti_threshold, include_underlays=include_underlays_in_occ,
        )
        occs.append(g["occ"])
        oves.append(g["ove"])
        if g["uti"] is not None:
            utis.append(g["uti"])
        all_ratios.extend(g["ratios"])
    grid_summary = {
        "occ": float(np.mean(occs)) if occs else None,
        "uti": float(np.mean(utis)) if utis else None,
        "ove": float(np.mean(oves)) if oves else None,
        "und_l": float(np.mean(all_ratios)) if all_ratios else None,
        "und_s": (
            float(np.mean([r >= 1.0 - STRICT_UNDERLAY_TOL for r in all_ratios]))
            if all_ratios
            else None
        ),
    }
    analytic = report.summary_dict()
    deltas = {
        k: (
            None
            if grid_summary[k] is None or analytic[k] is None
            else abs(grid_summary[k] - analytic[k])
        )
        for k in grid_summary
    }
    return {"grid": grid_summary, "analytic": analytic, "abs_delta": deltas}
