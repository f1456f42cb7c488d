"""Brute-force oracles, written independently of the package internals.

The pixel-grid functions rasterize geometry onto a fine grid (default
512 x 512) using the pixel-center rule and nearest-neighbor saliency
lookup, with no shared code paths with layoutgen.metrics. The flood-fill
functions at the bottom mirror salient-box extraction without scipy.
"""

import numpy as np

GRID = 512


def box_mask(box, g=GRID):
    """Pixels of a g x g grid whose centers lie in a center-convention box."""
    x, y, w, h = box
    cx = (np.arange(g) + 0.5) / g
    cy = (np.arange(g) + 0.5) / g
    in_x = (cx >= x - w / 2) & (cx <= x + w / 2)
    in_y = (cy >= y - h / 2) & (cy <= y + h / 2)
    return in_y[:, None] & in_x[None, :]


def union_mask(boxes, g=GRID):
    m = np.zeros((g, g), dtype=bool)
    for box in boxes:
        m |= box_mask(box, g)
    return m


def saliency_nn(saliency, g=GRID):
    """Saliency sampled at grid pixel centers (nearest neighbor)."""
    saliency = np.asarray(saliency, dtype=np.float64)
    h, w = saliency.shape
    rows = np.minimum((((np.arange(g) + 0.5) / g) * h).astype(int), h - 1)
    cols = np.minimum((((np.arange(g) + 0.5) / g) * w).astype(int), w - 1)
    return saliency[np.ix_(rows, cols)]


def occ_oracle(layout, saliency, g=GRID):
    m = union_mask([e.box for e in layout.nonempty_elements], g)
    if not m.any():
        return 0.0
    return float(saliency_nn(saliency, g)[m].mean())


def overlap_ratio_oracle(a_box, b_box, g=GRID):
    ma, mb = box_mask(a_box, g), box_mask(b_box, g)
    if not ma.any():
        return 0.0
    return float((ma & mb).sum() / ma.sum())


def iou_oracle(a_box, b_box, g=GRID):
    ma, mb = box_mask(a_box, g), box_mask(b_box, g)
    union = (ma | mb).sum()
    if union == 0:
        return 0.0
    return float((ma & mb).sum() / union)


def underlay_ratios_oracle(layout, cats, g=GRID):
    els = layout.nonempty_elements
    unders = [e for e in els if cats.is_underlay(e.category)]
    others = [e for e in els if not cats.is_underlay(e.category)]
    out = []
    for u in unders:
        best = 0.0
        for e in others:
            best = max(best, overlap_ratio_oracle(e.box, u.box, g))
        out.append(best)
    return out


def ove_oracle(layout, cats, g=GRID):
    els = [e for e in layout.nonempty_elements if not cats.is_underlay(e.category)]
    if len(els) < 2:
        return 0.0
    vals = [
        iou_oracle(els[i].box, els[j].box, g)
        for i in range(len(els))
        for j in range(i + 1, len(els))
    ]
    return float(np.mean(vals))


def uti_oracle(layout, saliency, s=0.5, g=GRID):
    nonsalient = saliency_nn(saliency, g) <= s
    denom = nonsalient.sum()
    if denom == 0:
        return None
    m = union_mask([e.box for e in layout.nonempty_elements], g)
    return float((m & nonsalient).sum() / denom)


def rect_integral_oracle(values, rect):
    """Exact integral of a per-pixel-constant field over a rectangle.

    Loops over every pixel and accumulates value * overlap area; slow
    but independent of the prefix-sum implementation.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    x0, y0, x1, y1 = rect
    total = 0.0
    for i in range(h):
        py0, py1 = i / h, (i + 1) / h
        oy = min(y1, py1) - max(y0, py0)
        if oy <= 0:
            continue
        for j in range(w):
            px0, px1 = j / w, (j + 1) / w
            ox = min(x1, px1) - max(x0, px0)
            if ox > 0:
                total += values[i, j] * ox * oy
    return total


def flood_fill_components(mask):
    """Oracle: 4-connected components by explicit BFS, no library calls.

    Returns a list of pixel sets, in scanline order of first discovery.
    """
    h, w = mask.shape
    seen = set()
    components = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] != 1 or (r, c) in seen:
                continue
            comp, queue = set(), [(r, c)]
            seen.add((r, c))
            while queue:
                pr, pc = queue.pop()
                comp.add((pr, pc))
                for nr, nc in ((pr - 1, pc), (pr + 1, pc), (pr, pc - 1), (pr, pc + 1)):
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] == 1 and (nr, nc) not in seen:
                        seen.add((nr, nc))
                        queue.append((nr, nc))
            components.append(comp)
    return components


def oracle_boxes(mask, k_max=8, min_area=0.001):
    """Oracle extract_boxes: exhaustive min/max per flood-filled component."""
    h, w = mask.shape
    rects = []
    for comp in flood_fill_components(mask):
        if len(comp) / (h * w) < min_area:
            continue
        rows = [p[0] for p in comp]
        cols = [p[1] for p in comp]
        first = min(comp)
        r0, r1, c0, c1 = min(rows), max(rows) + 1, min(cols), max(cols) + 1
        box = ((c0 + c1) / 2 / w, (r0 + r1) / 2 / h, (c1 - c0) / w, (r1 - r0) / h)
        rects.append((-len(comp), first[0], first[1], box))
    rects.sort()
    return tuple(b for *_, b in rects[:k_max])
