"""Corpus generation, ingestion, splitting, and batch loading.

A corpus directory holds `canvases/<id>.png` (RGB), `saliency/<id>.png`
(8-bit gray), `layouts/<id>.json`, and `manifest.json` with the category
set and train/val/test split tags.

The synthetic generator builds poster-like samples whose optimal layout
is known by construction: salient objects sit on one side of the canvas,
text elements (one per object) stack in a column on the opposite side,
each text gets an underlay covering it with a small margin, and a logo
sits in the top corner of the text side. Ground truths therefore score
Ove = 0, Und_S = 1, Sma = 0, and Occ stays under a configured ceiling
(the saliency map has a faint ambient level so Occ comparisons are
meaningful). Every sample is verified against the metrics module and
redrawn on the rare geometry failure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .layout import CategorySet, Layout, LayoutElement, tokenize
from .metrics import occ, ove, sma, und
from .saliency import SalientBoxSet, salient_boxes

MANIFEST_VERSION = 1


class DataError(ValueError):
    """Corpus structure, pairing, or schema problem."""


@dataclass(frozen=True)
class CanvasBundle:
    """One canvas with its saliency map and cached salient boxes."""

    id: str
    canvas: np.ndarray  # (H, W, 3) float in [0,1]
    saliency: np.ndarray  # (H, W) float in [0,1]
    boxes: SalientBoxSet

    @property
    def canvas_size(self) -> tuple[int, int]:
        return self.canvas.shape[0], self.canvas.shape[1]


@dataclass(frozen=True)
class CorpusManifest:
    cats: CategorySet
    samples: tuple[tuple[str, str], ...]  # (id, split)
    seed: int
    config_hash: str
    n_dropped: int = 0

    def ids(self, split: str | None = None) -> tuple[str, ...]:
        if split is None:
            return tuple(sid for sid, _ in self.samples)
        return tuple(sid for sid, sp in self.samples if sp == split)

    def to_json(self, path) -> None:
        payload = {
            "format_version": MANIFEST_VERSION,
            "categories": {
                "names": list(self.cats.names),
                "underlay_indices": sorted(self.cats.underlay_indices),
                "text_indices": sorted(self.cats.text_indices),
            },
            "samples": [{"id": sid, "split": sp} for sid, sp in self.samples],
            "seed": self.seed,
            "config_hash": self.config_hash,
            "n_dropped": self.n_dropped,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "CorpusManifest":
        payload = json.loads(Path(path).read_text())
        if payload.get("format_version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {payload.get('format_version')}")
        cat = payload["categories"]
        cats = CategorySet(
            names=tuple(cat["names"]),
            underlay_indices=frozenset(cat["underlay_indices"]),
            text_indices=frozenset(cat["text_indices"]),
        )
        return cls(
            cats=cats,
            samples=tuple((s["id"], s["split"]) for s in payload["samples"]),
            seed=payload["seed"],
            config_hash=payload["config_hash"],
            n_dropped=payload.get("n_dropped", 0),
        )


def split_ids(ids: list[str], seed: int) -> tuple[tuple[str, str], ...]:
    """Deterministic 8:1:1 split after a seeded shuffle of sorted ids."""
    ids = sorted(ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train, n_val = int(0.8 * n), int(0.1 * n)
    tags = []
    for i, sid in enumerate(shuffled):
        if i < n_train:
            tags.append((sid, "train"))
        elif i < n_train + n_val:
            tags.append((sid, "val"))
        else:
            tags.append((sid, "test"))
    return tuple(tags)


# ---------------------------------------------------------------------------
# file I/O


def save_image(path, arr: np.ndarray) -> None:
    """Write a float [0,1] array as PNG (RGB for 3D, grayscale for 2D)."""
    data = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_layout_json(path, layout: Layout, cats: CategorySet) -> None:
    h, w = layout.canvas_size
    payload = {
        "canvas": {"h": h, "w": w},
        "elements": [
            {"category": cats.names[e.category], "box": list(e.box)}
            for e in layout.nonempty_elements
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_layout_json(path, cats: CategorySet) -> Layout:
    payload = json.loads(Path(path).read_text())
    try:
        canvas_size = (int(payload["canvas"]["h"]), int(payload["canvas"]["w"]))
        elements = tuple(
            LayoutElement(category=cats.index_of(e["category"]), box=tuple(map(float, e["box"])))
            for e in payload["elements"]
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"bad layout schema in {path}: {exc}") from exc
    return Layout(elements=elements, canvas_size=canvas_size)


def load_bundle(
    root, sid: str, threshold: float = 0.5, k_max: int = 8, min_area: float = 0.001
) -> CanvasBundle:
    root = Path(root)
    canvas = load_image(root / "canvases" / f"{sid}.png")
    saliency = load_image(root / "saliency" / f"{sid}.png")
    if canvas.ndim != 3 or canvas.shape[2] != 3:
        raise DataError(f"sample {sid}: canvas must be RGB, got shape {canvas.shape}")
    if saliency.ndim != 2:
        raise DataError(f"sample {sid}: saliency must be grayscale, got shape {saliency.shape}")
    if canvas.shape[:2] != saliency.shape:
        raise DataError(
            f"sample {sid}: canvas {canvas.shape[:2]} and saliency {saliency.shape} differ"
        )
    boxes = salient_boxes(saliency, s=threshold, k_max=k_max, min_area=min_area)
    return CanvasBundle(id=sid, canvas=canvas, saliency=saliency, boxes=boxes)


# ---------------------------------------------------------------------------
# ingestion


def ingest(root, cats: CategorySet | None = None, seed: int = 0, n_max: int = 11,
           log=None) -> CorpusManifest:
    """Validate a corpus directory, drop bad samples, split 8:1:1.

    Samples missing a canvas/saliency/layout leg are skipped; samples
    with more than n_max elements are dropped. Writes manifest.json.
    """
    root = Path(root)
    cats = cats or CategorySet.poster()
    log = log or (lambda msg: None)
    ids = sorted(p.stem for p in (root / "canvases").glob("*.png"))
    kept, dropped = [], 0
    for sid in ids:
        if not (root / "saliency" / f"{sid}.png").exists() or not (
            root / "layouts" / f"{sid}.json"
        ).exists():
            log(f"skip {sid}: missing saliency or layout file")
            dropped += 1
            continue
        try:
            load_bundle(root, sid)
            layout = load_layout_json(root / "layouts" / f"{sid}.json", cats)
        except (DataError, ValueError) as exc:
            log(f"skip {sid}: {exc}")
            dropped += 1
            continue
        if len(layout.nonempty_elements) > n_max:
            log(f"drop {sid}: {len(layout.nonempty_elements)} elements exceeds {n_max}")
            dropped += 1
            continue
        kept.append(sid)
    if not kept:
        raise DataError(f"no valid samples under {root}")
    config_hash = hashlib.sha256(
        json.dumps({"cats": list(cats.names), "n_max": n_max}, sort_keys=True).encode()
    ).hexdigest()[:16]
    manifest = CorpusManifest(
        cats=cats,
        samples=split_ids(kept, seed),
        seed=seed,
        config_hash=config_hash,
        n_dropped=dropped,
    )
    manifest.to_json(root / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    canvas_h: int = 240
    canvas_w: int = 160
    min_objects: int = 1
    max_objects: int = 3
    occ_ceiling: float = 0.07
    underlay_margin: float = 0.045
    saliency_peak: tuple[float, float] = (0.82, 0.95)
    ambient: tuple[float, float] = (0.02, 0.045)
    quant_grid: int = 1024
    max_retries: int = 20


def _quant(v: float, grid: int) -> float:
    return round(min(max(v, 0.0), 1.0) * grid) / grid


def _object_saliency(spec: SyntheticSpec, rects, peaks) -> np.ndarray:
    """Soft object masks with a 3-pixel falloff over the canvas grid."""
    h, w = spec.canvas_h, spec.canvas_w
    px = (np.arange(w) + 0.5) / w
    py = (np.arange(h) + 0.5) / h
    out = np.zeros((h, w))
    for (x0, y0, x1, y1), peak in zip(rects, peaks):
        dx = np.maximum(np.maximum(x0 - px, px - x1), 0.0) * w
        dy = np.maximum(np.maximum(y0 - py, py - y1), 0.0) * h
        d = np.hypot(dx[None, :], dy[:, None])
        out = np.maximum(out, peak * np.clip(1.0 - d / 3.0, 0.0, 1.0))
    return out


def _draw_sample(rng: np.random.Generator, spec: SyntheticSpec, cats: CategorySet):
    """One canvas + saliency + rule-based ground-truth layout."""
    h, w = spec.canvas_h, spec.canvas_w
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects_left = bool(rng.integers(2))
    ox_lo, ox_hi = (0.06, 0.46) if objects_left else (0.54, 0.94)
    text_cx = 0.73 if objects_left else 0.27

    # salient objects in vertical bands on their side
    obj_rects, peaks = [], []
    for i in range(k):
        ow = float(rng.uniform(0.14, 0.26))
        oh = float(rng.uniform(0.10, 0.18))
        band_lo = 0.22 + 0.73 * i / k
        band_hi = 0.22 + 0.73 * (i + 1) / k
        cy = float(rng.uniform(band_lo + oh / 2 + 0.01, band_hi - oh / 2 - 0.01))
        cx = float(rng.uniform(ox_lo + ow / 2, ox_hi - ow / 2))
        obj_rects.append((cx - ow / 2, cy - oh / 2, cx + ow / 2, cy + oh / 2))
        peaks.append(float(rng.uniform(*spec.saliency_peak)))

    ambient = float(rng.uniform(*spec.ambient))
    px = (np.arange(w) + 0.5) / w
    py = (np.arange(h) + 0.5) / h
    plane = ambient + 0.004 * (py[:, None] - 0.5) + 0.004 * (px[None, :] - 0.5)
    saliency = np.clip(np.maximum(_object_saliency(spec, obj_rects, peaks), plane), 0.0, 1.0)

    # canvas: pastel base, darker object rectangles, mild grain
    base = rng.uniform(0.55, 0.9, 3)
    canvas = np.tile(base, (h, w, 1))
    for x0, y0, x1, y1 in obj_rects:
        r0, r1 = int(y0 * h), int(np.ceil(y1 * h))
        c0, c1 = int(x0 * w), int(np.ceil(x1 * w))
        canvas[r0:r1, c0:c1] = base * rng.uniform(0.35, 0.6)
    canvas = np.clip(canvas + rng.normal(0.0, 0.012, (h, w, 3)), 0.0, 1.0)

    # layout: logo on top of the text column, one text + underlay per object
    g = spec.quant_grid
    m = spec.underlay_margin
    elements = []
    lw, lh = float(rng.uniform(0.10, 0.14)), float(rng.uniform(0.06, 0.09))
    lx = _quant(text_cx + float(rng.uniform(-0.015, 0.015)), g)
    ly = _quant(0.10 + float(rng.uniform(-0.01, 0.01)), g)
    elements.append(
        LayoutElement(category=cats.index_of("logo"), box=(lx, ly, _quant(lw, g), _quant(lh, g)))
    )
    texts = []
    for i in range(k):
        tw = float(rng.uniform(0.30, 0.40))
        th = float(rng.uniform(0.040, 0.050))
        band_c = 0.28 + 0.54 * (i + 0.5) / k
        tx = _quant(text_cx + float(rng.uniform(-0.015, 0.015)), g)
        ty = _quant(band_c + float(rng.uniform(-0.015, 0.015)), g)
        texts.append((tx, ty, _quant(tw, g), _quant(th, g)))
    for tx, ty, tw, th in texts:
        elements.append(LayoutElement(category=cats.index_of("text"), box=(tx, ty, tw, th)))
    for tx, ty, tw, th in texts:
        elements.append(
            LayoutElement(
                category=cats.index_of("underlay"),
                box=(tx, ty, _quant(tw + 2 * m, g), _quant(th + 2 * m, g)),
            )
        )
    layout = Layout(elements=tuple(elements), canvas_size=(h, w))

    # snap to the stored 8-bit precision before verifying guarantees
    canvas = np.round(canvas * 255.0) / 255.0
    saliency = np.round(saliency * 255.0) / 255.0
    return canvas, saliency, layout, k


def _sample_ok(saliency, layout, k, spec: SyntheticSpec, cats: CategorySet) -> bool:
    for e in layout.elements:
        x0, y0, x1, y1 = e.edges()
        if x0 < 0.0 or y0 < 0.0 or x1 > 1.0 or y1 > 1.0:
            return False
    if ove(layout, cats) != 0.0:
        return False
    if und(layout, cats)[1] != 1.0:
        return False
    if sma(layout) != 0.0:
        return False
    if occ(layout, saliency) > spec.occ_ceiling:
        return False
    if len(salient_boxes(saliency)) != k:
        return False
    return True


def generate_synthetic(
    n: int, seed: int, out_dir, spec: SyntheticSpec | None = None
) -> CorpusManifest:
    """Write n verified synthetic samples plus a split manifest."""
    if n < 1:
        raise DataError(f"need n >= 1, got {n}")
    spec = spec or SyntheticSpec()
    cats = CategorySet.poster()
    out = Path(out_dir)
    for sub in ("canvases", "saliency", "layouts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for index in range(n):
        drawn = None
        for attempt in range(spec.max_retries):
            rng = np.random.default_rng([seed, index, attempt])
            canvas, saliency, layout, k = _draw_sample(rng, spec, cats)
            if _sample_ok(saliency, layout, k, spec, cats):
                drawn = (canvas, saliency, layout)
                break
        if drawn is None:
            raise DataError(f"sample {index}: no valid geometry in {spec.max_retries} attempts")
        canvas, saliency, layout = drawn
        sid = f"{index:05d}"
        save_image(out / "canvases" / f"{sid}.png", canvas)
        save_image(out / "saliency" / f"{sid}.png", saliency)
        save_layout_json(out / "layouts" / f"{sid}.json", layout, cats)
    config_hash = hashlib.sha256(
        json.dumps(asdict(spec), sort_keys=True).encode()
    ).hexdigest()[:16]
    manifest = CorpusManifest(
        cats=cats,
        samples=split_ids([f"{i:05d}" for i in range(n)], seed),
        seed=seed,
        config_hash=config_hash,
    )
    manifest.to_json(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# batch loading


def _resize_channel(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area (box-filter) resample of one float channel."""
    img = Image.fromarray(np.asarray(arr, dtype=np.float32), mode="F")
    return np.asarray(img.resize((out_w, out_h), Image.BOX), dtype=np.float64)


def resize_canvas(canvas: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return np.stack(
        [_resize_channel(canvas[..., c], out_h, out_w) for c in range(canvas.shape[2])], axis=-1
    )


@dataclass(frozen=True)
class Batch:
    x0: np.ndarray  # (B, n_max, channels) float32
    images: np.ndarray  # (B, 4, img_h, img_w) float32: RGB + saliency
    boxes: tuple[np.ndarray, ...]  # per sample (K_i, 4) float32, K_i may be 0
    ids: tuple[str, ...]


@dataclass
class TensorCorpus:
    """A whole split resident in memory, ready to batch."""

    x0: np.ndarray
    images: np.ndarray
    boxes: tuple[np.ndarray, ...]
    ids: tuple[str, ...]
    cats: CategorySet

    @classmethod
    def load(
        cls, root, manifest: CorpusManifest, split: str, img_h: int, img_w: int, n_max: int = 11
    ) -> "TensorCorpus":
        ids = manifest.ids(split)
        if not ids:
            raise DataError(f"split {split!r} is empty")
        x0s, images, boxes = [], [], []
        for sid in ids:
            bundle = load_bundle(root, sid)
            layout = load_layout_json(Path(root) / "layouts" / f"{sid}.json", manifest.cats)
            x0s.append(tokenize(layout, manifest.cats, n_max=n_max))
            rgb = resize_canvas(bundle.canvas, img_h, img_w)
            sal = _resize_channel(bundle.saliency, img_h, img_w)
            images.append(
                np.concatenate([rgb.transpose(2, 0, 1), sal[None]], axis=0)
            )
            boxes.append(np.asarray(bundle.boxes.boxes, dtype=np.float32).reshape(-1, 4))
        return cls(
            x0=np.asarray(x0s, dtype=np.float32),
            images=np.asarray(images, dtype=np.float32),
            boxes=tuple(boxes),
            ids=ids,
            cats=manifest.cats,
        )

    def __len__(self) -> int:
        return len(self.ids)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Seeded shuffle when rng is given; last partial batch kept."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield Batch(
                x0=self.x0[idx],
                images=self.images[idx],
                boxes=tuple(self.boxes[i] for i in idx),
                ids=tuple(self.ids[i] for i in idx),
            )


@dataclass(frozen=True)
class Conditioning:
    """Model-ready condition tensors for one canvas."""

    id: str
    images: np.ndarray  # (4, img_h, img_w) float32: RGB + saliency
    boxes: np.ndarray  # (K, 4) float32
    canvas_size: tuple[int, int]


def prepare_conditioning(bundle: CanvasBundle, img_h: int, img_w: int) -> Conditioning:
    rgb = resize_canvas(bundle.canvas, img_h, img_w)
    sal = _resize_channel(bundle.saliency, img_h, img_w)
    images = np.concatenate([rgb.transpose(2, 0, 1), sal[None]], axis=0).astype(np.float32)
    boxes = np.asarray(bundle.boxes.boxes, dtype=np.float32).reshape(-1, 4)
    return Conditioning(id=bundle.id, images=images, boxes=boxes, canvas_size=bundle.canvas_size)


def load_split_bundles(root, manifest: CorpusManifest, split: str) -> list[CanvasBundle]:
    return [load_bundle(root, sid) for sid in manifest.ids(split)]


def load_split_layouts(root, manifest: CorpusManifest, split: str) -> list[Layout]:
    return [
        load_layout_json(Path(root) / "layouts" / f"{sid}.json", manifest.cats)
        for sid in manifest.ids(split)
    ]
