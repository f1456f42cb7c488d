"""Layouts, element categories, and the layout <-> tensor mapping.

A layout is a fixed-capacity sequence of typed elements, each a category
plus a normalized box (x, y, w, h) where (x, y) is the box center and all
four values are fractions of the canvas in [0, 1]. The diffusion process
runs on a continuous encoding: per element, a scaled one-hot category
block concatenated with the scaled box, all entries living in [-1, 1].
Category index 0 is reserved for the empty/padding slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Continuous encoding of a layout: (n_max, n_categories + 4) float array,
# entries in [-1, 1]. Row = scaled one-hot category block || scaled box.
LayoutTensor = np.ndarray

DEFAULT_N_MAX = 11


class LayoutError(ValueError):
    """Invalid layout, category, or tensor input."""


@dataclass(frozen=True)
class CategorySet:
    """Ordered element categories. Index 0 is always the empty slot."""

    names: tuple[str, ...]
    underlay_indices: frozenset[int] = frozenset()
    text_indices: frozenset[int] = frozenset()

    def __post_init__(self):
        if not self.names or self.names[0] != "empty":
            raise LayoutError("category index 0 must be named 'empty'")
        if len(set(self.names)) != len(self.names):
            raise LayoutError(f"duplicate category names: {self.names}")
        for idx in self.underlay_indices | self.text_indices:
            if not 0 < idx < len(self.names):
                raise LayoutError(f"category index {idx} out of range")
        if 0 in self.underlay_indices:
            raise LayoutError("the empty category cannot be an underlay")

    @classmethod
    def from_names(cls, names, underlay=("underlay",), text=("text",)) -> "CategorySet":
        """Build from name lists, flagging underlay/text roles by name."""
        names = tuple(names)
        return cls(
            names=names,
            underlay_indices=frozenset(names.index(n) for n in underlay if n in names),
            text_indices=frozenset(names.index(n) for n in text if n in names),
        )

    @classmethod
    def poster(cls) -> "CategorySet":
        """The e-commerce poster set: logo, text, underlay."""
        return cls.from_names(("empty", "logo", "text", "underlay"))

    @property
    def n_categories(self) -> int:
        return len(self.names)

    @property
    def n_channels(self) -> int:
        """Width of one tensor row: category block plus 4 box coords."""
        return len(self.names) + 4

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LayoutError(f"unknown category {name!r}; known: {self.names}") from None

    def is_underlay(self, idx: int) -> bool:
        return idx in self.underlay_indices

    def is_text(self, idx: int) -> bool:
        return idx in self.text_indices


@dataclass(frozen=True)
class LayoutElement:
    category: int
    box: tuple[float, float, float, float]  # (x, y, w, h), center convention

    def __post_init__(self):
        if self.category < 0:
            raise LayoutError(f"negative category {self.category}")
        if len(self.box) != 4:
            raise LayoutError(f"box must have 4 entries, got {self.box}")

    @property
    def is_empty(self) -> bool:
        return self.category == 0

    def edges(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corners of the box."""
        x, y, w, h = self.box
        return (x - w / 2, y - h / 2, x + w / 2, y + h / 2)

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


@dataclass(frozen=True)
class Layout:
    """A sequence of elements over a pixel canvas of size (h, w)."""

    elements: tuple[LayoutElement, ...]
    canvas_size: tuple[int, int] = (240, 160)  # (h, w) pixels

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def nonempty_elements(self) -> tuple[LayoutElement, ...]:
        return tuple(e for e in self.elements if not e.is_empty)

    def drop_empty(self) -> "Layout":
        return replace(self, elements=self.nonempty_elements)


def scale_to_unit(v):
    """Affine [0,1] -> [-1,1]."""
    return np.asarray(v) * 2.0 - 1.0


def unscale_from_unit(v):
    """Affine [-1,1] -> [0,1]; inverse of scale_to_unit."""
    return (np.asarray(v) + 1.0) / 2.0


def padding_row(cats: CategorySet) -> np.ndarray:
    """The constant row encoding an empty element with a zero box."""
    row = np.full(cats.n_channels, -1.0)
    row[0] = 1.0  # one-hot at the empty index, scaled
    return row


def tokenize(layout: Layout, cats: CategorySet, n_max: int = DEFAULT_N_MAX) -> LayoutTensor:
    """Encode a layout as an (n_max, n_categories+4) tensor in [-1, 1].

    Rows beyond the layout length are padding rows (empty category,
    zero box, scaled).
    """
    if len(layout) > n_max:
        raise LayoutError(f"layout has {len(layout)} elements, capacity is {n_max}")
    out = np.tile(padding_row(cats), (n_max, 1))
    for i, el in enumerate(layout.elements):
        if el.category >= cats.n_categories:
            raise LayoutError(
                f"element {i} has category {el.category}, set has {cats.n_categories}"
            )
        onehot = np.zeros(cats.n_categories)
        onehot[el.category] = 1.0
        out[i, : cats.n_categories] = scale_to_unit(onehot)
        out[i, cats.n_categories :] = scale_to_unit(np.asarray(el.box, dtype=np.float64))
    return out


def detokenize(
    tensor: LayoutTensor, cats: CategorySet, canvas_size: tuple[int, int] = (240, 160)
) -> Layout:
    """Decode a tensor back to a layout.

    Category is the argmax over the category block (ties break to the
    lowest index); boxes are unscaled and clamped to [0, 1]; rows that
    decode to the empty category are dropped. Element order is preserved.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 2 or tensor.shape[1] != cats.n_channels:
        raise LayoutError(f"expected shape (n, {cats.n_channels}), got {tensor.shape}")
    if not np.isfinite(tensor).all():
        raise LayoutError("tensor contains NaN or Inf")
    elements = []
    for row in tensor:
        cat = int(np.argmax(row[: cats.n_categories]))
        if cat == 0:
            continue
        box = np.clip(unscale_from_unit(row[cats.n_categories :]), 0.0, 1.0)
        elements.append(LayoutElement(category=cat, box=tuple(float(v) for v in box)))
    return Layout(elements=tuple(elements), canvas_size=canvas_size)


def canonicalize(layout: Layout) -> Layout:
    """Clamp boxes to [0,1], zero empty-element boxes, move padding to the tail.

    Idempotent; the relative order of non-empty elements is preserved.
    """
    real, pads = [], []
    for el in layout.elements:
        if el.is_empty:
            pads.append(LayoutElement(category=0, box=(0.0, 0.0, 0.0, 0.0)))
        else:
            box = tuple(float(min(1.0, max(0.0, v))) for v in el.box)
            real.append(LayoutElement(category=el.category, box=box))
    return replace(layout, elements=tuple(real + pads))
