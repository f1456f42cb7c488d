import numpy as np
import pytest

from layoutgen.layout import (
    CategorySet,
    Layout,
    LayoutElement,
    LayoutError,
    canonicalize,
    detokenize,
    padding_row,
    scale_to_unit,
    tokenize,
    unscale_from_unit,
)

CATS4 = CategorySet(names=("empty", "logo", "text", "underlay"))


def random_canonical_layout(rng, cats, n_elements, grid=1024):
    """Layout with boxes snapped to a dyadic grid (exact under scaling)."""
    elements = []
    for _ in range(n_elements):
        cat = int(rng.integers(1, cats.n_categories))
        box = tuple(float(k) / grid for k in rng.integers(0, grid + 1, size=4))
        elements.append(LayoutElement(category=cat, box=box))
    return Layout(elements=tuple(elements))


class TestTokenize:
    def test_single_element_midpoint_box(self):
        layout = Layout(elements=(LayoutElement(category=1, box=(0.5, 0.5, 0.5, 0.5)),))
        t = tokenize(layout, CATS4, n_max=1)
        np.testing.assert_array_equal(t[0], [-1.0, 1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0])

    def test_empty_layout_padding_rows(self):
        t = tokenize(Layout(elements=()), CATS4, n_max=2)
        expected = np.array([[1.0, -1, -1, -1, -1, -1, -1, -1]] * 2)
        np.testing.assert_array_equal(t, expected)

    def test_shape(self):
        layout = Layout(elements=(LayoutElement(category=2, box=(0.1, 0.2, 0.3, 0.4)),))
        assert tokenize(layout, CATS4, n_max=11).shape == (11, 8)

    def test_capacity_error(self):
        els = tuple(LayoutElement(category=1, box=(0.5,) * 4) for _ in range(3))
        with pytest.raises(LayoutError):
            tokenize(Layout(elements=els), CATS4, n_max=2)

    def test_invalid_category_error(self):
        layout = Layout(elements=(LayoutElement(category=9, box=(0.5,) * 4),))
        with pytest.raises(LayoutError):
            tokenize(layout, CATS4, n_max=2)

    def test_padding_rows_bitwise_constant(self):
        t = tokenize(Layout(elements=()), CATS4, n_max=5)
        for i in range(1, 5):
            assert t[i].tobytes() == t[0].tobytes()
        assert t[0].tobytes() == padding_row(CATS4).tobytes()


class TestDetokenize:
    def test_all_zeros_ties_to_empty(self):
        cats3 = CategorySet(names=("empty", "a", "b"))
        layout = detokenize(np.zeros((4, 7)), cats3)
        assert len(layout) == 0

    def test_argmax_picks_largest(self):
        cats3 = CategorySet(names=("empty", "a", "b"))
        row = np.array([[0.2, 0.9, -0.5, 0.0, 0.0, 0.0, 0.0]])
        layout = detokenize(row, cats3)
        assert layout.elements[0].category == 1

    def test_clamps_boxes(self):
        row = np.zeros((1, 8))
        row[0, 1] = 1.0  # category 1
        row[0, 4:] = [3.0, -3.0, 0.0, 1.0]
        layout = detokenize(row, CATS4)
        assert layout.elements[0].box == (1.0, 0.0, 0.5, 1.0)

    def test_rejects_nan(self):
        row = np.zeros((1, 8))
        row[0, 5] = np.nan
        with pytest.raises(LayoutError):
            detokenize(row, CATS4)

    def test_rejects_bad_width(self):
        with pytest.raises(LayoutError):
            detokenize(np.zeros((2, 5)), CATS4)

    def test_order_preserved(self):
        layout = Layout(
            elements=(
                LayoutElement(category=2, box=(0.25, 0.25, 0.5, 0.5)),
                LayoutElement(category=1, box=(0.75, 0.75, 0.25, 0.25)),
            )
        )
        out = detokenize(tokenize(layout, CATS4, n_max=4), CATS4)
        assert [e.category for e in out.elements] == [2, 1]


class TestCanonicalize:
    def test_clamps(self):
        layout = Layout(elements=(LayoutElement(category=1, box=(-0.1, 0.5, 1.3, 0.2)),))
        out = canonicalize(layout)
        assert out.elements[0].box == (0.0, 0.5, 1.0, 0.2)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        layout = random_canonical_layout(rng, CATS4, 5)
        once = canonicalize(layout)
        assert canonicalize(once) == once

    def test_padding_to_tail(self):
        layout = Layout(
            elements=(
                LayoutElement(category=0, box=(0.0, 0.0, 0.0, 0.0)),
                LayoutElement(category=2, box=(0.5, 0.5, 0.5, 0.5)),
                LayoutElement(category=0, box=(0.0, 0.0, 0.0, 0.0)),
            )
        )
        out = canonicalize(layout)
        assert [e.category for e in out.elements] == [2, 0, 0]

    def test_zeroes_empty_boxes(self):
        layout = Layout(elements=(LayoutElement(category=0, box=(0.3, 0.3, 0.3, 0.3)),))
        out = canonicalize(layout)
        assert out.elements[0].box == (0.0, 0.0, 0.0, 0.0)


class TestRoundtrip:
    def test_roundtrip_identity_on_grid_layouts(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            n = int(rng.integers(0, 12))
            layout = random_canonical_layout(rng, CATS4, n)
            out = detokenize(tokenize(layout, CATS4, n_max=11), CATS4)
            assert out == canonicalize(layout), f"trial {trial}"

    def test_roundtrip_five_elements(self):
        rng = np.random.default_rng(3)
        layout = random_canonical_layout(rng, CATS4, 5)
        out = detokenize(tokenize(layout, CATS4, n_max=11), CATS4)
        assert out == canonicalize(layout)


class TestScaling:
    def test_bijection_within_tolerance(self):
        v = np.linspace(0.0, 1.0, 4001)
        np.testing.assert_allclose(unscale_from_unit(scale_to_unit(v)), v, atol=1e-12)

    def test_endpoints(self):
        assert scale_to_unit(0.0) == -1.0
        assert scale_to_unit(1.0) == 1.0
        assert unscale_from_unit(-1.0) == 0.0
        assert unscale_from_unit(1.0) == 1.0


class TestCategorySet:
    def test_index_zero_must_be_empty(self):
        with pytest.raises(LayoutError):
            CategorySet(names=("logo", "text"))

    def test_duplicate_names_rejected(self):
        with pytest.raises(LayoutError):
            CategorySet(names=("empty", "a", "a"))

    def test_underlay_cannot_be_empty_category(self):
        with pytest.raises(LayoutError):
            CategorySet(names=("empty", "a"), underlay_indices=frozenset({0}))

    def test_poster_roles(self):
        cats = CategorySet.poster()
        assert cats.is_underlay(cats.index_of("underlay"))
        assert cats.is_text(cats.index_of("text"))
        assert not cats.is_underlay(cats.index_of("logo"))
        assert cats.n_channels == 8
