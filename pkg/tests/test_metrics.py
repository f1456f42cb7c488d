import json
from types import SimpleNamespace

import numpy as np
import pytest

import oracles
from layoutgen.layout import CategorySet, Layout, LayoutElement
from layoutgen.metrics import (
    MetricError,
    PixelField,
    disjoint_cells,
    evaluate_corpus,
    gradient_magnitude,
    iou,
    luminance,
    occ,
    ove,
    overlap_ratio,
    rea,
    sma,
    und,
    underlay_ratios,
    union_area,
    uti,
)

CATS = CategorySet.poster()
LOGO, TEXT, UNDER = CATS.index_of("logo"), CATS.index_of("text"), CATS.index_of("underlay")


def el(cat, x, y, w, h):
    return LayoutElement(category=cat, box=(x, y, w, h))


def random_layout(rng, n_elements=None):
    """Layout with boxes fully inside the unit square, mixed categories."""
    n = n_elements if n_elements is not None else int(rng.integers(1, 8))
    els = []
    for _ in range(n):
        cat = int(rng.integers(1, CATS.n_categories))
        w, h = rng.uniform(0.05, 0.5, 2)
        x = rng.uniform(w / 2, 1 - w / 2)
        y = rng.uniform(h / 2, 1 - h / 2)
        els.append(el(cat, float(x), float(y), float(w), float(h)))
    return Layout(elements=tuple(els))


def smooth_saliency(rng, h=24, w=16):
    """Low-resolution blobby map in [0, 1]."""
    base = rng.random((h, w))
    k = np.ones((3, 3)) / 9
    out = base.copy()
    for _ in range(2):
        padded = np.pad(out, 1, mode="edge")
        out = sum(
            k[i, j] * padded[i : i + h, j : j + w] for i in range(3) for j in range(3)
        )
    return np.clip(out, 0.0, 1.0)


class TestOverlapRatio:
    def test_fully_inside(self):
        assert overlap_ratio((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.8, 0.8)) == 1.0

    def test_disjoint(self):
        assert overlap_ratio((0.2, 0.2, 0.2, 0.2), (0.8, 0.8, 0.2, 0.2)) == 0.0

    def test_quarter_overlap(self):
        r = overlap_ratio((0.25, 0.25, 0.5, 0.5), (0.5, 0.5, 0.5, 0.5))
        assert r == pytest.approx(0.25)
        assert r == pytest.approx(
            oracles.overlap_ratio_oracle((0.25, 0.25, 0.5, 0.5), (0.5, 0.5, 0.5, 0.5)), abs=1e-2
        )

    def test_zero_area_a(self):
        assert overlap_ratio((0.5, 0.5, 0.0, 0.3), (0.5, 0.5, 0.5, 0.5)) == 0.0


class TestIoU:
    def test_identical(self):
        assert iou((0.3, 0.3, 0.4, 0.4), (0.3, 0.3, 0.4, 0.4)) == pytest.approx(1.0)

    def test_disjoint(self):
        assert iou((0.2, 0.2, 0.2, 0.2), (0.8, 0.8, 0.2, 0.2)) == 0.0

    def test_one_seventh(self):
        # [0, .5]^2 against [.25, .75]^2: 0.0625 / 0.4375
        r = iou((0.25, 0.25, 0.5, 0.5), (0.5, 0.5, 0.5, 0.5))
        assert r == pytest.approx(1 / 7)

    def test_matches_pixel_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.1, 0.4, 2))
            b = tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.1, 0.4, 2))
            assert iou(a, b) == pytest.approx(oracles.iou_oracle(a, b), abs=1e-2)


class TestUnd:
    def test_exact_cover(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.3, 0.1), el(UNDER, 0.5, 0.5, 0.3, 0.1)))
        assert und(layout, CATS) == (1.0, 1.0)

    def test_partial_cover(self):
        layout = Layout(
            elements=(el(TEXT, 0.25, 0.25, 0.5, 0.5), el(UNDER, 0.5, 0.5, 0.5, 0.5))
        )
        und_l, und_s = und(layout, CATS)
        assert und_l == pytest.approx(0.25)
        assert und_s == 0.0

    def test_no_underlays_sentinel(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.3, 0.1),))
        assert und(layout, CATS) == (None, None)

    def test_best_element_wins(self):
        layout = Layout(
            elements=(
                el(TEXT, 0.1, 0.1, 0.1, 0.1),  # off the underlay
                el(LOGO, 0.6, 0.6, 0.1, 0.1),  # fully on it
                el(UNDER, 0.6, 0.6, 0.4, 0.4),
            )
        )
        assert und(layout, CATS) == (1.0, 1.0)

    def test_underlay_growth_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            layout = random_layout(rng, 4)
            base = [e for e in layout.elements]
            base.append(el(UNDER, 0.5, 0.5, 0.3, 0.3))
            small = Layout(elements=tuple(base))
            base[-1] = el(UNDER, 0.5, 0.5, 0.6, 0.6)  # superset box
            big = Layout(elements=tuple(base))
            assert und(big, CATS)[0] >= und(small, CATS)[0] - 1e-12


class TestOve:
    def test_identical_pair(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.2, 0.2), el(LOGO, 0.5, 0.5, 0.2, 0.2)))
        assert ove(layout, CATS) == pytest.approx(1.0)

    def test_disjoint_pair(self):
        layout = Layout(elements=(el(TEXT, 0.2, 0.2, 0.2, 0.2), el(LOGO, 0.8, 0.8, 0.2, 0.2)))
        assert ove(layout, CATS) == 0.0

    def test_underlays_excluded(self):
        layout = Layout(
            elements=(el(TEXT, 0.5, 0.5, 0.2, 0.2), el(UNDER, 0.5, 0.5, 0.4, 0.4))
        )
        assert ove(layout, CATS) == 0.0  # only one non-underlay element

    def test_translation_invariance(self):
        rng = np.random.default_rng(8)
        layout = random_layout(rng, 5)
        shifted = Layout(
            elements=tuple(
                el(e.category, e.box[0] + 0.05, e.box[1] - 0.03, e.box[2], e.box[3])
                for e in layout.elements
            )
        )
        assert ove(shifted, CATS) == pytest.approx(ove(layout, CATS), abs=1e-12)
        if underlay_ratios(layout, CATS):
            assert und(shifted, CATS)[0] == pytest.approx(und(layout, CATS)[0], abs=1e-12)


class TestPixelField:
    def test_pixel_aligned_integral_equals_sum(self):
        rng = np.random.default_rng(1)
        values = rng.random((6, 8))
        f = PixelField(values)
        assert f.integral((0.0, 0.0, 1.0, 1.0)) == pytest.approx(values.mean(), abs=1e-12)
        # one exact pixel: col 2, row 3 of the 8x6 grid
        r = (2 / 8, 3 / 6, 3 / 8, 4 / 6)
        assert f.integral(r) == pytest.approx(values[3, 2] / 48, abs=1e-14)

    def test_fractional_rects_match_loop_oracle(self):
        rng = np.random.default_rng(2)
        values = rng.random((5, 7))
        f = PixelField(values)
        for _ in range(30):
            x0, y0 = rng.uniform(0, 0.9, 2)
            x1 = rng.uniform(x0, 1)
            y1 = rng.uniform(y0, 1)
            want = oracles.rect_integral_oracle(values, (x0, y0, x1, y1))
            assert f.integral((x0, y0, x1, y1)) == pytest.approx(want, abs=1e-12)

    def test_additivity(self):
        values = np.random.default_rng(4).random((4, 4))
        f = PixelField(values)
        whole = f.integral((0.1, 0.1, 0.9, 0.9))
        left = f.integral((0.1, 0.1, 0.55, 0.9))
        right = f.integral((0.55, 0.1, 0.9, 0.9))
        assert whole == pytest.approx(left + right, abs=1e-14)


class TestDisjointCells:
    def test_union_area_matches_pixel_count(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            layout = random_layout(rng, 5)
            boxes = [e.box for e in layout.elements]
            rects = [
                (x - w / 2, y - h / 2, x + w / 2, y + h / 2) for (x, y, w, h) in boxes
            ]
            want = oracles.union_mask(boxes).mean()
            assert union_area(rects) == pytest.approx(want, abs=1e-2)

    def test_cells_are_disjoint(self):
        rects = [(0.0, 0.0, 0.6, 0.6), (0.4, 0.4, 1.0, 1.0)]
        cells = disjoint_cells(rects)
        total = sum((c[2] - c[0]) * (c[3] - c[1]) for c in cells)
        assert total == pytest.approx(0.36 + 0.36 - 0.04)
        for i, a in enumerate(cells):
            for b in cells[i + 1 :]:
                ix = min(a[2], b[2]) - max(a[0], b[0])
                iy = min(a[3], b[3]) - max(a[1], b[1])
                assert ix <= 1e-12 or iy <= 1e-12


class TestOcc:
    def test_zero_saliency(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.4, 0.4),))
        assert occ(layout, np.zeros((16, 16))) == 0.0

    def test_full_saliency(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.4, 0.4),))
        assert occ(layout, np.ones((16, 16))) == pytest.approx(1.0)

    def test_constant_half(self):
        layout = Layout(elements=(el(TEXT, 0.3, 0.6, 0.37, 0.21),))
        assert occ(layout, np.full((16, 16), 0.5)) == pytest.approx(0.5)

    def test_empty_layout_zero(self):
        assert occ(Layout(elements=()), np.ones((8, 8))) == 0.0

    def test_exclude_underlays_flag(self):
        saliency = np.zeros((16, 16))
        saliency[:, 8:] = 1.0  # right half salient
        layout = Layout(
            elements=(el(TEXT, 0.25, 0.5, 0.3, 0.3), el(UNDER, 0.75, 0.5, 0.3, 0.3))
        )
        assert occ(layout, saliency, CATS, include_underlays=True) == pytest.approx(0.5)
        assert occ(layout, saliency, CATS, include_underlays=False) == pytest.approx(0.0)

    def test_matches_pixel_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            layout = random_layout(rng)
            saliency = smooth_saliency(rng)
            assert occ(layout, saliency) == pytest.approx(
                oracles.occ_oracle(layout, saliency), abs=1e-2
            )


class TestRea:
    def test_constant_canvas_zero(self):
        canvas = np.full((16, 16, 3), 0.5)
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.5, 0.5),))
        assert rea(layout, canvas, CATS) == 0.0

    def test_text_under_underlay_is_sentinel(self):
        canvas = np.random.default_rng(0).random((16, 16, 3))
        layout = Layout(
            elements=(el(TEXT, 0.5, 0.5, 0.2, 0.2), el(UNDER, 0.5, 0.5, 0.4, 0.4))
        )
        assert rea(layout, canvas, CATS) is None

    def test_no_text_is_sentinel(self):
        canvas = np.zeros((8, 8, 3))
        layout = Layout(elements=(el(LOGO, 0.5, 0.5, 0.3, 0.3),))
        assert rea(layout, canvas, CATS) is None

    def test_step_edge_hand_count(self):
        # Luminance step of 0.4 at column 10 of a 16x20 canvas; full-canvas
        # text region. Central differences put 0.2 on the two columns
        # adjacent to the step: mean = 2 * 16 * 0.2 / (16 * 20) = 0.02.
        h, w, d = 16, 20, 0.4
        canvas = np.zeros((h, w, 3))
        canvas[:, 10:, :] = d
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 1.0, 1.0),))
        assert rea(layout, canvas, CATS) == pytest.approx(2 * h * (d / 2) / (h * w))

    def test_luminance_weights(self):
        canvas = np.zeros((2, 2, 3))
        canvas[..., 0] = 1.0
        assert luminance(canvas)[0, 0] == pytest.approx(0.299)

    def test_gradient_replicated_border(self):
        lum = np.tile(np.arange(4.0), (3, 1))  # constant slope 1 in x
        g = gradient_magnitude(lum)
        np.testing.assert_allclose(g[:, 1:-1], 1.0)
        np.testing.assert_allclose(g[:, 0], 0.5)  # replicated edge halves it


class TestSma:
    def test_tiny_element(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.01, 0.01),))
        assert sma(layout) == 1.0

    def test_regular_element(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.5, 0.5),))
        assert sma(layout) == 0.0

    def test_thin_element_or_semantics(self):
        # area is fine (0.0171) but width is under 2%
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.019, 0.9),))
        assert sma(layout) == 1.0

    def test_fraction(self):
        layout = Layout(
            elements=(el(TEXT, 0.5, 0.5, 0.01, 0.01), el(LOGO, 0.5, 0.5, 0.5, 0.5))
        )
        assert sma(layout) == 0.5

    def test_empty_sentinel(self):
        assert sma(Layout(elements=())) is None


class TestUti:
    def test_zero_saliency(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.5, 0.5),))
        assert uti(layout, np.zeros((16, 16))) == pytest.approx(0.25)

    def test_fully_salient_sentinel(self):
        layout = Layout(elements=(el(TEXT, 0.5, 0.5, 0.5, 0.5),))
        assert uti(layout, np.ones((16, 16))) is None

    def test_half_salient_box_in_free_half(self):
        saliency = np.zeros((32, 32))
        saliency[:, :16] = 1.0  # left half salient
        # box of area 0.05 entirely in the right half: 0.05 / 0.5 = 0.10
        layout = Layout(elements=(el(TEXT, 0.75, 0.5, 0.25, 0.2),))
        assert uti(layout, saliency) == pytest.approx(0.10)
        assert uti(layout, saliency) == pytest.approx(
            oracles.uti_oracle(layout, saliency), abs=1e-2
        )

    def test_matches_pixel_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            layout = random_layout(rng)
            saliency = smooth_saliency(rng)
            want = oracles.uti_oracle(layout, saliency)
            got = uti(layout, saliency)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-2)


class TestEvaluateCorpus:
    def _bundle(self, rng, i):
        return SimpleNamespace(
            id=f"s{i}", canvas=rng.random((24, 16, 3)), saliency=smooth_saliency(rng)
        )

    def test_single_layout_equals_per_layout(self):
        rng = np.random.default_rng(10)
        layout = random_layout(rng, 5)
        bundle = self._bundle(rng, 0)
        report = evaluate_corpus([layout], [bundle], CATS)
        row = report.per_layout[0]
        assert report.occ == pytest.approx(row["occ"])
        assert report.ove == pytest.approx(row["ove"])
        if row["und_l"] is not None:
            assert report.und_l == pytest.approx(row["und_l"])

    def test_duplicated_corpus_same_report(self):
        rng = np.random.default_rng(11)
        layouts = [random_layout(rng, 4) for _ in range(3)]
        bundles = [self._bundle(rng, i) for i in range(3)]
        a = evaluate_corpus(layouts, bundles, CATS).summary_dict()
        b = evaluate_corpus(layouts * 2, bundles * 2, CATS).summary_dict()
        for key in ("occ", "rea", "und_l", "und_s", "ove", "sma", "uti"):
            if a[key] is None:
                assert b[key] is None
            else:
                assert b[key] == pytest.approx(a[key], abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            evaluate_corpus([Layout(elements=())], [], CATS)

    def test_und_aggregates_per_underlay(self):
        # one layout with two underlays (ratios 1 and 0), one with none:
        # corpus und_l must be 0.5, not the mean of per-layout means
        covered = Layout(
            elements=(
                el(TEXT, 0.2, 0.2, 0.1, 0.1),
                el(UNDER, 0.2, 0.2, 0.1, 0.1),
                el(UNDER, 0.8, 0.8, 0.1, 0.1),
            )
        )
        plain = Layout(elements=(el(TEXT, 0.5, 0.5, 0.2, 0.2),))
        rng = np.random.default_rng(12)
        bundles = [self._bundle(rng, i) for i in range(2)]
        report = evaluate_corpus([covered, plain], bundles, CATS)
        assert report.und_l == pytest.approx(0.5)
        assert report.und_s == pytest.approx(0.5)
        assert report.n_underlays == 2

    def test_writes_deterministic_reports(self, tmp_path):
        rng = np.random.default_rng(13)
        layouts = [random_layout(rng, 3) for _ in range(2)]
        bundles = [self._bundle(rng, i) for i in range(2)]
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        c1, c2 = tmp_path / "a.csv", tmp_path / "b.csv"
        evaluate_corpus(layouts, bundles, CATS, out_json=p1, out_csv=c1)
        evaluate_corpus(layouts, bundles, CATS, out_json=p2, out_csv=c2)
        assert p1.read_bytes() == p2.read_bytes()
        assert c1.read_bytes() == c2.read_bytes()
        payload = json.loads(p1.read_text())
        assert payload["n_layouts"] == 2
        assert len(payload["per_layout"]) == 2

    def test_ranges_on_fuzzed_corpora(self):
        rng = np.random.default_rng(14)
        layouts = [random_layout(rng) for _ in range(8)]
        bundles = [self._bundle(rng, i) for i in range(8)]
        report = evaluate_corpus(layouts, bundles, CATS)
        for key in ("occ", "und_l", "und_s", "ove", "sma", "uti"):
            v = report.summary_dict()[key]
            if v is not None:
                assert 0.0 <= v <= 1.0, key
        if report.rea is not None:
            assert report.rea >= 0.0


class TestGridPath:
    """The in-package rasterized route agrees with both the analytic route
    and the independent per-pixel oracle."""

    def test_grid_matches_analytic_on_random_layouts(self):
        from layoutgen.metrics import grid_metrics

        rng = np.random.default_rng(77)
        for _ in range(20):
            layout = random_layout(rng)
            sal = smooth_saliency(rng)
            g = grid_metrics(layout, sal, CATS, grid=512)
            occ_a = occ(layout, sal, CATS)
            uti_a = uti(layout, sal)
            ove_a = ove(layout, CATS)
            assert abs(g["occ"] - occ_a) < 1e-2
            assert abs(g["ove"] - ove_a) < 1e-2
            if uti_a is not None and g["uti"] is not None:
                assert abs(g["uti"] - uti_a) < 1e-2
            ratios_a = sorted(underlay_ratios(layout, CATS))
            assert len(g["ratios"]) == len(ratios_a)
            for ga, aa in zip(sorted(g["ratios"]), ratios_a):
                assert abs(ga - aa) < 1e-2

    def test_grid_matches_independent_oracle(self):
        from layoutgen.metrics import grid_metrics

        rng = np.random.default_rng(78)
        for _ in range(5):
            layout = random_layout(rng, n_elements=4)
            sal = smooth_saliency(rng)
            g = grid_metrics(layout, sal, CATS, grid=512)
            assert abs(g["occ"] - oracles.occ_oracle(layout, sal)) < 1e-2
            assert abs(g["ove"] - oracles.ove_oracle(layout, CATS)) < 1e-2

    def test_pixel_crosscheck_report_shape(self):
        from layoutgen.metrics import pixel_crosscheck

        rng = np.random.default_rng(79)
        layouts = [random_layout(rng) for _ in range(3)]
        bundles = [
            SimpleNamespace(id=str(i), saliency=smooth_saliency(rng), canvas=rng.random((24, 16, 3)))
            for i in range(3)
        ]
        out = pixel_crosscheck(layouts, bundles, CATS, grid=256)
        assert set(out) == {"grid", "analytic", "abs_delta"}
        for key in ("occ", "uti", "ove", "und_l", "und_s"):
            delta = out["abs_delta"][key]
            assert delta is None or delta < 2e-2
