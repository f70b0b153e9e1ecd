from __future__ import annotations

import io
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from chartattrib.chartgen import (
    AllZeroValues,
    GroundTruth,
    Layout,
    UnrenderableTable,
    ZeroSum,
    bar_geometry,
    line_geometry,
    palette,
    pie_angles,
    pie_geometry,
    random_table,
    rasterize_check,
    render_chart,
)
from chartattrib.core import BBox, CellRef, DataTable

UNIT = Layout(width=100, height=100, plot=BBox(0, 0, 1, 1), bar_gap=0.0, pie_center=(0.5, 0.5), pie_radius=0.5)


def boxes_close(a: BBox, b: BBox, tol: float = 1e-12) -> bool:
    return all(abs(x - y) <= tol for x, y in zip(a.as_tuple(), b.as_tuple()))


def arc_box_by_sampling(a0: float, a1: float, cx: float, cy: float, r: float, n: int = 20000) -> BBox:
    """Independent oracle: bbox of the centre plus densely sampled arc points."""
    xs, ys = [cx], [cy]
    for i in range(n + 1):
        t = math.radians(a0 + (a1 - a0) * i / n)
        xs.append(cx + r * math.sin(t))
        ys.append(cy - r * math.cos(t))
    return BBox(min(xs), min(ys), max(xs), max(ys))


# -- bars -------------------------------------------------------------------------


def test_two_bars_full_plot_no_gap():
    boxes = bar_geometry([[10, 20]], UNIT)
    assert boxes == {CellRef(0, 0): BBox(0, 0.5, 0.5, 1), CellRef(0, 1): BBox(0.5, 0, 1, 1)}


@pytest.mark.parametrize("v", [0.001, 5, 1e9])
def test_lone_bar_fills_plot_height(v):
    (box,) = bar_geometry([[v]], UNIT).values()
    assert (box.y_min, box.y_max) == (0.0, 1.0)


def test_two_series_one_group():
    boxes = bar_geometry([[10], [10]], UNIT)
    assert boxes == {CellRef(0, 0): BBox(0, 0, 0.5, 1), CellRef(1, 0): BBox(0.5, 0, 1, 1)}


def test_render_single_bar_spans_plot():
    layout = Layout(plot=BBox(0.1, 0.1, 0.9, 0.9))
    _, gt = render_chart(DataTable(("c",), ("r",), ((5,),)), "bar", layout)
    box = gt.entries[CellRef(0, 0)]
    assert box.y_min == pytest.approx(0.1) and box.y_max == pytest.approx(0.9)
    # default gap 0.2 leaves 10% of the slot on each side
    assert box.x_min == pytest.approx(0.18) and box.x_max == pytest.approx(0.82)


def test_bar_holes_and_errors():
    boxes = bar_geometry([[1, None], [2, 3]], UNIT)
    assert CellRef(0, 1) not in boxes and len(boxes) == 3
    with pytest.raises(AllZeroValues):
        bar_geometry([[0, 0]], UNIT)
    with pytest.raises(UnrenderableTable):
        bar_geometry([[1, -1]], UNIT)


# -- pies -------------------------------------------------------------------------


QUADRANTS = [BBox(0.5, 0.0, 1.0, 0.5), BBox(0.5, 0.5, 1.0, 1.0), BBox(0.0, 0.5, 0.5, 1.0), BBox(0.0, 0.0, 0.5, 0.5)]


def test_pie_quadrants_exact():
    assert pie_geometry([1, 1, 1, 1], UNIT) == QUADRANTS


def test_pie_full_circle():
    assert pie_geometry([1], UNIT) == [BBox(0, 0, 1, 1)]


def test_pie_halves():
    assert pie_geometry([1, 1], UNIT) == [BBox(0.5, 0.0, 1.0, 1.0), BBox(0.0, 0.0, 0.5, 1.0)]


def test_pie_angles_are_exact():
    angles = pie_angles([1, 2, 3.5, 0.1])
    assert angles[0][0] == 0 and angles[-1][1] == 360
    assert all(a1 == b0 for (_, a1), (b0, _) in zip(angles, angles[1:]))
    assert sum(a1 - a0 for a0, a1 in angles) == Fraction(360)


def test_pie_errors():
    with pytest.raises(ZeroSum):
        pie_angles([0, 0])
    with pytest.raises(UnrenderableTable):
        pie_angles([1, -1])
    with pytest.raises(UnrenderableTable, match="single row or a single column"):
        render_chart(DataTable(("a", "b"), ("x", "y"), ((1, 2), (3, 4))), "pie")


def test_pie_zero_slice_is_degenerate_point():
    boxes = pie_geometry([1, 0, 1], UNIT)
    assert boxes[1].area == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=7))
def test_pie_boxes_match_sampling_oracle(values):
    boxes = pie_geometry(values, UNIT)
    for (a0, a1), box in zip(pie_angles(values), boxes):
        oracle = arc_box_by_sampling(float(a0), float(a1), 0.5, 0.5, 0.5)
        # sampling can only under-reach the true extreme
        assert boxes_close(box, oracle, tol=1e-4)


# -- lines ------------------------------------------------------------------------


def test_line_two_points():
    assert line_geometry([[0, 10]], UNIT) == {CellRef(0, 0): (0.0, 1.0), CellRef(0, 1): (1.0, 0.0)}


def test_line_all_equal_on_midline():
    pts = line_geometry([[5, 5, 5]], UNIT)
    assert {y for _, y in pts.values()} == {0.5}


def test_line_single_point():
    assert line_geometry([[7]], UNIT) == {CellRef(0, 0): (0.0, 0.5)}


def test_line_points_linear_map():
    layout = Layout(plot=BBox(0.1, 0.2, 0.9, 0.6))
    pts = line_geometry([[0, 5, 10], [10, 2.5, 0]], layout)
    assert pts[CellRef(0, 1)] == pytest.approx((0.5, 0.4))
    assert pts[CellRef(1, 1)] == pytest.approx((0.5, 0.5))
    assert pts[CellRef(1, 2)] == pytest.approx((0.9, 0.6))


# -- rendering ----------------------------------------------------------------------


def test_render_is_deterministic():
    t = DataTable.from_rows(["2020", "2021", "2022"], {"A": [1, 5, 3], "B": [2, 2, 4]})
    for kind in ("bar", "line"):
        a = render_chart(t, kind, style_seed=3)
        b = render_chart(t, kind, style_seed=3)
        assert a[0] == b[0] and a[1] == b[1]


def test_render_dimensions_and_groundtruth_json():
    png, gt = render_chart(DataTable(("a", "b", "c"), ("Share",), ((1, 2, 3),)), "pie")
    with Image.open(io.BytesIO(png)) as im:
        assert im.size == (gt.width, gt.height) == (1024, 768)
    assert GroundTruth.from_json(gt.to_json()) == gt


def test_line_groundtruth_has_points():
    _, gt = render_chart(DataTable.from_rows(["x1", "x2"], {"s": [1, 2]}), "line")
    assert all(isinstance(v, tuple) and len(v) == 1 for v in gt.entries.values())


def test_rasterize_full_circle_pie():
    png, gt = render_chart(DataTable(("only",), ("Share",), ((4,),)), "pie")
    cx, cy = Layout().pie_center
    rx, ry = Layout().pie_radii
    assert gt.entries[CellRef(0, 0)] == BBox(cx - rx, cy - ry, cx + rx, cy + ry)
    assert rasterize_check(png, gt)[CellRef(0, 0)] >= 0.98


def test_rasterize_detects_shifted_groundtruth():
    png, gt = render_chart(DataTable.from_rows(["a", "b"], {"s": [30, 60]}), "bar")
    shifted = {
        c: BBox(b.x_min + 0.1, b.y_min, b.x_max + 0.1, b.y_max) for c, b in gt.entries.items()
    }
    bad = GroundTruth(gt.chart_type, shifted, gt.width, gt.height, gt.colors)
    assert all(v >= 0.98 for v in rasterize_check(png, gt).values())
    assert all(v < 0.9 for v in rasterize_check(png, bad).values())


def test_palette_is_distinct_and_not_grey():
    colors = palette(12, seed=5)
    assert len(set(colors)) == 12
    for i, a in enumerate(colors):
        assert max(a) - min(a) >= 48
        for b in colors[i + 1 :]:
            assert max(abs(x - y) for x, y in zip(a, b)) >= 48
    assert palette(12, seed=5) == colors


@pytest.mark.parametrize("kind", ["bar", "pie", "line"])
def test_random_tables_render(kind):
    rng = random.Random(11)
    for i in range(5):
        png, gt = render_chart(random_table(rng, kind), kind, style_seed=i)
        assert gt.entries and png.startswith(b"\x89PNG")
