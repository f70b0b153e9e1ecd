"""Deterministic bar/pie/line rendering with analytic ground-truth regions.

All geometry is computed in normalized image coordinates (origin top-left).
Marks are painted by pixel-centre sampling, so a mark's pixels are exactly
those whose centres fall inside its analytic region; text and axes are drawn
only in neutral greys, never in a mark colour.
"""

from __future__ import annotations

import io
import json
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .core import BBox, CellRef, DataTable, check_chart_type, format_number, is_numeric

Point = tuple[float, float]

MIN_CHANNEL_DISTANCE = 48
AXIS_COLOR = (40, 40, 40)
TEXT_COLOR = (20, 20, 20)
LINE_COLOR = (110, 110, 110)


class UnrenderableTable(ValueError):
    pass


class AllZeroValues(UnrenderableTable):
    pass


class ZeroSum(UnrenderableTable):
    pass


class ColorCollision(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    width: int = 1024
    height: int = 768
    plot: BBox = BBox(0.1, 0.12, 0.95, 0.84)
    bar_gap: float = 0.2
    pie_center: Point = (0.42, 0.5)
    pie_radius: float = 0.4  # fraction of min(width, height)
    marker_fraction: float = 0.02  # line-point square side, fraction of min(width, height)

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16 pixels")
        if not self.plot.is_valid:
            raise ValueError(f"plot rect invalid: {self.plot.problems()}")
        if not 0.0 <= self.bar_gap < 1.0:
            raise ValueError("bar_gap must be in [0, 1)")
        if self.pie_radius <= 0:
            raise ValueError("pie_radius must be positive")

    @property
    def pie_radii(self) -> tuple[float, float]:
        """Pie radius in normalized x and y units."""
        px = self.pie_radius * min(self.width, self.height)
        return px / self.width, px / self.height

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "plot": self.plot.to_json(),
            "bar_gap": self.bar_gap,
            "pie_center": list(self.pie_center),
            "pie_radius": self.pie_radius,
            "marker_fraction": self.marker_fraction,
        }

    @classmethod
    def from_json(cls, data: dict) -> Layout:
        kw = dict(data)
        if "plot" in kw:
            kw["plot"] = BBox.from_json(kw["plot"])
        if "pie_center" in kw:
            kw["pie_center"] = tuple(kw["pie_center"])
        return cls(**kw)


@dataclass(frozen=True)
class GroundTruth:
    """Per-cell regions of a rendered chart.

    ``entries`` maps each rendered cell to a :class:`BBox` (bar, pie) or a
    tuple of points (line). ``colors`` records each mark's fill colour.
    """

    chart_type: str
    entries: dict
    width: int
    height: int
    colors: dict = field(default_factory=dict)
    sample_id: str | None = None
    targets: tuple[CellRef, ...] = ()

    def regions(self, cells: Sequence[CellRef] | None = None) -> list:
        cells = self.target_cells() if cells is None else cells
        return [self.entries[c] for c in cells if c in self.entries]

    def target_cells(self) -> list[CellRef]:
        return list(self.targets) if self.targets else sorted(self.entries)

    def marker_box(self, point: Point, fraction: float = 0.02) -> BBox:
        side = fraction * min(self.width, self.height)
        hx, hy = side / 2 / self.width, side / 2 / self.height
        x, y = point
        return BBox.repaired(x - hx, y - hy, x + hx, y + hy)

    def to_json(self) -> dict:
        out: dict = {}
        if self.sample_id is not None:
            out["sample_id"] = self.sample_id
        out["chart_type"] = self.chart_type
        out["width"] = self.width
        out["height"] = self.height
        entries = []
        for cell in sorted(self.entries):
            region = self.entries[cell]
            item: dict = {"cell": cell.to_json()}
            if isinstance(region, BBox):
                item["box"] = region.to_json()
            else:
                item["points"] = [list(p) for p in region]
            if cell in self.colors:
                item["color"] = self.colors[cell]
            entries.append(item)
        out["entries"] = entries
        if self.targets:
            out["targets"] = [c.to_json() for c in self.targets]
        return out

    @classmethod
    def from_json(cls, data: dict) -> GroundTruth:
        entries, colors = {}, {}
        for item in data["entries"]:
            cell = CellRef.from_json(item["cell"])
            if "box" in item:
                entries[cell] = BBox.from_json(item["box"])
            else:
                entries[cell] = tuple((float(x), float(y)) for x, y in item["points"])
            if "color" in item:
                colors[cell] = item["color"]
        return cls(
            chart_type=check_chart_type(data["chart_type"]),
            entries=entries,
            width=int(data.get("width", 0)),
            height=int(data.get("height", 0)),
            colors=colors,
            sample_id=data.get("sample_id"),
            targets=tuple(CellRef.from_json(c) for c in data.get("targets", [])),
        )


# -- geometry -------------------------------------------------------------------


def _numeric_grid(table: DataTable) -> list[list[float | None]]:
    return [[float(v) if is_numeric(v) else None for v in row] for row in table.cells]


def bar_geometry(values: Sequence[Sequence[float | None]], layout: Layout) -> dict[CellRef, BBox]:
    """Grouped vertical bars: one group per column, one bar per row within a group.

    ``values[r][c]`` is series ``r`` in group ``c``; ``None`` leaves a hole.
    Heights are normalized by the global maximum.
    """
    present = [v for row in values for v in row if v is not None]
    if any(v < 0 for v in present):
        raise UnrenderableTable("bar charts need non-negative values")
    if not present or max(present) <= 0:
        raise AllZeroValues("bar chart needs at least one positive value")
    top = max(present)
    n_series, n_groups = len(values), len(values[0])
    p = layout.plot
    pw, ph = p.x_max - p.x_min, p.y_max - p.y_min
    slot = pw / n_groups
    bar_w = slot * (1 - layout.bar_gap) / n_series
    out = {}
    for c in range(n_groups):
        cluster_left = p.x_min + c * slot + slot * layout.bar_gap / 2
        for r in range(n_series):
            v = values[r][c]
            if v is None:
                continue
            x0 = cluster_left + r * bar_w
            out[CellRef(r, c)] = BBox(x0, p.y_max - ph * v / top, x0 + bar_w, p.y_max)
    return out


def _exact_sin_cos(deg: Fraction) -> tuple[float, float]:
    d = deg % 360
    exact = {0: (0.0, 1.0), 90: (1.0, 0.0), 180: (0.0, -1.0), 270: (-1.0, 0.0)}
    if d in exact:
        return exact[int(d)]
    rad = math.radians(float(d))
    return math.sin(rad), math.cos(rad)


def pie_angles(values: Sequence[float]) -> list[tuple[Fraction, Fraction]]:
    """Angular interval (degrees, clockwise from 12 o'clock) of each slice.

    Exact rational bookkeeping: the final boundary is exactly 360.
    """
    if any(v < 0 for v in values):
        raise UnrenderableTable("pie charts need non-negative values")
    fracs = [Fraction(v) for v in values]
    total = sum(fracs)
    if total <= 0:
        raise ZeroSum("pie values must sum to a positive number")
    bounds = [Fraction(0)]
    acc = Fraction(0)
    for f in fracs[:-1]:
        acc += f
        bounds.append(360 * acc / total)
    bounds.append(Fraction(360))
    return list(zip(bounds[:-1], bounds[1:]))


def pie_geometry(values: Sequence[float], layout: Layout) -> list[BBox]:
    """Tight bounding box of each slice, slices clockwise from 12 o'clock."""
    cx, cy = layout.pie_center
    rx, ry = layout.pie_radii
    boxes = []
    for a0, a1 in pie_angles(values):
        if a1 == a0:
            boxes.append(BBox(cx, cy, cx, cy))
            continue
        angles = [a0, a1] + [Fraction(q) for q in (0, 90, 180, 270, 360) if a0 <= q <= a1]
        xs, ys = [cx], [cy]
        for a in angles:
            s, c = _exact_sin_cos(a)
            xs.append(cx + rx * s)
            ys.append(cy - ry * c)
        boxes.append(BBox(min(xs), min(ys), max(xs), max(ys)))
    return boxes


def line_geometry(values: Sequence[Sequence[float | None]], layout: Layout) -> dict[CellRef, Point]:
    p = layout.plot
    pw, ph = p.x_max - p.x_min, p.y_max - p.y_min
    present = [v for row in values for v in row if v is not None]
    out: dict[CellRef, Point] = {}
    if not present:
        return out
    lo, hi = min(present), max(present)
    n = len(values[0])
    for r, row in enumerate(values):
        for c, v in enumerate(row):
            if v is None:
                continue
            x = p.x_min + (pw * c / (n - 1) if n > 1 else 0.0)
            y = p.y_min + (ph / 2 if hi == lo else ph * (hi - v) / (hi - lo))
            out[CellRef(r, c)] = (x, y)
    return out


def pie_series(table: DataTable) -> tuple[list[CellRef], list[float]]:
    """Cells and values a pie is drawn from: the single row, or the single column."""
    if table.n_rows == 1:
        refs = [CellRef(0, c) for c in range(table.n_cols)]
    elif table.n_cols == 1:
        refs = [CellRef(r, 0) for r in range(table.n_rows)]
    else:
        raise UnrenderableTable("pie charts need a single row or a single column")
    refs = [r for r in refs if is_numeric(table.value(r))]
    if not refs:
        raise UnrenderableTable("pie chart has no numeric cells")
    return refs, [float(table.value(r)) for r in refs]


# -- palette ----------------------------------------------------------------------


def palette(n: int, seed: int) -> list[tuple[int, int, int]]:
    """``n`` saturated colours, pairwise Chebyshev distance >= 48, none grey."""
    rng = random.Random(seed)
    colors: list[tuple[int, int, int]] = []
    attempts = 0
    while len(colors) < n:
        attempts += 1
        if attempts > 200_000:
            raise ColorCollision(f"could not find {n} distinct colours")
        c = (rng.randrange(0, 256), rng.randrange(0, 256), rng.randrange(0, 256))
        if max(c) - min(c) < MIN_CHANNEL_DISTANCE or max(c) > 235 and min(c) > 200:
            continue
        if all(max(abs(a - b) for a, b in zip(c, o)) >= MIN_CHANNEL_DISTANCE for o in colors):
            colors.append(c)
    return colors


def hex_color(c: tuple[int, int, int]) -> str:
    return "#{:02x}{:02x}{:02x}".format(*c)


def parse_hex(s: str) -> tuple[int, int, int]:
    s = s.lstrip("#")
    return int(s[0:2], 16), int(s[2:4], 16), int(s[4:6], 16)


# -- rendering ----------------------------------------------------------------------


@lru_cache(maxsize=4)
def _font(size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.load_default(size=size)


def _pixel_span(lo: float, hi: float, n: int) -> slice:
    """Pixels whose centres (i + 0.5) / n lie in [lo, hi]."""
    start = max(0, math.ceil(lo * n - 0.5))
    stop = min(n, math.floor(hi * n - 0.5) + 1)
    return slice(start, max(start, stop))


def _paint_box(arr: np.ndarray, box: BBox, color) -> None:
    h, w = arr.shape[:2]
    arr[_pixel_span(box.y_min, box.y_max, h), _pixel_span(box.x_min, box.x_max, w)] = color


def _label(draw: ImageDraw.ImageDraw, xy: tuple[float, float], text: str, size: int = 13, anchor: str = "mm") -> None:
    draw.text(xy, text, fill=TEXT_COLOR, font=_font(size), anchor=anchor)


def _short(v: float) -> str:
    return format_number(int(v) if float(v).is_integer() else round(v, 2))


def render_chart(
    table: DataTable, chart_type: str, layout: Layout | None = None, style_seed: int = 0
) -> tuple[bytes, GroundTruth]:
    """Render ``table`` as PNG bytes plus its per-cell ground truth."""
    layout = layout or Layout()
    check_chart_type(chart_type)
    W, H = layout.width, layout.height
    image = Image.new("RGB", (W, H), (255, 255, 255))
    draw = ImageDraw.Draw(image)
    p = layout.plot
    px = lambda x: x * W  # noqa: E731
    py = lambda y: y * H  # noqa: E731

    if chart_type == "pie":
        refs, values = pie_series(table)
        angles = pie_angles(values)
        boxes = pie_geometry(values, layout)
        colors = palette(len(refs), style_seed)
        cx, cy = layout.pie_center
        rx, ry = layout.pie_radii
        for ref, (a0, a1) in zip(refs, angles):
            if a1 == a0:
                continue
            mid = (a0 + a1) / 2
            s, c = _exact_sin_cos(mid)
            name = table.row_headers[ref.row] if table.n_cols == 1 else table.column_headers[ref.col]
            _label(draw, (px(cx + 1.16 * rx * s), py(cy - 1.16 * ry * c)), f"{name}: {_short(table.value(ref))}")
        arr = np.asarray(image).copy()
        yy, xx = np.mgrid[0:H, 0:W]
        dx = (xx + 0.5) - cx * W
        dy = (yy + 0.5) - cy * H
        radius_px = layout.pie_radius * min(W, H)
        inside = dx * dx + dy * dy <= radius_px * radius_px
        theta = np.degrees(np.arctan2(dx, -dy)) % 360.0
        bounds = np.array([float(a0) for a0, _ in angles])
        which = np.searchsorted(bounds, theta, side="right") - 1
        for i, (a0, a1) in enumerate(angles):
            if a1 == a0:
                continue
            arr[inside & (which == i)] = colors[i]
        entries = dict(zip(refs, boxes))
        color_map = {ref: hex_color(col) for ref, col in zip(refs, colors)}
        image = Image.fromarray(arr)
    else:
        grid = _numeric_grid(table)
        if not any(v is not None for row in grid for v in row):
            raise UnrenderableTable("table has no numeric cells")
        # axes
        draw.line([(px(p.x_min) - 1, py(p.y_max) + 1), (px(p.x_max), py(p.y_max) + 1)], fill=AXIS_COLOR, width=2)
        draw.line([(px(p.x_min) - 2, py(p.y_min)), (px(p.x_min) - 2, py(p.y_max) + 1)], fill=AXIS_COLOR, width=2)
        if table.n_rows == 1:
            _label(draw, (px(p.x_min), py(p.y_min) - 40), table.row_headers[0], size=15, anchor="lm")
        if chart_type == "bar":
            entries = bar_geometry(grid, layout)
            slot = (p.x_max - p.x_min) / table.n_cols
            for c, header in enumerate(table.column_headers):
                _label(draw, (px(p.x_min + (c + 0.5) * slot), py(p.y_max) + 30), header, size=14)
            for ref, box in entries.items():
                bx = px((box.x_min + box.x_max) / 2)
                _label(draw, (bx, py(box.y_min) - 10), _short(table.value(ref)), size=12)
                if table.n_rows > 1:
                    _label(draw, (bx, py(p.y_max) + 12), table.row_headers[ref.row], size=11)
        else:
            points = line_geometry(grid, layout)
            entries = {ref: (pt,) for ref, pt in points.items()}
            n = table.n_cols
            for c, header in enumerate(table.column_headers):
                x = p.x_min + ((p.x_max - p.x_min) * c / (n - 1) if n > 1 else 0.0)
                _label(draw, (px(x), py(p.y_max) + 20), header, size=14)
            for r in range(table.n_rows):
                row_pts = [points[CellRef(r, c)] for c in range(n) if CellRef(r, c) in points]
                if len(row_pts) > 1:
                    draw.line([(px(x), py(y)) for x, y in row_pts], fill=LINE_COLOR, width=3)
                if row_pts:
                    lx, ly = row_pts[-1]
                    _label(draw, (px(lx) + 14, py(ly)), table.row_headers[r], size=12, anchor="lm")
            for ref, (x, y) in points.items():
                _label(draw, (px(x), py(y) - 18), _short(table.value(ref)), size=12)
        colors = palette(len(entries), style_seed)
        order = sorted(entries)
        color_map = {ref: hex_color(col) for ref, col in zip(order, colors)}
        arr = np.asarray(image).copy()
        gt_tmp = GroundTruth(chart_type, entries, W, H)
        for ref, col in zip(order, colors):
            region = entries[ref]
            box = region if isinstance(region, BBox) else gt_tmp.marker_box(region[0], layout.marker_fraction)
            _paint_box(arr, box, col)
        image = Image.fromarray(arr)

    buf = io.BytesIO()
    image.save(buf, format="PNG", compress_level=1)
    gt = GroundTruth(chart_type, dict(sorted(entries.items())), W, H, colors=color_map)
    return buf.getvalue(), gt


def rasterize_check(image: bytes | Image.Image, ground_truth: GroundTruth, marker_fraction: float = 0.02) -> dict[CellRef, float]:
    """IoU between each mark's painted-pixel bbox and its ground-truth region.

    Line points are compared through their square marker region; markers of
    coincident points may overlap, so line charts are not expected to reach
    the bar/pie tolerance.
    """
    from .evaluation import iou

    if not isinstance(image, Image.Image):
        image = Image.open(io.BytesIO(image))
    arr = np.asarray(image.convert("RGB")).astype(np.uint32)
    H, W = arr.shape[:2]
    packed = (arr[..., 0] << 16) | (arr[..., 1] << 8) | arr[..., 2]
    seen: dict[str, CellRef] = {}
    for cell, col in ground_truth.colors.items():
        if col in seen:
            raise ColorCollision(f"cells {seen[col].to_json()} and {cell.to_json()} share colour {col}")
        seen[col] = cell
    out = {}
    for cell, region in ground_truth.entries.items():
        if cell not in ground_truth.colors:
            continue
        r, g, b = parse_hex(ground_truth.colors[cell])
        mask = packed == ((r << 16) | (g << 8) | b)
        box = region if isinstance(region, BBox) else ground_truth.marker_box(region[0], marker_fraction)
        if not mask.any():
            out[cell] = 0.0
            continue
        ys, xs = np.nonzero(mask)
        pixel_box = BBox(xs.min() / W, ys.min() / H, (xs.max() + 1) / W, (ys.max() + 1) / H)
        out[cell] = iou(pixel_box, box)
    return out


# -- random tables ------------------------------------------------------------------

_SERIES = ["North", "South", "East", "West", "Online", "Retail", "Alpha", "Beta", "Gamma"]
_CATEGORIES = ["Food", "Rent", "Travel", "Health", "Tech", "Energy", "Media", "Sports", "Books"]


def random_table(rng: random.Random, chart_type: str) -> DataTable:
    """A small random table that renders cleanly as ``chart_type``."""
    check_chart_type(chart_type)
    if chart_type == "pie":
        n = rng.randint(2, 6)
        cols = rng.sample(_CATEGORIES, n)
        return DataTable(tuple(cols), ("Share",), (tuple(rng.randint(3, 10) for _ in cols),))
    if chart_type == "bar":
        n_rows, n_cols = rng.randint(1, 3), rng.randint(1, 4)
        lo = 20
    else:
        n_rows, n_cols = rng.randint(1, 3), rng.randint(2, 6)
        lo = 0
    start = rng.randint(2000, 2015)
    cols = tuple(str(start + i) for i in range(n_cols))
    rows = tuple(rng.sample(_SERIES, n_rows))
    cells = tuple(tuple(rng.randint(lo, 100) for _ in cols) for _ in rows)
    return DataTable(cols, rows, cells)


def dumps_groundtruth(gt: GroundTruth) -> str:
    return json.dumps(gt.to_json(), indent=2)
