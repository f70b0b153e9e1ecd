from __future__ import annotations

import io
import json

import numpy as np
import pytest
from PIL import Image

from chartattrib.backends import scripted_mock
from chartattrib.chartgen import GroundTruth, render_chart
from chartattrib.core import BBox, CellRef, Claim, DataTable
from chartattrib.gateway import Gateway
from chartattrib.localization import (
    LABEL_PX,
    DataMark,
    DetectionsFileDetector,
    DetectorFailure,
    OracleDetector,
    annotate_marks,
    detect_marks,
    direct_bbox_baseline,
    localize_claim,
    map_cells_to_marks,
    oracle_mapping,
    overlay_boxes,
    read_png_text,
    verify_localization,
)

from .conftest import mock_gateway, png

CLAIM = Claim(0, "B is 20")
TWO_BARS = DataTable.from_rows(["A", "B"], {"Sales": [10, 20]})
OK = {"consistent": True, "discrepancies": []}
BAD = {"consistent": False, "discrepancies": ["wrong bar"]}


@pytest.fixture(scope="module")
def bar_chart():
    return render_chart(TWO_BARS, "bar")


def _pixels(image: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(image)).convert("RGB")).astype(int)


# -- detection ---------------------------------------------------------------------------


def test_oracle_detector_on_two_bars(bar_chart):
    image, gt = bar_chart
    marks = detect_marks(image, "bar", OracleDetector(gt))
    assert [m.id for m in marks] == [1, 2]
    assert [m.region for m in marks] == [gt.entries[CellRef(0, 0)], gt.entries[CellRef(0, 1)]]
    assert {m.kind for m in marks} == {"bar"}


def test_empty_chart_has_no_marks(blank_png):
    gt = GroundTruth("bar", {}, 32, 24)
    assert detect_marks(blank_png, "bar", OracleDetector(gt)) == []


def test_four_slice_pie():
    image, gt = render_chart(DataTable(("a", "b", "c", "d"), ("Share",), ((1, 1, 1, 1),)), "pie")
    marks = detect_marks(image, "pie", OracleDetector(gt))
    assert sorted(m.cell for m in marks) == [CellRef(0, c) for c in range(4)]
    assert {m.kind for m in marks} == {"slice"}


def test_line_marks_are_marker_squares():
    image, gt = render_chart(DataTable.from_rows(["x", "y", "z"], {"s": [1, 3, 2]}), "line")
    marks = detect_marks(image, "line", OracleDetector(gt))
    for m in marks:
        (x, y), = gt.entries[m.cell]
        assert m.region.contains_point(x, y) and m.kind == "point"


def test_ids_ordered_left_to_right():
    gt = GroundTruth(
        "bar",
        {CellRef(0, 0): BBox(0.6, 0.1, 0.7, 0.9), CellRef(0, 1): BBox(0.1, 0.5, 0.2, 0.9)},
        100, 100,
    )
    marks = detect_marks(png(), "bar", OracleDetector(gt))
    assert [(m.id, m.cell) for m in marks] == [(1, CellRef(0, 1)), (2, CellRef(0, 0))]


def test_oracle_detector_rejects_wrong_chart_type(bar_chart):
    image, gt = bar_chart
    with pytest.raises(DetectorFailure):
        detect_marks(image, "pie", OracleDetector(gt))


def test_detections_file_adapter(tmp_path, blank_png):
    path = tmp_path / "det.json"
    path.write_text(json.dumps({"marks": [{"kind": "bar", "box": [0.5, 0.2, 0.3, 0.9]}, {"box": [0.0, 0.0, 0.1, 0.1]}]}))
    marks = detect_marks(blank_png, "bar", DetectionsFileDetector(path))
    assert [m.region for m in marks] == [BBox(0.0, 0.0, 0.1, 0.1), BBox(0.3, 0.2, 0.5, 0.9)]
    assert all(m.cell is None for m in marks)
    with pytest.raises(DetectorFailure):
        detect_marks(blank_png, "bar", DetectionsFileDetector(data={"marks": [{"box": [1, 2]}]}))


def test_datamark_validation():
    with pytest.raises(ValueError):
        DataMark(1, "blob", BBox(0, 0, 1, 1))
    with pytest.raises(ValueError):
        DataMark(1, "bar", BBox(0.5, 0, 0.1, 1))


# -- drawing -------------------------------------------------------------------------------


def test_annotation_changes_only_near_the_mark():
    base = png(size=(200, 100))
    box = BBox(0.3, 0.2, 0.5, 0.8)
    out = annotate_marks(base, [DataMark(1, "bar", box)])
    diff = np.any(_pixels(base) != _pixels(out), axis=2)
    ys, xs = np.nonzero(diff)
    assert len(xs) > 0
    margin = LABEL_PX + 2
    assert xs.min() >= 0.3 * 200 - margin and xs.max() <= 0.5 * 200 + margin
    assert ys.min() >= 0.2 * 100 - margin and ys.max() <= 0.8 * 100 + margin
    assert Image.open(io.BytesIO(out)).size == (200, 100)


def test_annotation_needs_marks(blank_png):
    with pytest.raises(ValueError):
        annotate_marks(blank_png, [])


def test_overlay_metadata_round_trip(blank_png):
    out = overlay_boxes(blank_png, [BBox(0.1, 0.1, 0.5, 0.5)], {"sample_id": "s7", "note": "x"})
    assert read_png_text(out) == {"sample_id": "s7", "note": "x"}


# -- mapping and verification ------------------------------------------------------------------


@pytest.fixture
def two_marks(bar_chart):
    image, gt = bar_chart
    marks = detect_marks(image, "bar", OracleDetector(gt))
    return image, annotate_marks(image, marks), marks


def test_mapping_single_assignment(two_marks):
    _, annotated, marks = two_marks
    gw = mock_gateway([("TASK: map-cells-to-marks", {"assignments": [{"cell": [0, 1], "mark": 2}]})])
    mapping = map_cells_to_marks(annotated, marks, [CellRef(0, 1)], TWO_BARS, CLAIM, gw)
    assert mapping.assignments == [(CellRef(0, 1), 2)] and mapping.unmapped == []


def test_mapping_drops_unknown_mark_and_uncited_cell(two_marks):
    _, annotated, marks = two_marks
    reply = {"assignments": [{"cell": [0, 1], "mark": 9}, {"cell": [0, 0], "mark": 1}]}
    gw = mock_gateway([("TASK: map-cells-to-marks", reply)])
    mapping = map_cells_to_marks(annotated, marks, [CellRef(0, 1)], TWO_BARS, CLAIM, gw)
    assert mapping.assignments == [] and mapping.unmapped == [CellRef(0, 1)]


def test_oracle_mapping_is_perfect(two_marks):
    _, _, marks = two_marks
    mapping = oracle_mapping(marks, [CellRef(0, 1), CellRef(0, 0), CellRef(3, 3)])
    assert mapping.assignments == [(CellRef(0, 1), 2), (CellRef(0, 0), 1)]
    assert mapping.unmapped == [CellRef(3, 3)]


def test_verify_consistent(two_marks):
    image, _, marks = two_marks
    gw = mock_gateway([("TASK: verify-localization", OK)])
    assert verify_localization(image, [marks[1].region], CLAIM, gw).consistent


def _localize(two_marks, script):
    image, annotated, marks = two_marks
    backend = scripted_mock(script)
    res = localize_claim(image, annotated, marks, [CellRef(0, 1)], TWO_BARS, CLAIM, Gateway(backend, parallelism=1))
    return res, backend


def test_retry_after_rejection(two_marks):
    wrong = {"assignments": [{"cell": [0, 1], "mark": 1}]}
    right = {"assignments": [{"cell": [0, 1], "mark": 2}]}
    res, backend = _localize(
        two_marks,
        [
            ("TASK: map-cells-to-marks", wrong),
            ("TASK: verify-localization", BAD),
            ("TASK: map-cells-to-marks", right),
            ("TASK: verify-localization", OK),
        ],
    )
    assert res.verified and res.mapping_calls == 2
    assert res.boxes == [two_marks[2][1].region]
    assert "- wrong bar" in backend.calls[2]


def test_rejected_twice_still_returns(two_marks):
    m = {"assignments": [{"cell": [0, 1], "mark": 1}]}
    res, _ = _localize(
        two_marks,
        [
            ("TASK: map-cells-to-marks", m),
            ("TASK: verify-localization", BAD),
            ("TASK: map-cells-to-marks", m),
            ("TASK: verify-localization", BAD),
        ],
    )
    assert not res.verified and res.mapping_calls == 2 and len(res.boxes) == 1


def test_nothing_mapped_skips_verification(two_marks):
    res, backend = _localize(two_marks, [("TASK: map-cells-to-marks", {"assignments": []})])
    assert res.boxes == [] and res.unmapped == [CellRef(0, 1)] and not res.verified
    assert len(backend.calls) == 1


def test_oracle_path_makes_no_mapping_call(two_marks):
    image, annotated, marks = two_marks
    backend = scripted_mock([("TASK: verify-localization", OK)])
    res = localize_claim(image, annotated, marks, [CellRef(0, 1)], TWO_BARS, CLAIM, Gateway(backend), use_oracle=True)
    assert res.boxes == [marks[1].region] and res.verified
    assert all("TASK: map-cells-to-marks" not in c for c in backend.calls)


# -- direct-box baseline ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "boxes, expected",
    [
        ([[0.1, 0.1, 0.3, 0.9]], [BBox(0.1, 0.1, 0.3, 0.9)]),
        ([[0.5, 0.5, 0.2, 0.9]], [BBox(0.2, 0.5, 0.5, 0.9)]),
        ([], []),
        ([[1.2, 0.0, 1.5, 0.5]], []),  # clamps to zero width
    ],
)
def test_direct_bbox_baseline(blank_png, boxes, expected):
    gw = mock_gateway([("TASK: direct-bbox", {"boxes": boxes})])
    assert direct_bbox_baseline(blank_png, CLAIM, gw) == expected


def test_baseline_needs_vision(blank_png):
    with pytest.raises(ValueError):
        direct_bbox_baseline(blank_png, CLAIM, mock_gateway([], vision=False))
