"""Cell localization: detect data marks, label them, map cited cells to marks."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from PIL import Image, ImageDraw, ImageFont, PngImagePlugin

from . import prompts
from .captioning import show
from .chart2table import VERDICT_SCHEMA, ReflectionVerdict
from .chartgen import GroundTruth
from .core import BBox, CellRef, Claim, DataTable, check_chart_type
from .gateway import Gateway, ImagePart, complete_structured

logger = logging.getLogger(__name__)

MARK_KINDS = ("bar", "slice", "point", "segment")
_KIND_FOR_CHART = {"bar": "bar", "pie": "slice", "line": "point"}

LABEL_PX = 12
HIGHLIGHT = (230, 20, 20)
OUTLINE = (20, 20, 20)

MAPPING_SCHEMA = {
    "type": "object",
    "properties": {
        "assignments": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "cell": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    "mark": {"type": "integer"},
                },
                "required": ["cell", "mark"],
            },
        }
    },
    "required": ["assignments"],
}

BOXES_SCHEMA = {
    "type": "object",
    "properties": {
        "boxes": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        }
    },
    "required": ["boxes"],
}


class DetectorFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class DataMark:
    id: int
    kind: str
    region: BBox
    cell: CellRef | None = None

    def __post_init__(self):
        if self.kind not in MARK_KINDS:
            raise ValueError(f"unknown mark kind {self.kind!r}")
        if not self.region.is_valid:
            raise ValueError(f"mark {self.id} region invalid: {self.region.problems()}")


class Detector:
    """Port for data-mark detectors. ``detect`` returns unordered marks; ids are assigned by :func:`detect_marks`."""

    identity = "detector"

    def detect(self, image: bytes, chart_type: str) -> list[DataMark]:
        raise NotImplementedError


class OracleDetector(Detector):
    """Reads marks straight from a chart's ground-truth sidecar."""

    identity = "oracle"

    def __init__(self, ground_truth: GroundTruth, marker_fraction: float = 0.02):
        self.ground_truth = ground_truth
        self.marker_fraction = marker_fraction

    def detect(self, image: bytes, chart_type: str) -> list[DataMark]:
        gt = self.ground_truth
        if gt.chart_type != chart_type:
            raise DetectorFailure(f"ground truth is for a {gt.chart_type} chart, not {chart_type}")
        kind = _KIND_FOR_CHART[chart_type]
        marks = []
        for cell, region in gt.entries.items():
            box = region if isinstance(region, BBox) else gt.marker_box(region[0], self.marker_fraction)
            if box.area == 0:
                continue  # zero-size slices are not visible
            marks.append(DataMark(0, kind, box, cell))
        return marks


class DetectionsFileDetector(Detector):
    """Adapter for any external detector that writes ``{"marks": [{"kind", "box"}]}``."""

    identity = "external"

    def __init__(self, path: str | Path | None = None, data: dict | None = None):
        if data is None:
            if path is None:
                raise ValueError("need a detections path or parsed data")
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise DetectorFailure(f"cannot read detections {path}: {exc}") from None
        self.data = data

    def detect(self, image: bytes, chart_type: str) -> list[DataMark]:
        marks = []
        for i, item in enumerate(self.data.get("marks", [])):
            try:
                box = BBox.repaired(*item["box"])
                marks.append(DataMark(0, item.get("kind", _KIND_FOR_CHART[chart_type]), box))
            except (KeyError, TypeError, ValueError) as exc:
                raise DetectorFailure(f"detection {i} is malformed: {exc}") from None
        return marks


def detect_marks(image: bytes, chart_type: str, detector: Detector) -> list[DataMark]:
    """Run ``detector`` and number its marks 1..n, left-to-right then top-to-bottom by centroid."""
    check_chart_type(chart_type)
    try:
        raw = detector.detect(image, chart_type)
    except DetectorFailure:
        raise
    except Exception as exc:
        raise DetectorFailure(f"{detector.identity} detector failed: {exc}") from exc
    ordered = sorted(
        raw,
        key=lambda m: (round(m.region.center[0], 9), round(m.region.center[1], 9), m.region.as_tuple(), m.cell or CellRef(-1, -1)),
    )
    return [DataMark(i, m.kind, m.region, m.cell) for i, m in enumerate(ordered, 1)]


# -- drawing -----------------------------------------------------------------------


def _open(image: bytes) -> Image.Image:
    return Image.open(io.BytesIO(image)).convert("RGB")


def _png(im: Image.Image, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    info = None
    if metadata:
        info = PngImagePlugin.PngInfo()
        for k, v in metadata.items():
            info.add_text(k, v)
    im.save(buf, format="PNG", pnginfo=info, compress_level=1)
    return buf.getvalue()


def _pixels(box: BBox, w: int, h: int) -> tuple[float, float, float, float]:
    return box.x_min * w, box.y_min * h, max(box.x_min * w, box.x_max * w - 1), max(box.y_min * h, box.y_max * h - 1)


def annotate_marks(image: bytes, marks: Sequence[DataMark]) -> bytes:
    """Outline every mark and stamp its id on a white disc at the centroid."""
    if not marks:
        raise ValueError("annotate_marks needs at least one mark")
    im = _open(image)
    w, h = im.size
    draw = ImageDraw.Draw(im)
    font = ImageFont.load_default(size=LABEL_PX)
    for m in marks:
        draw.rectangle(_pixels(m.region, w, h), outline=OUTLINE, width=2)
    for m in marks:
        cx, cy = m.region.center[0] * w, m.region.center[1] * h
        r = LABEL_PX * 0.8
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=(255, 255, 255), outline=OUTLINE, width=1)
        draw.text((cx, cy), str(m.id), fill=(0, 0, 0), font=font, anchor="mm")
    return _png(im)


def overlay_boxes(image: bytes, boxes: Sequence[BBox], metadata: dict | None = None) -> bytes:
    """Outline ``boxes`` in red; ``metadata`` is stored as PNG text chunks."""
    im = _open(image)
    w, h = im.size
    draw = ImageDraw.Draw(im)
    for box in boxes:
        draw.rectangle(_pixels(box, w, h), outline=HIGHLIGHT, width=3)
    return _png(im, metadata)


def read_png_text(image: bytes) -> dict[str, str]:
    with Image.open(io.BytesIO(image)) as im:
        return dict(getattr(im, "text", {}) or {})


# -- backend-facing steps ----------------------------------------------------------


def _cell_lines(cells: Sequence[CellRef], table: DataTable) -> str:
    return "\n".join(
        f"- cell [{c.row}, {c.col}]: row {prompts.quoted(table.row_headers[c.row])}, "
        f"column {prompts.quoted(table.column_headers[c.col])}, value {show(table.value(c))}"
        for c in cells
    )


@dataclass
class Mapping:
    assignments: list[tuple[CellRef, int]]
    unmapped: list[CellRef]


def oracle_mapping(marks: Sequence[DataMark], cited_cells: Sequence[CellRef]) -> Mapping:
    by_cell = {m.cell: m.id for m in marks if m.cell is not None}
    pairs = [(c, by_cell[c]) for c in cited_cells if c in by_cell]
    return Mapping(pairs, [c for c in cited_cells if c not in by_cell])


def map_cells_to_marks(
    annotated_image: bytes,
    marks: Sequence[DataMark],
    cited_cells: Sequence[CellRef],
    table: DataTable,
    claim: Claim,
    gateway: Gateway,
    feedback: ReflectionVerdict | None = None,
) -> Mapping:
    """Ask the backend which numbered mark shows each cited cell.

    Assignments naming unknown marks or uncited cells are dropped; a cell
    keeps its first valid assignment.
    """
    if not gateway.vision:
        raise ValueError("mark mapping needs a vision-capable backend")
    ids = [m.id for m in marks]
    system, user = prompts.render(
        "som.map", mark_ids=", ".join(map(str, ids)), claim=claim.text, cells=_cell_lines(cited_cells, table)
    )
    parts: list = [user, ImagePart(annotated_image)]
    if feedback is not None:
        notes = "\n".join(f"- {d}" for d in feedback.discrepancies) or "- the highlighted regions were judged wrong"
        parts.append(f"A previous attempt was rejected by a reviewer:\n{notes}\nCorrect the assignments.")
    value = complete_structured(gateway, gateway.prompt("localize", system, parts), MAPPING_SCHEMA)
    known, cited = set(ids), set(cited_cells)
    assigned: dict[CellRef, int] = {}
    for item in value["assignments"]:
        cell = CellRef(*item["cell"])
        if cell in cited and item["mark"] in known and cell not in assigned:
            assigned[cell] = item["mark"]
    pairs = [(c, assigned[c]) for c in cited_cells if c in assigned]
    return Mapping(pairs, [c for c in cited_cells if c not in assigned])


def verify_localization(image: bytes, boxes: Sequence[BBox], claim: Claim, gateway: Gateway, cells_text: str = "") -> ReflectionVerdict:
    if not boxes:
        raise ValueError("verification needs at least one box")
    system, user = prompts.render("som.verify", claim=claim.text, cells=cells_text or "- (not listed)")
    prompt = gateway.prompt("verify", system, [user, ImagePart(overlay_boxes(image, boxes))])
    value = complete_structured(gateway, prompt, VERDICT_SCHEMA)
    return ReflectionVerdict(bool(value["consistent"]), tuple(value["discrepancies"]))


@dataclass
class LocalizationResult:
    assignments: list[tuple[CellRef, int, BBox]]
    unmapped: list[CellRef]
    verified: bool
    mapping_calls: int = 0
    transcripts: list[str] = field(default_factory=list)

    @property
    def boxes(self) -> list[BBox]:
        return [b for _, _, b in self.assignments]


def localize_claim(
    image: bytes,
    annotated_image: bytes,
    marks: Sequence[DataMark],
    cited_cells: Sequence[CellRef],
    table: DataTable,
    claim: Claim,
    gateway: Gateway,
    use_oracle: bool = False,
    verify: bool = True,
) -> LocalizationResult:
    """Map cited cells to marks, emit their boxes, verify once and retry once on rejection."""
    region = {m.id: m.region for m in marks}
    cells_text = _cell_lines(cited_cells, table)
    with gateway.recording() as keys:
        calls = 0
        feedback = None
        verified = False
        for attempt in range(2):
            if use_oracle:
                mapping = oracle_mapping(marks, cited_cells)
            else:
                mapping = map_cells_to_marks(annotated_image, marks, cited_cells, table, claim, gateway, feedback)
            calls += 1
            boxes = [region[m] for _, m in mapping.assignments]
            if not boxes or not verify:
                break
            verdict = verify_localization(image, boxes, claim, gateway, cells_text)
            if verdict.consistent:
                verified = True
                break
            feedback = verdict
    return LocalizationResult(
        [(c, m, region[m]) for c, m in mapping.assignments], mapping.unmapped, verified, calls, list(keys)
    )


def direct_bbox_baseline(image: bytes, claim: Claim, gateway: Gateway, question: str = "") -> list[BBox]:
    """Zero-shot baseline: ask the model for normalized boxes directly.

    Inverted pairs are swapped and coordinates clamped to [0, 1]; boxes that
    collapse to zero area after clamping are dropped.
    """
    if not gateway.vision:
        raise ValueError("the direct-box baseline needs a vision-capable backend")
    system, user = prompts.render("baseline.bbox", question=question or "(not given)", claim=claim.text)
    value = complete_structured(gateway, gateway.prompt("baseline", system, [user, ImagePart(image)]), BOXES_SCHEMA)
    out = []
    for raw in value["boxes"]:
        box = BBox.repaired(*raw)
        if box.area > 0:
            out.append(box)
    return out
