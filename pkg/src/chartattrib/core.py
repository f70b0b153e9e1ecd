"""Shared domain types and their canonical JSON / HTML forms."""

from __future__ import annotations

import html
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal
from html.parser import HTMLParser
from typing import Any, Iterable, Sequence, Union

CellValue = Union[str, int, float]

CHART_TYPES = ("bar", "pie", "line")

_NUMBER_RE = re.compile(r"^[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?$|^[+-]?\.\d+$")


class MalformedHtml(ValueError):
    pass


class RaggedRows(ValueError):
    pass


def check_chart_type(kind: str) -> str:
    if kind not in CHART_TYPES:
        raise ValueError(f"unknown chart type {kind!r}; expected one of {CHART_TYPES}")
    return kind


def parse_number(text: str) -> int | float | None:
    """Parse ``text`` as a finite decimal, or return None.

    Thousands separators are accepted only in well-formed groups ("1,234").
    Integers beyond 2**53 come back as floats so they compare equal to the
    float they were printed from.
    """
    s = text.strip()
    if not _NUMBER_RE.match(s):
        return None
    s = s.replace(",", "")
    if "." not in s:
        n = int(s)
        return n if abs(n) < 2**53 else float(n)
    value = float(s)
    return value if math.isfinite(value) else None


def format_number(value: int | float) -> str:
    if isinstance(value, int):
        return str(value)
    if value == int(value) and abs(value) < 2**53:
        return str(int(value))
    # positional notation keeps the text inside the decimal grammar above
    return format(Decimal(repr(value)), "f")


def _normalize_cell(value: Any) -> CellValue:
    if isinstance(value, bool):
        raise TypeError("boolean cells are not supported")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ValueError(f"numeric cell must be finite, got {value!r}")
        return value
    if isinstance(value, str):
        text = value.strip()
        number = parse_number(text)
        return text if number is None else number
    raise TypeError(f"unsupported cell value {value!r}")


def is_numeric(value: CellValue) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class DataTable:
    """Rectangular grid with one header per row and per column."""

    column_headers: tuple[str, ...]
    row_headers: tuple[str, ...]
    cells: tuple[tuple[CellValue, ...], ...]

    def __post_init__(self):
        cols = tuple(str(h).strip() for h in self.column_headers)
        rows = tuple(str(h).strip() for h in self.row_headers)
        if not cols or not rows:
            raise ValueError("header lists must be non-empty")
        grid = tuple(tuple(_normalize_cell(v) for v in row) for row in self.cells)
        if len(grid) != len(rows):
            raise RaggedRows(f"{len(grid)} cell rows for {len(rows)} row headers")
        for i, row in enumerate(grid):
            if len(row) != len(cols):
                raise RaggedRows(f"row {i} has {len(row)} cells, expected {len(cols)}")
        object.__setattr__(self, "column_headers", cols)
        object.__setattr__(self, "row_headers", rows)
        object.__setattr__(self, "cells", grid)

    @property
    def n_rows(self) -> int:
        return len(self.row_headers)

    @property
    def n_cols(self) -> int:
        return len(self.column_headers)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    def value(self, ref: CellRef) -> CellValue:
        return self.cells[ref.row][ref.col]

    def refs(self) -> list[CellRef]:
        """All cell references in row-major order."""
        return [CellRef(r, c) for r in range(self.n_rows) for c in range(self.n_cols)]

    def contains(self, ref: CellRef) -> bool:
        return 0 <= ref.row < self.n_rows and 0 <= ref.col < self.n_cols

    def to_json(self) -> dict:
        return {
            "column_headers": list(self.column_headers),
            "row_headers": list(self.row_headers),
            "cells": [list(row) for row in self.cells],
        }

    @classmethod
    def from_json(cls, data: dict) -> DataTable:
        try:
            return cls(
                column_headers=tuple(data["column_headers"]),
                row_headers=tuple(data["row_headers"]),
                cells=tuple(tuple(row) for row in data["cells"]),
            )
        except KeyError as exc:
            raise ValueError(f"table JSON missing key {exc}") from None

    @classmethod
    def from_rows(cls, column_headers: Sequence[str], rows: dict[str, Sequence[Any]] | Sequence[tuple[str, Sequence[Any]]]) -> DataTable:
        items = list(rows.items()) if isinstance(rows, dict) else list(rows)
        return cls(tuple(column_headers), tuple(h for h, _ in items), tuple(tuple(v) for _, v in items))


@dataclass(frozen=True, order=True)
class CellRef:
    row: int
    col: int

    def to_json(self) -> list[int]:
        return [self.row, self.col]

    @classmethod
    def from_json(cls, data: Sequence[int]) -> CellRef:
        if len(data) != 2:
            raise ValueError(f"cell reference needs two indices, got {data!r}")
        row, col = data
        if isinstance(row, bool) or isinstance(col, bool) or not isinstance(row, int) or not isinstance(col, int):
            raise ValueError(f"cell indices must be integers, got {data!r}")
        return cls(row, col)


@dataclass(frozen=True)
class BBox:
    """Normalized image box, origin top-left.

    Construction only checks that the components are finite numbers so that
    malformed boxes coming from a model can still be represented and
    reported; use :meth:`problems` or :func:`validate_citation` to check the
    ordering and range invariants.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"{name} must be a finite number, got {v!r}")
            object.__setattr__(self, name, float(v))

    def problems(self) -> list[str]:
        out = []
        if self.x_min > self.x_max or self.y_min > self.y_max:
            out.append("inverted box")
        if any(not 0.0 <= v <= 1.0 for v in self.as_tuple()):
            out.append("box outside [0,1]")
        return out

    @property
    def is_valid(self) -> bool:
        return not self.problems()

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def to_json(self) -> list[float]:
        return list(self.as_tuple())

    @classmethod
    def from_json(cls, data: Sequence[float]) -> BBox:
        if len(data) != 4:
            raise ValueError(f"box needs four coordinates, got {data!r}")
        return cls(*data)

    @classmethod
    def repaired(cls, x0: float, y0: float, x1: float, y1: float) -> BBox:
        """Swap inverted pairs and clamp into the unit square."""
        x0, x1 = sorted((x0, x1))
        y0, y1 = sorted((y0, y1))
        clamp = lambda v: min(1.0, max(0.0, float(v)))  # noqa: E731
        return cls(clamp(x0), clamp(y0), clamp(x1), clamp(y1))


@dataclass(frozen=True)
class Claim:
    index: int
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("claim text must be non-empty")


@dataclass(frozen=True)
class Citation:
    claim_index: int
    cells: tuple[CellRef, ...]
    boxes: tuple[BBox, ...]
    rationale: str = ""
    claim_text: str = ""

    def to_json(self) -> dict:
        return {
            "claim_index": self.claim_index,
            "claim_text": self.claim_text,
            "cells": [c.to_json() for c in self.cells],
            "boxes": [b.to_json() for b in self.boxes],
            "rationale": self.rationale,
        }

    @classmethod
    def from_json(cls, data: dict) -> Citation:
        return cls(
            claim_index=int(data["claim_index"]),
            cells=tuple(CellRef.from_json(c) for c in data.get("cells", [])),
            boxes=tuple(BBox.from_json(b) for b in data.get("boxes", [])),
            rationale=data.get("rationale", ""),
            claim_text=data.get("claim_text", ""),
        )


def validate_citation(cit: Citation, table: DataTable) -> list[str]:
    """Return the list of invariant violations; empty means the citation is ok."""
    violations = []
    for ref in cit.cells:
        if not 0 <= ref.row < table.n_rows:
            violations.append(f"cell {ref.to_json()}: row out of range")
        if not 0 <= ref.col < table.n_cols:
            violations.append(f"cell {ref.to_json()}: column out of range")
    for i, box in enumerate(cit.boxes):
        violations.extend(f"box {i}: {p}" for p in box.problems())
    return violations


def citations_document(sample_id: str, citations: Iterable[Citation]) -> dict:
    return {"sample_id": sample_id, "citations": [c.to_json() for c in citations]}


def load_citations_document(data: dict) -> tuple[str, list[Citation]]:
    return str(data["sample_id"]), [Citation.from_json(c) for c in data.get("citations", [])]


@dataclass(frozen=True)
class AttributionSample:
    """One (chart, question, answer) triple to attribute."""

    sample_id: str
    chart_image: bytes
    chart_type: str
    question: str
    answer: str
    table: DataTable | None = None
    ground_truth: Any = None  # chartgen.GroundTruth
    targets: tuple[CellRef, ...] = field(default=())

    def __post_init__(self):
        check_chart_type(self.chart_type)
        if self.table is not None:
            for ref in self.targets:
                if not self.table.contains(ref):
                    raise ValueError(f"target cell {ref.to_json()} outside table {self.table.shape}")
            if self.ground_truth is not None:
                for ref in self.ground_truth.entries:
                    if not self.table.contains(ref):
                        raise ValueError(f"ground-truth cell {ref.to_json()} outside table {self.table.shape}")


# -- HTML ---------------------------------------------------------------------


class _TableParser(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.tables = 0
        self.depth = 0
        self.rows: list[list[str]] = []
        self._row: list[str] | None = None
        self._cell: list[str] | None = None
        self.errors: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "table":
            if self.depth:
                self.errors.append("nested <table>")
            self.depth += 1
            self.tables += 1
        elif tag == "tr":
            if not self.depth:
                self.errors.append("<tr> outside <table>")
            if self._row is not None:
                self._close_row()
            self._row = []
        elif tag in ("td", "th"):
            if self._row is None:
                self.errors.append(f"<{tag}> outside <tr>")
                self._row = []
            if self._cell is not None:
                self._close_cell()
            for name, val in attrs:
                if name in ("rowspan", "colspan") and val not in (None, "1"):
                    self.errors.append("merged cells are not supported")
            self._cell = []
        elif tag == "br" and self._cell is not None:
            self._cell.append(" ")

    def handle_endtag(self, tag):
        if tag == "table":
            if not self.depth:
                self.errors.append("unbalanced </table>")
                return
            if self._row is not None:
                self._close_row()
            self.depth -= 1
        elif tag == "tr":
            if self._row is not None:
                self._close_row()
        elif tag in ("td", "th"):
            if self._cell is not None:
                self._close_cell()

    def handle_data(self, data):
        if self._cell is not None:
            self._cell.append(data)

    def _close_cell(self):
        self._row.append("".join(self._cell).strip())
        self._cell = None

    def _close_row(self):
        if self._cell is not None:
            self._close_cell()
        if self._row:
            self.rows.append(self._row)
        self._row = None


def extract_table_fragment(text: str) -> str:
    """Cut the first ``<table>...</table>`` span out of free-form model output."""
    lower = text.lower()
    start = lower.find("<table")
    end = lower.rfind("</table>")
    if start == -1 or end == -1 or end < start:
        raise MalformedHtml("no <table>...</table> element found")
    return text[start : end + len("</table>")]


def parse_table_html(markup: str) -> DataTable:
    """Parse a flat HTML table into a :class:`DataTable`.

    The first row holds the column headers (its first cell is the corner and is
    ignored); every following row starts with its row header.
    """
    if not markup or not markup.strip():
        raise MalformedHtml("empty input")
    parser = _TableParser()
    parser.feed(markup)
    parser.close()
    if parser.tables == 0:
        raise MalformedHtml("no <table> element")
    if parser.tables > 1:
        raise MalformedHtml("expected a single table")
    if parser.depth:
        raise MalformedHtml("unclosed <table>")
    if parser.errors:
        raise MalformedHtml("; ".join(parser.errors))
    rows = parser.rows
    if len(rows) < 2:
        raise MalformedHtml("table needs a header row and at least one body row")
    width = len(rows[0])
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != width:
            raise RaggedRows(f"row {i} has {len(row)} cells, header row has {width}")
    if width < 2:
        raise MalformedHtml("table needs a row-header column and at least one data column")
    return DataTable(
        column_headers=tuple(rows[0][1:]),
        row_headers=tuple(r[0] for r in rows[1:]),
        cells=tuple(tuple(r[1:]) for r in rows[1:]),
    )


def serialize_table_html(table: DataTable) -> str:
    def text(v: CellValue) -> str:
        return html.escape(format_number(v) if is_numeric(v) else v, quote=False)

    lines = ["<table>", "<tr><th></th>" + "".join(f"<th>{text(h)}</th>" for h in table.column_headers) + "</tr>"]
    for header, row in zip(table.row_headers, table.cells):
        lines.append(f"<tr><th>{text(header)}</th>" + "".join(f"<td>{text(v)}</td>" for v in row) + "</tr>")
    lines.append("</table>")
    return "\n".join(lines)
