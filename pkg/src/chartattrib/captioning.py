"""Row, column and cell captions that give retrieval its semantic context."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import prompts
from .core import CellRef, CellValue, DataTable, format_number, is_numeric, serialize_table_html
from .gateway import Gateway, StructuredOutputExhausted, complete_structured

logger = logging.getLogger(__name__)

CAPTION_SCHEMA = {
    "type": "object",
    "properties": {"caption": {"type": "string"}},
    "required": ["caption"],
}


def show(value: CellValue) -> str:
    return format_number(value) if is_numeric(value) else str(value)


@dataclass(frozen=True)
class CaptionSet:
    row_captions: tuple[str, ...]
    col_captions: tuple[str, ...]
    cell_captions: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        rows, cols = len(self.row_captions), len(self.col_captions)
        if len(self.cell_captions) != rows or any(len(r) != cols for r in self.cell_captions):
            raise ValueError("cell caption grid does not match row/column caption counts")
        every = list(self.row_captions) + list(self.col_captions) + [c for r in self.cell_captions for c in r]
        if any(not c.strip() for c in every):
            raise ValueError("captions must be non-empty")

    def matches(self, table: DataTable) -> bool:
        return (len(self.row_captions), len(self.col_captions)) == table.shape

    def cell(self, ref: CellRef) -> str:
        return self.cell_captions[ref.row][ref.col]

    def to_json(self) -> dict:
        return {
            "row_captions": list(self.row_captions),
            "col_captions": list(self.col_captions),
            "cell_captions": [list(r) for r in self.cell_captions],
        }

    @classmethod
    def from_json(cls, data: dict) -> CaptionSet:
        return cls(tuple(data["row_captions"]), tuple(data["col_captions"]), tuple(tuple(r) for r in data["cell_captions"]))


def row_fallback(table: DataTable, r: int) -> str:
    cells = ", ".join(f"{h} = {show(v)}" for h, v in zip(table.column_headers, table.cells[r]))
    return f"Row '{table.row_headers[r]}': {cells}"


def col_fallback(table: DataTable, c: int) -> str:
    cells = ", ".join(f"{table.row_headers[r]} = {show(table.cells[r][c])}" for r in range(table.n_rows))
    return f"Column '{table.column_headers[c]}': {cells}"


def cell_fallback(table: DataTable, ref: CellRef) -> str:
    return f"Cell ({table.row_headers[ref.row]}, {table.column_headers[ref.col]}) = {show(table.value(ref))}"


def _ask(gateway: Gateway, agent: str, template: str, fallback: str, **values) -> str:
    system, user = prompts.render(template, **values)
    try:
        text = complete_structured(gateway, gateway.prompt(agent, system, [user]), CAPTION_SCHEMA)["caption"]
    except StructuredOutputExhausted as exc:
        logger.warning("%s: falling back to template caption (%s)", template, exc)
        return fallback
    text = text.strip()
    return text or fallback


def caption_rows(table: DataTable, gateway: Gateway) -> list[str]:
    html = serialize_table_html(table)

    def one(r: int) -> str:
        values = ", ".join(f"{h}: {show(v)}" for h, v in zip(table.column_headers, table.cells[r]))
        return _ask(
            gateway, "caption", "caption.row", row_fallback(table, r),
            table_html=html, header=prompts.quoted(table.row_headers[r]), values=values,
        )

    return gateway.map(one, range(table.n_rows))


def caption_columns(table: DataTable, gateway: Gateway) -> list[str]:
    html = serialize_table_html(table)

    def one(c: int) -> str:
        values = ", ".join(f"{table.row_headers[r]}: {show(table.cells[r][c])}" for r in range(table.n_rows))
        return _ask(
            gateway, "caption", "caption.col", col_fallback(table, c),
            table_html=html, header=prompts.quoted(table.column_headers[c]), values=values,
        )

    return gateway.map(one, range(table.n_cols))


def caption_cells(table: DataTable, row_captions: list[str], col_captions: list[str], gateway: Gateway) -> list[list[str]]:
    if (len(row_captions), len(col_captions)) != table.shape:
        raise ValueError("caption lists do not match the table dimensions")
    refs = table.refs()

    def one(ref: CellRef) -> str:
        return _ask(
            gateway, "caption", "caption.cell", cell_fallback(table, ref),
            row_header=prompts.quoted(table.row_headers[ref.row]),
            col_header=prompts.quoted(table.column_headers[ref.col]),
            value=show(table.value(ref)),
            row_caption=row_captions[ref.row],
            col_caption=col_captions[ref.col],
        )

    flat = gateway.map(one, refs)
    return [flat[r * table.n_cols : (r + 1) * table.n_cols] for r in range(table.n_rows)]


def caption_table(table: DataTable, gateway: Gateway) -> CaptionSet:
    rows = caption_rows(table, gateway)
    cols = caption_columns(table, gateway)
    cells = caption_cells(table, rows, cols, gateway)
    return CaptionSet(tuple(rows), tuple(cols), tuple(tuple(r) for r in cells))
