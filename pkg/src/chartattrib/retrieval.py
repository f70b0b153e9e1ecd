"""Retrieve-then-rank: row/column pre-filtering followed by listwise cell re-ranking."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import jsonschema

from . import prompts
from .captioning import CaptionSet, show
from .core import CellRef, Claim, DataTable, serialize_table_html
from .gateway import Gateway, complete_parsed, complete_structured, json_schema_parser

DEFAULT_THRESHOLD = 0.4
DEFAULT_TOP_K = 3
WINDOW_SIZE = 20
WINDOW_STRIDE = 10

SCORE_SCHEMA = {
    "type": "object",
    "properties": {"score": {"type": "number"}, "rationale": {"type": "string"}},
    "required": ["score"],
}

RANKING_SCHEMA = {
    "type": "object",
    "properties": {
        "ranking": {"type": "array", "items": {"type": "integer"}},
        "rationale": {"type": "string"},
    },
    "required": ["ranking"],
}

_BRACKETED = re.compile(r"\[(\d+)\]")


@dataclass(frozen=True)
class RelevanceJudgment:
    target: str  # "row" or "col"
    index: int
    score: float
    rationale: str = ""

    def __post_init__(self):
        if self.target not in ("row", "col"):
            raise ValueError(f"judgment target must be 'row' or 'col', got {self.target!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")

    def to_json(self) -> dict:
        return {"target": self.target, "index": self.index, "score": self.score, "rationale": self.rationale}


@dataclass(frozen=True)
class PrefilterResult:
    retained_rows: frozenset[int]
    retained_cols: frozenset[int]
    judgments: tuple[RelevanceJudgment, ...]
    threshold: float

    @classmethod
    def from_judgments(cls, judgments: Sequence[RelevanceJudgment], threshold: float) -> PrefilterResult:
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        rows = frozenset(j.index for j in judgments if j.target == "row" and j.score >= threshold)
        cols = frozenset(j.index for j in judgments if j.target == "col" and j.score >= threshold)
        return cls(rows, cols, tuple(judgments), threshold)


@dataclass
class Ranking:
    ordered: list[CellRef]
    rationale: str = ""
    windows: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.ordered)) != len(self.ordered):
            raise ValueError("ranking contains duplicate cells")


@dataclass
class RetrievalResult:
    cells: list[CellRef]
    rationale: str
    prefilter: PrefilterResult
    candidates: list[CellRef]
    ranking: Ranking

    def trace(self, claim: Claim) -> dict:
        return {
            "claim_index": claim.index,
            "claim": claim.text,
            "threshold": self.prefilter.threshold,
            "judgments": [j.to_json() for j in self.prefilter.judgments],
            "retained_rows": sorted(self.prefilter.retained_rows),
            "retained_cols": sorted(self.prefilter.retained_cols),
            "candidates": [c.to_json() for c in self.candidates],
            "windows": self.ranking.windows,
            "final": [c.to_json() for c in self.cells],
            "rationale": self.rationale,
        }


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, float(x)))


def prefilter(
    table: DataTable,
    captions: CaptionSet,
    claim: Claim,
    gateway: Gateway,
    threshold: float = DEFAULT_THRESHOLD,
) -> PrefilterResult:
    """Score every row and column against ``claim``; keep those at or above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    html = serialize_table_html(table)
    targets = [("row", r) for r in range(table.n_rows)] + [("col", c) for c in range(table.n_cols)]

    def score(target: tuple[str, int]) -> RelevanceJudgment:
        kind, i = target
        header = table.row_headers[i] if kind == "row" else table.column_headers[i]
        caption = captions.row_captions[i] if kind == "row" else captions.col_captions[i]
        system, user = prompts.render(
            f"prefilter.{kind}", claim=claim.text, table_html=html, header=prompts.quoted(header), caption=caption
        )
        value = complete_structured(gateway, gateway.prompt("prefilter", system, [user]), SCORE_SCHEMA)
        return RelevanceJudgment(kind, i, _clamp(value["score"]), str(value.get("rationale", "")))

    return PrefilterResult.from_judgments(gateway.map(score, targets), threshold)


def candidate_cells(pref: PrefilterResult, table: DataTable) -> list[CellRef]:
    """Retained rows x retained columns, row-major.

    An empty side falls back to every index of that dimension, so some cells
    always reach the re-ranker.
    """
    rows = sorted(pref.retained_rows) or list(range(table.n_rows))
    cols = sorted(pref.retained_cols) or list(range(table.n_cols))
    return [CellRef(r, c) for r in rows for c in cols if table.contains(CellRef(r, c))]


def apply_permutation(numbers: Sequence[int], size: int) -> list[int]:
    """1-based model ranking -> 0-based order; drops repeats and out-of-range ids, appends the rest."""
    order, seen = [], set()
    for n in numbers:
        i = n - 1
        if 0 <= i < size and i not in seen:
            order.append(i)
            seen.add(i)
    order.extend(i for i in range(size) if i not in seen)
    return order


def _ranking_parser():
    strict = json_schema_parser(RANKING_SCHEMA, coerce=lambda v: {"ranking": v} if isinstance(v, list) else v)

    def parse(text: str) -> dict:
        try:
            return strict(text)
        except (ValueError, jsonschema.ValidationError):
            found = _BRACKETED.findall(text)
            if len(found) > 1:
                return {"ranking": [int(x) for x in found], "rationale": ""}
            raise

    return parse


def _describe(ref: CellRef, captions: CaptionSet, table: DataTable | None) -> str:
    caption = captions.cell(ref)
    if table is None:
        return f"cell [{ref.row}, {ref.col}]: {caption}"
    return (
        f"row {prompts.quoted(table.row_headers[ref.row])}, column {prompts.quoted(table.column_headers[ref.col])}, "
        f"value {show(table.value(ref))}: {caption}"
    )


def _rank_window(window: list[CellRef], captions: CaptionSet, claim: Claim, gateway: Gateway, table) -> tuple[list[CellRef], str]:
    listing = "\n".join(f"[{i}] {_describe(ref, captions, table)}" for i, ref in enumerate(window, 1))
    system, user = prompts.render("rerank", claim=claim.text, candidates=listing, count=len(window))
    value = complete_parsed(gateway, gateway.prompt("rerank", system, [user]), _ranking_parser())
    order = apply_permutation(value["ranking"], len(window))
    return [window[i] for i in order], str(value.get("rationale", ""))


def rerank(
    candidates: Sequence[CellRef],
    captions: CaptionSet,
    claim: Claim,
    gateway: Gateway,
    top_k: int = DEFAULT_TOP_K,
    table: DataTable | None = None,
    window_size: int = WINDOW_SIZE,
    stride: int = WINDOW_STRIDE,
) -> Ranking:
    """Listwise re-ranking; long lists go through back-to-front sliding windows."""
    if not candidates:
        raise ValueError("rerank needs at least one candidate")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    order = list(dict.fromkeys(candidates))
    if len(order) == 1:
        return Ranking(order, "single candidate", [])
    windows = []
    rationale = ""
    end = len(order)
    start = max(0, end - window_size)
    while True:
        ranked, rationale = _rank_window(order[start:end], captions, claim, gateway, table)
        order[start:end] = ranked
        windows.append({"start": start, "end": end, "order": [c.to_json() for c in ranked]})
        if start == 0:
            break
        end -= stride
        start = max(0, end - window_size)
    return Ranking(order[:top_k], rationale, windows)


def retrieve_citation_cells(
    table: DataTable,
    captions: CaptionSet,
    claim: Claim,
    gateway: Gateway,
    threshold: float = DEFAULT_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
) -> RetrievalResult:
    pref = prefilter(table, captions, claim, gateway, threshold)
    cands = candidate_cells(pref, table)
    ranking = rerank(cands, captions, claim, gateway, top_k, table)
    return RetrievalResult(ranking.ordered[:top_k], ranking.rationale, pref, cands, ranking)
