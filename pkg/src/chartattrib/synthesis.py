"""Synthetic benchmark samples and the oracle mock scripts that go with them."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import prompts
from .captioning import show
from .chartgen import GroundTruth, Layout, UnrenderableTable, random_table, render_chart
from .core import CHART_TYPES, CellRef, DataTable, serialize_table_html
from .gateway import ImagePart
from .localization import OracleDetector, detect_marks
from .pipeline import atomic_write, dump_json


@dataclass
class SynthSample:
    sample_id: str
    table: DataTable
    chart_type: str
    image: bytes
    ground_truth: GroundTruth
    question: str
    answer: str
    target: CellRef
    style_seed: int

    def sample_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image": "chart.png",
            "chart_type": self.chart_type,
            "question": self.question,
            "answer": self.answer,
            "table": "table.json",
            "groundtruth": "groundtruth.json",
            "targets": [self.target.to_json()],
            "style_seed": self.style_seed,
        }


def templated_qa(table: DataTable, cell: CellRef) -> tuple[str, str]:
    row, col = table.row_headers[cell.row], table.column_headers[cell.col]
    return f"What is the value of {row} in {col}?", f"The value of {row} in {col} is {show(table.value(cell))}."


def synthesize_sample(
    sample_id: str, table: DataTable, chart_type: str, seed: int, layout: Layout | None = None
) -> SynthSample:
    """Render ``table`` and attach a templated QA pair about one random rendered cell."""
    rng = random.Random(f"{seed}:{sample_id}")
    style_seed = rng.randrange(2**31)
    png, gt = render_chart(table, chart_type, layout, style_seed)
    cells = sorted(gt.entries)
    if not cells:
        raise UnrenderableTable("chart has no data marks")
    target = rng.choice(cells)
    question, answer = templated_qa(table, target)
    gt = GroundTruth(gt.chart_type, gt.entries, gt.width, gt.height, gt.colors, sample_id, (target,))
    return SynthSample(sample_id, table, chart_type, png, gt, question, answer, target, style_seed)


def write_sample(root: Path, s: SynthSample) -> Path:
    d = root / s.sample_id
    atomic_write(d / "chart.png", s.image)
    atomic_write(d / "table.json", dump_json(s.table.to_json()))
    atomic_write(d / "groundtruth.json", dump_json(s.ground_truth.to_json()))
    atomic_write(d / "sample.json", dump_json(s.sample_json()))
    return d / "sample.json"


def random_benchmark(n_per_type: int, seed: int, chart_types: Sequence[str] = CHART_TYPES) -> list[SynthSample]:
    rng = random.Random(seed)
    out = []
    for kind in chart_types:
        for i in range(n_per_type):
            table = random_table(rng, kind)
            out.append(synthesize_sample(f"{kind}-{i:04d}", table, kind, seed))
    return out


# -- oracle scripts ----------------------------------------------------------------


def _verdict_ok() -> dict:
    return {"consistent": True, "discrepancies": []}


def oracle_entries(s: SynthSample, mapping_mark: int | None = None) -> tuple[list[dict], list[dict]]:
    """(specific, fallback) script entries that make every agent answer as the ground truth would.

    Specific entries must precede every sample's fallbacks in a combined
    script, since a fallback matches more prompts.
    """
    digest = ImagePart(s.image).placeholder()
    claim = " ".join(s.answer.split())
    on_claim = f"Claim: {claim}\n"
    row = s.table.row_headers[s.target.row]
    col = s.table.column_headers[s.target.col]
    if mapping_mark is None:
        marks = detect_marks(s.image, s.chart_type, OracleDetector(s.ground_truth))
        mapping_mark = next(m.id for m in marks if m.cell == s.target)
    specific = [
        {"match": ["TASK: extract-table", digest], "response": serialize_table_html(s.table), "repeat": True},
        {"match": ["TASK: refine-table", digest], "response": serialize_table_html(s.table), "repeat": True},
        {"match": ["TASK: reflect-chart", digest], "response": _verdict_ok(), "repeat": True},
        {
            "match": ["TASK: decompose-answer", f"Question: {s.question}\nAnswer: {s.answer}\nRespond"],
            "response": {"claims": [claim]},
            "repeat": True,
        },
        {
            "match": ["TASK: score-row", on_claim, f"Target row: {prompts.quoted(row)}\n"],
            "response": {"rationale": "The claim is about this row.", "score": 1.0},
            "repeat": True,
        },
        {
            "match": ["TASK: score-column", on_claim, f"Target column: {prompts.quoted(col)}\n"],
            "response": {"rationale": "The claim is about this column.", "score": 1.0},
            "repeat": True,
        },
        {
            "match": ["TASK: map-cells-to-marks", on_claim],
            "response": {"assignments": [{"cell": s.target.to_json(), "mark": mapping_mark}]},
            "repeat": True,
        },
    ]
    fallback = [
        {"match": ["TASK: score-row", on_claim], "response": {"rationale": "Unrelated row.", "score": 0.0}, "repeat": True},
        {"match": ["TASK: score-column", on_claim], "response": {"rationale": "Unrelated column.", "score": 0.0}, "repeat": True},
        {"match": ["TASK: rank-cells", on_claim], "response": {"ranking": [1], "rationale": "Direct match."}, "repeat": True},
        {"match": ["TASK: verify-localization", on_claim], "response": _verdict_ok(), "repeat": True},
    ]
    return specific, fallback


GENERIC_ENTRIES = [
    # empty captions make the captioning agent use its deterministic templates
    {"match": "TASK: caption-row", "response": {"caption": ""}, "repeat": True},
    {"match": "TASK: caption-column", "response": {"caption": ""}, "repeat": True},
    {"match": "TASK: caption-cell", "response": {"caption": ""}, "repeat": True},
]


def oracle_script(samples: Iterable[SynthSample], overrides: dict[str, int] | None = None) -> dict:
    """Combined script for a set of samples; ``overrides`` forces a mapping mark id per sample."""
    overrides = overrides or {}
    specific, fallback = [], []
    for s in samples:
        a, b = oracle_entries(s, overrides.get(s.sample_id))
        specific += a
        fallback += b
    return {"vision": True, "entries": specific + fallback + GENERIC_ENTRIES}


def write_script(path: Path, script: dict) -> None:
    atomic_write(path, json.dumps(script, indent=1, ensure_ascii=False) + "\n")


def script_digest(script: dict) -> str:
    return hashlib.sha256(json.dumps(script, sort_keys=True).encode()).hexdigest()[:16]
