"""Chart-to-table extraction with a visual self-reflection loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

from . import prompts
from .chartgen import Layout, UnrenderableTable, render_chart
from .core import DataTable, check_chart_type, extract_table_fragment, parse_table_html, serialize_table_html
from .gateway import Gateway, ImagePart, StructuredOutputExhausted, complete_parsed, complete_structured

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 3

# the re-plot shown back to the model uses one fixed neutral style
REFLECTION_LAYOUT = Layout()
REFLECTION_STYLE_SEED = 0

VERDICT_SCHEMA = {
    "type": "object",
    "properties": {
        "consistent": {"type": "boolean"},
        "discrepancies": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["consistent", "discrepancies"],
}


class ExtractionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class ReflectionVerdict:
    consistent: bool
    discrepancies: tuple[str, ...] = ()

    def __post_init__(self):
        # a verdict that lists problems cannot be consistent
        if self.consistent and self.discrepancies:
            object.__setattr__(self, "consistent", False)


@dataclass
class ExtractionResult:
    table: DataTable
    iterations: int
    consistent: bool
    transcripts: list[str] = field(default_factory=list)
    verdicts: list[ReflectionVerdict] = field(default_factory=list)


@lru_cache(maxsize=None)
def fewshot_examples(chart_type: str) -> tuple[tuple[bytes, str], ...]:
    """(image, HTML) exemplar pairs for one chart type, rendered on first use."""
    out = []
    for i, spec in enumerate(prompts.fewshot()["extract"][chart_type]):
        table = DataTable.from_json(spec)
        png, _ = render_chart(table, chart_type, REFLECTION_LAYOUT, style_seed=100 + i)
        out.append((png, serialize_table_html(table)))
    return tuple(out)


def _parse_reply(text: str) -> DataTable:
    return parse_table_html(extract_table_fragment(text))


def extraction_prompt(gateway: Gateway, image: bytes, chart_type: str):
    system, user = prompts.render(f"extract.{chart_type}")
    parts: list = [user]
    for i, (png, html) in enumerate(fewshot_examples(chart_type), 1):
        parts += [f"Example {i}:", ImagePart(png), html]
    parts += ["Chart to transcribe:", ImagePart(image)]
    return gateway.prompt("extract", system, parts, max_tokens=2048)


def refine_prompt(gateway: Gateway, image: bytes, chart_type: str, previous: DataTable, verdict: ReflectionVerdict):
    discrepancies = "\n".join(f"- {d}" for d in verdict.discrepancies) or "- (none listed)"
    system, user = prompts.render(
        "refine", chart_type=chart_type, previous_html=serialize_table_html(previous), discrepancies=discrepancies
    )
    return gateway.prompt("extract", system, [user, ImagePart(image)], max_tokens=2048)


def reflect_consistency(original_image: bytes, rerendered_image: bytes, table: DataTable, gateway: Gateway) -> ReflectionVerdict:
    system, user = prompts.render("reflect", table_html=serialize_table_html(table))
    prompt = gateway.prompt("reflect", system, [user, ImagePart(original_image), ImagePart(rerendered_image)])
    value = complete_structured(gateway, prompt, VERDICT_SCHEMA)
    return ReflectionVerdict(bool(value["consistent"]), tuple(value["discrepancies"]))


def extract_table(
    image: bytes,
    chart_type: str,
    gateway: Gateway,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> ExtractionResult:
    """Transcribe the chart's table, re-plot it, and refine until consistent.

    Each iteration parses one (extract or refine) reply and runs one
    reflection round; the loop stops on a consistent verdict or after
    ``max_iterations`` rounds, returning the last parsed table.
    """
    check_chart_type(chart_type)
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if not gateway.vision:
        raise ValueError("table extraction needs a vision-capable backend")
    verdicts: list[ReflectionVerdict] = []
    with gateway.recording() as keys:
        prompt = extraction_prompt(gateway, image, chart_type)
        table = None
        for iteration in range(1, max_iterations + 1):
            try:
                table = complete_parsed(gateway, prompt, _parse_reply)
            except StructuredOutputExhausted as exc:
                raise ExtractionFailed(f"no parseable HTML table after {len(exc.attempts)} attempts: {exc}") from exc
            try:
                rerendered, _ = render_chart(table, chart_type, REFLECTION_LAYOUT, REFLECTION_STYLE_SEED)
            except UnrenderableTable as exc:
                verdict = ReflectionVerdict(False, (f"the table cannot be plotted as a {chart_type} chart: {exc}",))
            else:
                verdict = reflect_consistency(image, rerendered, table, gateway)
            verdicts.append(verdict)
            logger.debug("extraction round %d: consistent=%s", iteration, verdict.consistent)
            if verdict.consistent or iteration == max_iterations:
                break
            prompt = refine_prompt(gateway, image, chart_type, table, verdict)
    return ExtractionResult(table, len(verdicts), verdicts[-1].consistent, list(keys), verdicts)
