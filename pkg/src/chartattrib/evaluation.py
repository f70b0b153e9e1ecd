"""IoU metrics, threshold matching and run-level reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .chartgen import GroundTruth
from .core import BBox, CHART_TYPES

RECALL = "recall"
PRECISION_LIKE = "precision_like"


class MissingGroundTruth(KeyError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_match_threshold: float = 0.9
    line_coverage_mode: str = RECALL

    def __post_init__(self):
        if not 0.0 < self.iou_match_threshold <= 1.0:
            raise ValueError("iou_match_threshold must be in (0, 1]")
        if self.line_coverage_mode not in (RECALL, PRECISION_LIKE):
            raise ValueError(f"unknown line coverage mode {self.line_coverage_mode!r}")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


@dataclass
class MatchResult:
    matches: list[tuple[int, int, float]]  # (pred index, gt index, iou)
    best_iou: list[float]  # per GT: IoU of its one-to-one partner, 0 if none

    @property
    def n_matched(self) -> int:
        return len(self.matches)


def match_regions(predicted: Sequence[BBox], gt: Sequence[BBox], threshold: float = 0.9) -> MatchResult:
    """Greedy one-to-one assignment in descending IoU order.

    Every overlapping pair is eligible for assignment so unmatched regions
    still carry a graded IoU; only assignments at or above ``threshold``
    count as matches. Ties break on (gt index, pred index).
    """
    pairs = []
    for i, p in enumerate(predicted):
        for j, g in enumerate(gt):
            v = iou(p, g)
            if v > 0:
                pairs.append((-v, j, i))
    pairs.sort()
    used_p, used_g = set(), set()
    best = [0.0] * len(gt)
    matches = []
    for neg, j, i in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        best[j] = -neg
        if -neg >= threshold:
            matches.append((i, j, -neg))
    return MatchResult(matches, best)


def line_coverage(predicted_regions: Sequence[BBox], gt_points: Sequence[tuple[float, float]], mode: str = RECALL) -> float:
    if not gt_points:
        raise ValueError("line coverage needs at least one ground-truth point")
    covered = sum(1 for x, y in gt_points if any(r.contains_point(x, y) for r in predicted_regions))
    if mode == RECALL:
        return covered / len(gt_points)
    if mode == PRECISION_LIKE:
        # one region may cover several points; cap keeps the ratio in [0, 1]
        return min(1.0, covered / max(1, len(predicted_regions)))
    raise ValueError(f"unknown line coverage mode {mode!r}")


@dataclass
class SampleScore:
    sample_id: str
    chart_type: str
    n_gt: int
    n_pred: int
    mean_iou: float | None = None
    match_rate: float | None = None
    line_coverage: float | None = None
    line_coverage_precision_like: float | None = None

    @property
    def headline(self) -> float:
        return self.line_coverage if self.chart_type == "line" else self.mean_iou

    def to_json(self) -> dict:
        out = {"sample_id": self.sample_id, "chart_type": self.chart_type, "n_gt": self.n_gt, "n_pred": self.n_pred}
        if self.chart_type == "line":
            out["line_coverage"] = self.line_coverage
            out["line_coverage_precision_like"] = self.line_coverage_precision_like
        else:
            out["mean_iou"] = self.mean_iou
            out["match_rate"] = self.match_rate
        return out


def _mean(xs: Sequence[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


@dataclass
class EvalReport:
    config: EvalConfig
    samples: list[SampleScore] = field(default_factory=list)

    def by_type(self) -> dict[str, dict]:
        out = {}
        for kind in CHART_TYPES:
            group = [s for s in self.samples if s.chart_type == kind]
            if not group:
                continue
            if kind == "line":
                out[kind] = {
                    "n_samples": len(group),
                    "line_coverage": _mean([s.line_coverage for s in group]),
                    "line_coverage_precision_like": _mean([s.line_coverage_precision_like for s in group]),
                }
            else:
                out[kind] = {
                    "n_samples": len(group),
                    "mean_iou": _mean([s.mean_iou for s in group]),
                    "match_rate": _mean([s.match_rate for s in group]),
                }
        return out

    def overall(self) -> dict:
        regions = [s for s in self.samples if s.chart_type != "line"]
        lines = [s for s in self.samples if s.chart_type == "line"]
        return {
            "n_samples": len(self.samples),
            "score": _mean([s.headline for s in self.samples]),
            "mean_iou": _mean([s.mean_iou for s in regions]),
            "match_rate": _mean([s.match_rate for s in regions]),
            "line_coverage": _mean([s.line_coverage for s in lines]),
        }

    def to_json(self) -> dict:
        return {
            "iou_match_threshold": self.config.iou_match_threshold,
            "line_coverage_mode": self.config.line_coverage_mode,
            "overall": self.overall(),
            "by_type": self.by_type(),
            "samples": [s.to_json() for s in self.samples],
        }


def score_sample(sample_id: str, predicted: Sequence[BBox], gt: GroundTruth, config: EvalConfig) -> SampleScore:
    regions = gt.regions()
    if gt.chart_type == "line":
        points = [pt for region in regions for pt in region]
        score = SampleScore(sample_id, "line", len(points), len(predicted))
        if points:
            primary = line_coverage(predicted, points, config.line_coverage_mode)
            other = PRECISION_LIKE if config.line_coverage_mode == RECALL else RECALL
            secondary = line_coverage(predicted, points, other)
            if config.line_coverage_mode == RECALL:
                score.line_coverage, score.line_coverage_precision_like = primary, secondary
            else:
                score.line_coverage, score.line_coverage_precision_like = secondary, primary
        else:
            score.line_coverage = score.line_coverage_precision_like = 0.0
        return score
    result = match_regions(predicted, regions, config.iou_match_threshold)
    n = len(regions)
    return SampleScore(
        sample_id,
        gt.chart_type,
        n,
        len(predicted),
        mean_iou=_mean(result.best_iou) or 0.0,
        match_rate=result.n_matched / n if n else 0.0,
    )


def evaluate_run(
    results: Sequence[tuple[str, Sequence[BBox]]],
    gts: dict[str, GroundTruth],
    config: EvalConfig | None = None,
) -> EvalReport:
    """Score ``(sample_id, predicted boxes)`` pairs against their ground truth."""
    config = config or EvalConfig()
    report = EvalReport(config)
    for sample_id, boxes in sorted(results, key=lambda r: r[0]):
        if sample_id not in gts:
            raise MissingGroundTruth(sample_id)
        report.samples.append(score_sample(sample_id, list(boxes), gts[sample_id], config))
    return report


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def format_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text table, one row per method, scores in percent."""
    if reports:
        threshold = next(iter(reports.values())).config.iou_match_threshold
    else:
        threshold = 0.9
    header = ["Method", "Bar IoU", "Pie IoU", "Line cov.", f"Match@{threshold:g}", "Overall"]
    rows = []
    for name, rep in reports.items():
        t = rep.by_type()
        o = rep.overall()
        rows.append([
            name,
            _pct(t.get("bar", {}).get("mean_iou")),
            _pct(t.get("pie", {}).get("mean_iou")),
            _pct(t.get("line", {}).get("line_coverage")),
            _pct(o["match_rate"]),
            _pct(o["score"]),
        ])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    lines = [fmt(header), "-+-".join("-" * w for w in widths)]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"
