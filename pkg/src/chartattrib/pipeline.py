"""End-to-end attribution driver and run-directory bookkeeping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import tempfile
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .backends import CacheOnlyBackend, OpenAICompatibleBackend, ScriptedMock
from .captioning import caption_table
from .chart2table import DEFAULT_MAX_ITERATIONS, extract_table
from .chartgen import GroundTruth
from .core import AttributionSample, Citation, CellRef, DataTable, check_chart_type, citations_document, validate_citation
from .gateway import DEFAULT_MAX_REPAIRS, Backend, CacheMiss, Gateway, TranscriptCache
from .localization import (
    DetectionsFileDetector,
    Detector,
    DetectorFailure,
    OracleDetector,
    annotate_marks,
    detect_marks,
    direct_bbox_baseline,
    localize_claim,
    overlay_boxes,
)
from .reformulate import decompose_answer
from .retrieval import DEFAULT_THRESHOLD, DEFAULT_TOP_K, retrieve_citation_cells

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# fields that change what a run produces; everything else is plumbing
_HASHED_FIELDS = (
    "models", "default_model", "threshold", "top_k", "max_iterations",
    "max_repairs", "use_oracle_mapping", "verify", "detector",
)


@dataclass
class PipelineConfig:
    backend: str = "live"
    models: dict[str, str] = field(default_factory=dict)
    default_model: str | None = None
    threshold: float = DEFAULT_THRESHOLD
    top_k: int = DEFAULT_TOP_K
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    max_repairs: int = DEFAULT_MAX_REPAIRS
    parallelism: int = 4
    cache: str | None = None
    out: str = "runs"
    use_oracle_mapping: bool = True
    verify: bool = True
    detector: str = "auto"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must be in [0, 1]")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.max_repairs < 0:
            raise ConfigError("max_repairs must be >= 0")
        if self.detector not in ("auto", "oracle", "external"):
            raise ConfigError(f"unknown detector {self.detector!r}")
        if not (self.backend == "live" or self.backend.startswith("mock:")):
            raise ConfigError(f"backend must be 'live' or 'mock:<script>', got {self.backend!r}")

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> PipelineConfig:
        data: dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        payload = {k: getattr(self, k) for k in _HASHED_FIELDS}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def make_backend(config: PipelineConfig) -> Backend:
    if config.backend.startswith("mock:"):
        path = config.backend[len("mock:"):]
        try:
            return ScriptedMock.from_file(path)
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load mock script {path}: {exc}") from None
    return OpenAICompatibleBackend.from_env()


def make_gateway(config: PipelineConfig, backend: Backend, cache: TranscriptCache | None = None) -> Gateway:
    if cache is None and config.cache:
        cache = TranscriptCache(config.cache)
    return Gateway(
        backend,
        cache=cache,
        parallelism=config.parallelism,
        models=config.models,
        default_model=config.default_model,
        max_repairs=config.max_repairs,
    )


# -- files ----------------------------------------------------------------------


def atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


@dataclass
class SampleFile:
    path: Path
    sample: AttributionSample
    detections: Path | None = None


def load_sample(path: str | Path) -> SampleFile:
    """Read a sample.json; relative paths inside it resolve against its directory.

    Raises ``FileNotFoundError`` naming the missing file and ``ValueError``
    for schema problems.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"sample file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    base = path.parent

    def ref(key: str) -> Path | None:
        value = data.get(key)
        if value is None:
            return None
        p = base / value
        if not p.is_file():
            raise FileNotFoundError(f"{key} file not found: {p} (referenced by {path})")
        return p

    try:
        image_path = ref("image")
        if image_path is None:
            raise ValueError(f"{path}: missing 'image'")
        table = None
        if "table" in data:
            t = data["table"]
            table = DataTable.from_json(t if isinstance(t, dict) else json.loads(ref("table").read_text(encoding="utf-8")))
        gt_path = ref("groundtruth")
        gt = GroundTruth.from_json(json.loads(gt_path.read_text(encoding="utf-8"))) if gt_path else None
        sample = AttributionSample(
            sample_id=str(data.get("sample_id") or path.parent.name),
            chart_image=image_path.read_bytes(),
            chart_type=check_chart_type(data["chart_type"]),
            question=str(data.get("question", "")),
            answer=str(data["answer"]),
            table=table,
            ground_truth=gt,
            targets=tuple(CellRef.from_json(c) for c in data.get("targets", [])),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc}") from None
    return SampleFile(path, sample, ref("detections"))


def choose_detector(sf: SampleFile, config: PipelineConfig) -> Detector:
    mode = config.detector
    if mode == "external" or (mode == "auto" and sf.detections is not None):
        if sf.detections is None:
            raise DetectorFailure(f"sample {sf.sample.sample_id} has no detections file")
        return DetectionsFileDetector(sf.detections)
    if sf.sample.ground_truth is None:
        raise DetectorFailure(f"sample {sf.sample.sample_id} has neither detections nor ground truth")
    return OracleDetector(sf.sample.ground_truth)


# -- per-sample work -------------------------------------------------------------


@dataclass
class SampleOutput:
    sample_id: str
    citations: list[Citation]
    traces: list[dict] = field(default_factory=list)
    extraction: dict | None = None
    annotated: bytes | None = None
    overlay: bytes | None = None


def _overlay(image: bytes, sample_id: str, citations: Sequence[Citation]) -> bytes:
    listing = [{"claim_index": c.claim_index, "box": b.to_json()} for c in citations for b in c.boxes]
    meta = {"sample_id": sample_id, "citation_boxes": json.dumps(listing)}
    return overlay_boxes(image, [b for c in citations for b in c.boxes], meta)


def attribute_sample(sf: SampleFile, gateway: Gateway, config: PipelineConfig) -> SampleOutput:
    s = sf.sample
    ext = extract_table(s.chart_image, s.chart_type, gateway, config.max_iterations)
    table = ext.table
    claims = decompose_answer(s.question, s.answer, gateway)
    captions = caption_table(table, gateway)
    detector = choose_detector(sf, config)
    marks = detect_marks(s.chart_image, s.chart_type, detector)
    annotated = annotate_marks(s.chart_image, marks) if marks else None
    use_oracle = config.use_oracle_mapping and isinstance(detector, OracleDetector)

    citations, traces = [], []
    for claim in claims:
        found = retrieve_citation_cells(table, captions, claim, gateway, config.threshold, config.top_k)
        trace = found.trace(claim)
        if marks:
            loc = localize_claim(
                s.chart_image, annotated, marks, found.cells, table, claim, gateway,
                use_oracle=use_oracle, verify=config.verify,
            )
            boxes = loc.boxes
            trace["localization"] = {
                "assignments": [{"cell": c.to_json(), "mark": m, "box": b.to_json()} for c, m, b in loc.assignments],
                "unmapped": [c.to_json() for c in loc.unmapped],
                "verified": loc.verified,
                "mapping_calls": loc.mapping_calls,
            }
        else:
            boxes = []
            trace["localization"] = {"assignments": [], "unmapped": [c.to_json() for c in found.cells], "verified": False}
        cit = Citation(claim.index, tuple(found.cells), tuple(boxes), found.rationale, claim.text)
        problems = validate_citation(cit, table)
        if problems:
            raise ValueError(f"invalid citation for claim {claim.index}: {problems}")
        citations.append(cit)
        traces.append(trace)

    extraction = {
        "table": table.to_json(),
        "iterations": ext.iterations,
        "consistent": ext.consistent,
        "discrepancies": [list(v.discrepancies) for v in ext.verdicts],
        "transcripts": ext.transcripts,
    }
    return SampleOutput(s.sample_id, citations, traces, extraction, annotated, _overlay(s.chart_image, s.sample_id, citations))


def baseline_sample(sf: SampleFile, gateway: Gateway, config: PipelineConfig) -> SampleOutput:
    s = sf.sample
    claims = decompose_answer(s.question, s.answer, gateway)
    citations = []
    for claim in claims:
        boxes = direct_bbox_baseline(s.chart_image, claim, gateway, s.question)
        citations.append(Citation(claim.index, (), tuple(boxes), "direct box prediction", claim.text))
    return SampleOutput(s.sample_id, citations, overlay=_overlay(s.chart_image, s.sample_id, citations))


# -- batches ---------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    outputs: list[SampleOutput]
    failures: list[dict]

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def new_run_dir(out: str | Path, tag: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(out)
    for n in range(1000):
        cand = base / (f"run-{stamp}-{tag}" + (f"-{n}" if n else ""))
        try:
            cand.mkdir(parents=True)
            return cand
        except FileExistsError:
            continue
    raise ConfigError(f"could not create a run directory under {base}")


def write_sample_output(run_dir: Path, out: SampleOutput) -> None:
    d = run_dir / out.sample_id
    atomic_write(d / "citations.json", dump_json(citations_document(out.sample_id, out.citations)))
    if out.traces:
        atomic_write(d / "retrieval_trace.json", dump_json({"sample_id": out.sample_id, "claims": out.traces}))
    if out.extraction is not None:
        atomic_write(d / "extraction.json", dump_json(out.extraction))
    if out.annotated is not None:
        atomic_write(d / "annotated.png", out.annotated)
    if out.overlay is not None:
        atomic_write(d / "overlay.png", out.overlay)


def run_batch(
    samples: Sequence[SampleFile],
    gateway: Gateway,
    config: PipelineConfig,
    run_dir: Path,
    work: Callable[[SampleFile, Gateway, PipelineConfig], SampleOutput] = attribute_sample,
    fatal: tuple[type[BaseException], ...] = (),
    command: str = "attribute",
) -> RunResult:
    """Process samples with bounded parallelism; one failing sample never stops the batch
    unless its error type is listed in ``fatal``."""

    def one(sf: SampleFile):
        try:
            out = work(sf, gateway, config)
            write_sample_output(run_dir, out)
            return out, None
        except fatal:
            raise
        except Exception as exc:
            logger.error("sample %s failed: %s", sf.sample.sample_id, exc)
            return None, {
                "sample_id": sf.sample.sample_id,
                "path": str(sf.path),
                "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc(limit=5),
            }

    ids = [sf.sample.sample_id for sf in samples]
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique within a run")
    if config.parallelism > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(one, samples))
    else:
        results = [one(sf) for sf in samples]
    outputs = [o for o, _ in results if o is not None]
    failures = [f for _, f in results if f is not None]
    atomic_write(run_dir / "failures.json", dump_json({"failures": failures}))
    manifest = {
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(),
        "config": config.to_json(),
        "config_hash": config.digest(),
        "backend": gateway.backend.identity,
        "cache": config.cache,
        "cache_digest": gateway.cache.digest() if gateway.cache is not None else None,
        "versions": {"chartattrib": __version__, "python": platform.python_version()},
        "samples": ids,
        "succeeded": [o.sample_id for o in outputs],
        "backend_calls": gateway.backend_calls,
        "cache_hits": gateway.cache_hits,
    }
    atomic_write(run_dir / "manifest.json", dump_json(manifest))
    return RunResult(run_dir, outputs, failures)


def cache_meta_path(cache: str | Path) -> Path:
    cache = Path(cache)
    return cache.with_name(cache.name + ".meta.json")


def write_cache_meta(config: PipelineConfig, backend: Backend) -> None:
    if config.cache:
        atomic_write(cache_meta_path(config.cache), dump_json({"config_hash": config.digest(), "backend": backend.identity}))


def replay_backend(cache: str | Path, config: PipelineConfig, allow_config_change: bool = False) -> CacheOnlyBackend:
    meta_path = cache_meta_path(cache)
    if not Path(cache).is_file():
        raise ConfigError(f"cache file not found: {cache}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read cache metadata {meta_path}: {exc}") from None
    if meta["config_hash"] != config.digest() and not allow_config_change:
        raise ConfigError(
            f"config hash {config.digest()} differs from the recorded run ({meta['config_hash']}); "
            "pass --allow-config-change to replay anyway"
        )
    return CacheOnlyBackend(meta["backend"])


__all__ = [
    "CacheMiss",
    "ConfigError",
    "PipelineConfig",
    "RunResult",
    "SampleFile",
    "attribute_sample",
    "baseline_sample",
    "load_sample",
    "make_backend",
    "make_gateway",
    "new_run_dir",
    "replay_backend",
    "run_batch",
    "write_cache_meta",
]
