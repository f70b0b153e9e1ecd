"""Command-line entry point: attribute, synthesize, evaluate, baseline, replay."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path
from typing import Sequence

from .chartgen import GroundTruth, UnrenderableTable, random_table
from .core import CHART_TYPES, DataTable, load_citations_document
from .evaluation import EvalConfig, evaluate_run, format_table
from .gateway import CacheMiss, TranscriptCache
from .localization import DetectorFailure
from .pipeline import (
    ConfigError,
    PipelineConfig,
    atomic_write,
    baseline_sample,
    dump_json,
    load_sample,
    make_backend,
    make_gateway,
    new_run_dir,
    replay_backend,
    run_batch,
    write_cache_meta,
)
from .synthesis import oracle_script, synthesize_sample, write_sample, write_script

logger = logging.getLogger("chartattrib")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("samples", nargs="+", help="sample.json files or directories containing them")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--backend", help="'live' or 'mock:<script.json>'")
    p.add_argument("--threshold", type=float, help="pre-filter relevance threshold in [0, 1]")
    p.add_argument("--top-k", type=int, dest="top_k", help="cells kept per claim after re-ranking")
    p.add_argument("--max-iterations", type=int, dest="max_iterations", help="extraction reflection rounds")
    p.add_argument("--parallelism", type=int, help="max in-flight model calls and concurrent samples")
    p.add_argument("--cache", help="transcript cache (JSONL)")
    p.add_argument("--out", help="directory that receives the timestamped run directory")
    p.add_argument("--seed", type=int, help="accepted for symmetry with synthesize; the pipeline itself is deterministic")
    p.add_argument("--detector", choices=["auto", "oracle", "external"])
    p.add_argument(
        "--mapping", choices=["oracle", "model"],
        help="with the oracle detector, map cells through ground truth (oracle) or through the backend (model)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chartattrib", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attribute", help="cite chart regions for each answer claim")
    _pipeline_flags(p)

    p = sub.add_parser("baseline", help="zero-shot direct bounding-box prompting")
    _pipeline_flags(p)

    p = sub.add_parser("replay", help="re-run from a transcript cache without live calls")
    _pipeline_flags(p)
    p.add_argument("--allow-config-change", action="store_true")

    p = sub.add_parser("synthesize", help="render tables as charts with ground truth and QA pairs")
    p.add_argument("--tables", help="directory of table.json files (or chart specs)")
    p.add_argument("--random", type=int, default=0, metavar="N", help="also generate N random tables per chart type")
    p.add_argument("--types", default="bar,pie,line")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score citations against ground truth")
    p.add_argument("--citations", action="append", required=True, metavar="[NAME=]DIR")
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--out", help="where report.json / report.txt go (default: first citations dir)")
    p.add_argument("--iou-threshold", type=float, default=0.9)
    p.add_argument("--line-mode", choices=["recall", "precision_like"], default="recall")
    p.add_argument("--allow-missing", action="store_true", help="score samples without citations as empty predictions")
    return parser


def _collect_samples(paths: Sequence[str]) -> list[Path]:
    out = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            found = sorted(p.rglob("sample.json"))
            if not found:
                raise FileNotFoundError(f"no sample.json under {p}")
            out.extend(found)
        else:
            out.append(p)
    return out


def _config_from_args(args) -> PipelineConfig:
    overrides = {
        "backend": args.backend,
        "threshold": args.threshold,
        "top_k": args.top_k,
        "max_iterations": args.max_iterations,
        "parallelism": args.parallelism,
        "cache": args.cache,
        "out": args.out,
        "detector": args.detector,
    }
    if args.mapping is not None:
        overrides["use_oracle_mapping"] = args.mapping == "oracle"
    return PipelineConfig.load(args.config, **overrides)


def cmd_pipeline(args) -> int:
    config = _config_from_args(args)
    samples = [load_sample(p) for p in _collect_samples(args.samples)]
    work = baseline_sample if args.command == "baseline" else None
    fatal: tuple = ()
    if args.command == "replay":
        if not config.cache:
            raise ConfigError("replay needs --cache")
        backend = replay_backend(config.cache, config, args.allow_config_change)
        fatal = (CacheMiss,)
    else:
        backend = make_backend(config)
        write_cache_meta(config, backend)
    gateway = make_gateway(config, backend, TranscriptCache(config.cache) if config.cache else None)
    run_dir = new_run_dir(config.out, config.digest()[:8])
    kwargs = {"work": work} if work is not None else {}
    result = run_batch(samples, gateway, config, run_dir, fatal=fatal, command=args.command, **kwargs)
    print(run_dir)
    for f in result.failures:
        print(f"FAILED {f['sample_id']}: {f['error']}", file=sys.stderr)
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _load_tables(tables_dir: Path) -> list[tuple[str, DataTable, dict | None]]:
    out = []
    for path in sorted(tables_dir.glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        if "table" in data:  # chart spec: table plus chart_type / layout / style_seed
            out.append((path.stem, DataTable.from_json(data["table"]), data))
        else:
            out.append((path.stem, DataTable.from_json(data), None))
    return out


def cmd_synthesize(args) -> int:
    from .chartgen import Layout

    types = [t.strip() for t in args.types.split(",") if t.strip()]
    for t in types:
        if t not in CHART_TYPES:
            raise ConfigError(f"unknown chart type {t!r}")
    jobs: list[tuple[str, DataTable, str, Layout | None]] = []
    if args.tables:
        tables_dir = Path(args.tables)
        if not tables_dir.is_dir():
            raise FileNotFoundError(f"tables directory not found: {tables_dir}")
        for stem, table, spec in _load_tables(tables_dir):
            if spec is not None:
                layout = Layout.from_json(spec["layout"]) if "layout" in spec else None
                jobs.append((f"{stem}-{spec['chart_type']}", table, spec["chart_type"], layout))
            else:
                jobs.extend((f"{stem}-{t}", table, t, None) for t in types)
    if args.random:
        rng = random.Random(args.seed)
        for t in types:
            for i in range(args.random):
                jobs.append((f"random{i:04d}-{t}", random_table(rng, t), t, None))
    if not jobs:
        raise ConfigError("nothing to synthesize: give --tables and/or --random")
    out = Path(args.out)
    made, skipped = [], []
    for sample_id, table, kind, layout in jobs:
        try:
            s = synthesize_sample(sample_id, table, kind, args.seed, layout)
        except UnrenderableTable as exc:
            skipped.append({"sample_id": sample_id, "reason": str(exc)})
            print(f"skipped {sample_id}: {exc}", file=sys.stderr)
            continue
        write_sample(out, s)
        made.append(s)
    write_script(out / "oracle_script.json", oracle_script(made))
    atomic_write(out / "synth_report.json", dump_json({"written": [s.sample_id for s in made], "skipped": skipped}))
    print(f"wrote {len(made)} samples to {out} ({len(skipped)} skipped)")
    return EXIT_OK


def _index(root: Path, filename: str, kind: str) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for path in sorted(root.rglob(filename)):
        data = json.loads(path.read_text(encoding="utf-8"))
        sid = str(data.get("sample_id") or path.parent.name)
        if sid in found:
            raise ConfigError(f"duplicate {kind} for sample {sid}: {found[sid]} and {path}")
        found[sid] = path
    return found


def cmd_evaluate(args) -> int:
    config = EvalConfig(args.iou_threshold, args.line_mode)
    gt_dir = Path(args.groundtruth)
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"ground-truth directory not found: {gt_dir}")
    gt_paths = _index(gt_dir, "groundtruth.json", "ground truth")
    gts = {sid: GroundTruth.from_json(json.loads(p.read_text(encoding="utf-8"))) for sid, p in gt_paths.items()}
    reports = {}
    first_dir = None
    for spec in args.citations:
        name, sep, d = spec.partition("=")
        if not sep:
            name, d = Path(spec).name or spec, spec
        cdir = Path(d)
        if not cdir.is_dir():
            raise FileNotFoundError(f"citations directory not found: {cdir}")
        first_dir = first_dir or cdir
        cit_paths = _index(cdir, "citations.json", "citations")
        extra = sorted(set(cit_paths) - set(gts))
        missing = sorted(set(gts) - set(cit_paths))
        if extra:
            raise ConfigError(f"{name}: no ground truth for samples {extra}")
        if missing and not args.allow_missing:
            raise ConfigError(f"{name}: no citations for samples {missing} (use --allow-missing)")
        results = []
        for sid in sorted(gts):
            boxes = []
            if sid in cit_paths:
                _, cits = load_citations_document(json.loads(cit_paths[sid].read_text(encoding="utf-8")))
                boxes = [b for c in cits for b in c.boxes]
            results.append((sid, boxes))
        reports[name] = evaluate_run(results, gts, config)
    out = Path(args.out) if args.out else first_dir
    if len(reports) == 1:
        doc = next(iter(reports.values())).to_json()
    else:
        doc = {"methods": {n: r.to_json() for n, r in reports.items()}}
    table = format_table(reports)
    atomic_write(out / "report.json", dump_json(doc))
    atomic_write(out / "report.txt", table)
    print(table, end="")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "attribute": cmd_pipeline,
        "baseline": cmd_pipeline,
        "replay": cmd_pipeline,
        "synthesize": cmd_synthesize,
        "evaluate": cmd_evaluate,
    }
    try:
        return handlers[args.command](args)
    except CacheMiss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, FileNotFoundError, OSError, ValueError, DetectorFailure, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
