"""Command-line entry point: ``fdebench {build,evaluate,aggregate,report,kernel-check}``.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from . import __version__
from .bench import (
    DEFAULT_MIN_AREA_FRAC,
    BuildConfig,
    ManifestEntry,
    ManifestError,
    SourceRecord,
    build_manifest,
    read_manifest,
    write_manifest,
)
from .depth import DecodeError, compute_valid, decode_depth, decode_mask
from .metrics import (
    METRICS,
    REGIONS,
    AggregateStats,
    EvalConfig,
    TripletResult,
    aggregate,
    evaluate_triplet,
    render_report,
)
from .regions import BAND_SHAPES, DEFAULT_RADIUS

log = logging.getLogger("fdebench")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class DataError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _meta(kind: str, config: dict[str, Any]) -> dict[str, Any]:
    return {"type": kind, "tool_version": __version__, "config": config}


def _header(kind: str, config: dict[str, Any]) -> dict[str, Any]:
    """First line of a JSON-lines output file."""
    return {"kind": "header", **_meta(kind, config)}


# --------------------------------------------------------------------------- build


def _index_by_stem(root: Path, suffixes: Sequence[str]) -> dict[str, Path]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.suffix.lower() in suffixes:
            out[path.relative_to(root).with_suffix("").as_posix()] = path
    return out


def _load_classes(path: str | None) -> dict[str, dict[int, str]]:
    """``{"*": {id: name}, "<rel stem>": {id: name}}``; per-frame maps override ``*``."""
    if not path:
        return {}
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {key: {int(k): str(v) for k, v in table.items()} for key, table in raw.items()}


def discover_sources(
    images: Path, depth: Path, instances: Path, classes: dict[str, dict[int, str]], group_by: str, out_dir: Path, pseudo_mask: bool
) -> list[SourceRecord]:
    """Pair instance maps with depth and RGB files sharing a relative path stem."""
    image_idx = _index_by_stem(images, (".png", ".jpg", ".jpeg"))
    depth_idx = _index_by_stem(depth, (".png", ".npy"))
    sources = []
    for stem, inst_path in _index_by_stem(instances, (".png",)).items():
        parent = Path(stem).parent.as_posix()
        if group_by == "stem" or parent == ".":
            group = stem
        else:
            group = parent
        names = dict(classes.get("*", {}))
        names.update(classes.get(stem, {}))
        img = image_idx.get(stem, images / (stem + ".png"))
        dep = depth_idx.get(stem, depth / (stem + ".npy"))
        sources.append(
            SourceRecord(
                image_path=os.path.relpath(img, out_dir),
                depth_path=os.path.relpath(dep, out_dir),
                instance_map_path=os.path.relpath(inst_path, out_dir),
                group_key=group,
                class_names=names or None,
                pseudo_mask=pseudo_mask,
                name=stem,
            )
        )
    return sources


def cmd_build(args) -> int:
    out = Path(args.out)
    out_dir = out.parent.resolve()
    split_map = None
    if args.split_file:
        split_map = json.loads(Path(args.split_file).read_text(encoding="utf-8"))
    config = BuildConfig(
        dataset=args.dataset,
        min_area_frac=args.min_area_frac,
        val_ratio=args.val_ratio,
        seed=args.seed,
        depth_format=args.depth_format,
        depth_scale=args.depth_scale,
        min_depth=args.min_depth,
        max_depth=args.max_depth,
        split_map=split_map,
    )
    for d in (args.images, args.depth, args.instances):
        if not Path(d).is_dir():
            raise DataError(f"not a directory: {d}")
    sources = discover_sources(
        Path(args.images).resolve(),
        Path(args.depth).resolve(),
        Path(args.instances).resolve(),
        _load_classes(args.classes),
        args.group_by,
        out_dir,
        args.pseudo_mask,
    )
    entries, report = build_manifest(sources, config, jobs=args.jobs, base_dir=out_dir)
    write_manifest(out, entries, config)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    report_doc = {**_meta("build-report", config.to_json()), **report.to_json()}
    report_path.write_text(json.dumps(report_doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"{report.triplets} triplets from {report.images_with_targets}/{report.images} images -> {out}", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------------ evaluate


@dataclass(frozen=True)
class PredictionRef:
    pred_path: str
    pred_space: str = "depth"
    format: str = "npy-f32"
    scale: float = 1.0


class PredictionsIndex:
    """Maps triplets to prediction files.

    Keys may be a triplet id (prompt-conditioned prediction) or an image-level
    key (the entry's ``image_path`` or ``group_key``); triplet-level keys win.
    """

    def __init__(self, entries: dict[str, PredictionRef]):
        self.entries = entries

    @classmethod
    def load(cls, path: str | Path) -> "PredictionsIndex":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        raw = raw.get("entries", raw)
        base = path.parent
        entries = {}
        for key, item in raw.items():
            if isinstance(item, str):
                item = {"pred_path": item}
            pred_path = Path(item["pred_path"])
            if not pred_path.is_absolute():
                pred_path = (base / pred_path).resolve()
            entries[key] = PredictionRef(
                str(pred_path), item.get("pred_space", "depth"), item.get("format", "npy-f32"), float(item.get("scale", 1.0))
            )
        return cls(entries)

    def resolve(self, entry: ManifestEntry) -> PredictionRef:
        for key in (entry.triplet_id, entry.image_path, entry.group_key):
            if key in self.entries:
                return self.entries[key]
        raise DataError(f"no prediction for {entry.triplet_id}")


def _resolve(base: Path, p: str) -> str:
    path = Path(p)
    return str(path if path.is_absolute() else base / path)


def _evaluate_one(task) -> dict[str, Any]:
    entry, ref, base, config, pred_space_override = task
    record = {"triplet_id": entry.triplet_id, "dataset": entry.dataset, "prompt_type": entry.prompt_type}
    try:
        if ref is None:
            raise DataError("no prediction for triplet")
        gt = decode_depth(_resolve(base, entry.depth_path), entry.depth_format, entry.depth_scale)
        valid = compute_valid(gt, entry.min_depth, entry.max_depth)
        mask = decode_mask(_resolve(base, entry.mask_path), entry.instance_id)
        pred = decode_depth(ref.pred_path, ref.format, ref.scale, unit_tag="relative", expected_shape=gt.shape)
        if mask.shape != gt.shape:
            raise DataError(f"mask shape {mask.shape} != depth shape {gt.shape}")
        space = pred_space_override or ref.pred_space
        cfg = config if space == config.pred_space else EvalConfig(**{**config.to_json(), "pred_space": space})
        result = evaluate_triplet(pred, gt, mask, valid, cfg, entry.triplet_id)
    except (DecodeError, DataError, OSError, ValueError) as exc:
        return {**record, "error": str(exc)}
    result.dataset = entry.dataset
    result.prompt_type = entry.prompt_type
    return result.to_json()


def _jobs(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("FDE_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FDE_JOBS must be an integer, got {env!r}") from None
    return 1


class UsageError(Exception):
    pass


def cmd_evaluate(args) -> int:
    manifest_path = Path(args.manifest)
    try:
        _header_line, entries = read_manifest(manifest_path)
        index = PredictionsIndex.load(args.predictions)
    except (OSError, ValueError, ManifestError) as exc:
        raise DataError(str(exc)) from exc
    config = EvalConfig(
        radius=args.radius,
        pred_space=args.pred_space or "depth",
        alignment_mode=args.alignment,
        delta_threshold=args.delta_threshold,
        band_shape=args.band_shape,
    )
    base = manifest_path.resolve().parent

    def tasks() -> Iterator:
        for entry in entries:
            try:
                ref = index.resolve(entry)
            except DataError:
                ref = None
            yield entry, ref, base, config, args.pred_space

    jobs = _jobs(args.jobs)
    echo = {**config.to_json(), "pred_space_override": args.pred_space, "manifest": args.manifest, "predictions": args.predictions}
    n_ok = n_err = 0
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(_header("results", echo)) + "\n")
        if jobs > 1:
            pool = ProcessPoolExecutor(max_workers=jobs)
            results: Iterable = pool.map(_evaluate_one, tasks(), chunksize=16)
        else:
            pool = None
            results = map(_evaluate_one, tasks())
        try:
            # manifest entries are sorted by triplet_id and map preserves order
            for rec in results:
                if "error" in rec:
                    n_err += 1
                else:
                    n_ok += 1
                fh.write(_dumps(rec) + "\n")
        finally:
            if pool is not None:
                pool.shutdown()
    print(f"evaluated {n_ok} triplets, {n_err} errors -> {args.out}", file=sys.stderr)
    if n_ok == 0 and n_err > 0:
        return EXIT_DATA
    return EXIT_OK


# ----------------------------------------------------------------------- aggregate


def read_results(path: str | Path) -> tuple[dict[str, Any], list[TripletResult]]:
    header: dict[str, Any] = {}
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("kind") == "header":
                header = d
                continue
            results.append(TripletResult.from_json(d))
    return header, results


def aggregate_results(results: Iterable[TripletResult], mode: str, method: str) -> tuple[dict, list]:
    """``dataset -> "method (prompt_type)" -> region -> metric -> AggregateStats`` plus error records."""
    values: dict[tuple, list[float]] = defaultdict(list)
    errors = []
    for res in sorted(results, key=lambda r: r.triplet_id):
        if res.error is not None:
            errors.append({"triplet_id": res.triplet_id, "error": res.error})
            continue
        label = f"{method} ({res.prompt_type})" if res.prompt_type else method
        for region in REGIONS:
            rm = res.regions[region]
            for metric in METRICS:
                v = getattr(rm, metric)
                key = (res.dataset, label, region, metric)
                values.setdefault(key, [])
                if v is not None:
                    values[key].append(v)
    stats: dict = {}
    for (dataset, label, region, metric), vals in sorted(values.items()):
        stats.setdefault(dataset, {}).setdefault(label, {}).setdefault(region, {})[metric] = aggregate(vals, mode)
    return stats, errors


def _stats_to_json(stats: dict) -> dict:
    return {
        ds: {m: {r: {k: v.to_json() for k, v in metrics.items()} for r, metrics in regions.items()} for m, regions in methods.items()}
        for ds, methods in stats.items()
    }


def _stats_from_json(doc: dict) -> dict:
    return {
        ds: {m: {r: {k: AggregateStats.from_json(v) for k, v in metrics.items()} for r, metrics in regions.items()} for m, regions in methods.items()}
        for ds, methods in doc.items()
    }


def cmd_aggregate(args) -> int:
    mode = "mean" if args.stat == "mean" else "median-quartiles"
    all_results = []
    for path in args.results:
        try:
            _, res = read_results(path)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        all_results.extend(res)
    stats, errors = aggregate_results(all_results, mode, args.method)
    doc = {
        **_meta("stats", {"stat": args.stat, "method": args.method, "results": list(args.results)}),
        "stats": _stats_to_json(stats),
        "errors": errors,
    }
    text = json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -------------------------------------------------------------------------- report


def cmd_report(args) -> int:
    merged: dict = {}
    for path in args.stats:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        for ds, methods in _stats_from_json(doc["stats"]).items():
            merged.setdefault(ds, {}).update(methods)
    text = render_report(merged, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -------------------------------------------------------------------- kernel-check


def cmd_kernel_check(args) -> int:
    from .checks import run_all

    report = run_all(args.seed)
    text = json.dumps({**_meta("kernel-check", {"seed": args.seed}), **report}, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    for suite in report["suites"]:
        print(f"{'PASS' if suite['passed'] else 'FAIL'}  {suite['name']}  ({suite['seconds']:.2f}s)", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_DATA


# ---------------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fdebench", description="Target-centric monocular depth benchmark tooling.")
    p.add_argument("--version", action="version", version=f"fdebench {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build", help="build a triplet manifest from RGB-D frames and instance maps")
    b.add_argument("--images", required=True, help="RGB image directory")
    b.add_argument("--depth", required=True, help="depth directory (.npy float32 or 16-bit .png)")
    b.add_argument("--instances", required=True, help="16-bit instance-ID map directory")
    b.add_argument("--classes", help="JSON {'*' or rel stem: {instance_id: class name}}")
    b.add_argument("--dataset", required=True)
    b.add_argument("--min-area-frac", type=float, default=DEFAULT_MIN_AREA_FRAC)
    b.add_argument("--val-ratio", type=float, default=0.1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--group-by", choices=("parent", "stem"), default="parent", help="split unit: sequence directory or frame")
    b.add_argument("--split-file", help="JSON {group_key: train|val}; replaces hash-based splits")
    b.add_argument("--depth-format", choices=("npy-f32", "png-16"), help="default: inferred from suffix")
    b.add_argument("--depth-scale", type=float, default=0.001, help="meters per png-16 count")
    b.add_argument("--min-depth", type=float, default=0.01)
    b.add_argument("--max-depth", type=float, default=80.0)
    b.add_argument("--pseudo-mask", action="store_true", help="mark masks as automatically generated")
    b.add_argument("--jobs", type=int, default=None)
    b.add_argument("--out", required=True, help="manifest .jsonl path")
    b.add_argument("--report", help="build report path (default: manifest path with a .report.json suffix)")
    b.set_defaults(func=cmd_build)

    e = sub.add_parser("evaluate", help="score predictions for every manifest triplet")
    e.add_argument("--manifest", required=True)
    e.add_argument("--predictions", required=True, help="JSON {triplet_id | image_path | group_key: {pred_path, ...}}")
    e.add_argument("--radius", type=int, default=DEFAULT_RADIUS)
    e.add_argument("--delta-threshold", type=float, default=1.25)
    e.add_argument("--pred-space", choices=("depth", "disparity"), default=None, help="override per-prediction space")
    e.add_argument("--alignment", choices=("affine", "none"), default="affine")
    e.add_argument("--band-shape", choices=BAND_SHAPES, default="disk")
    e.add_argument("--jobs", type=int, default=None, help="worker processes (default: $FDE_JOBS or 1)")
    e.add_argument("--out", required=True, help="results .jsonl path")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("aggregate", help="per-target statistics over results files")
    a.add_argument("--results", required=True, nargs="+")
    a.add_argument("--stat", choices=("median", "mean"), default="median")
    a.add_argument("--method", default="method", help="method label for the report rows")
    a.add_argument("--out")
    a.set_defaults(func=cmd_aggregate)

    r = sub.add_parser("report", help="render stats files as a table")
    r.add_argument("--stats", required=True, nargs="+")
    r.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    k = sub.add_parser("kernel-check", help="run gradient checks and oracle suites")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out")
    k.set_defaults(func=cmd_kernel_check)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", None) is None and hasattr(args, "jobs"):
            args.jobs = _jobs(None)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"fdebench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError, DecodeError) as exc:
        print(f"fdebench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


def main() -> None:
    sys.exit(run())
