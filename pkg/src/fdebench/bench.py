"""Turn RGB-D frames with instance maps into image-target-depth triplet manifests."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np

from . import __version__
from .depth import DEFAULT_METRIC_BOUNDS, BBox, DecodeError, decode_depth, decode_mask, read_instance_map, tight_bbox

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_MIN_AREA_FRAC = 0.001
SPLITS = ("train", "val")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SourceRecord:
    image_path: str
    depth_path: str
    instance_map_path: str
    group_key: str
    class_names: Mapping[int, str] | None = None
    pseudo_mask: bool = False
    name: str = ""  # unique frame name used in triplet ids; defaults to the image stem


@dataclass(frozen=True)
class ManifestEntry:
    triplet_id: str
    dataset: str
    split: str
    group_key: str
    image_path: str
    depth_path: str
    mask_path: str
    depth_format: str
    depth_scale: float
    instance_id: int | None
    bbox: BBox
    text_prompt: str | None
    pseudo_mask: bool
    min_depth: float
    max_depth: float

    @property
    def prompt_type(self) -> str:
        return "box+text" if self.text_prompt else "box"

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["bbox"] = self.bbox.as_list()
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "ManifestEntry":
        d = dict(d)
        d["bbox"] = BBox.from_list(d["bbox"])
        return cls(**d)


@dataclass
class BuildConfig:
    dataset: str
    min_area_frac: float = DEFAULT_MIN_AREA_FRAC
    val_ratio: float = 0.1
    seed: int = 0
    depth_format: str | None = None  # None: inferred from the depth file suffix
    depth_scale: float = 0.001
    min_depth: float = DEFAULT_METRIC_BOUNDS[0]
    max_depth: float = DEFAULT_METRIC_BOUNDS[1]
    split_map: Mapping[str, str] | None = None  # explicit group_key -> split, overrides hashing

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["split_map"] = dict(sorted(self.split_map.items())) if self.split_map else None
        return d


@dataclass
class BuildReport:
    images: int = 0
    images_with_targets: int = 0
    images_skipped: int = 0
    triplets: int = 0
    rejected_masks: int = 0
    per_split: Counter = field(default_factory=Counter)
    per_category: Counter = field(default_factory=Counter)
    per_prompt_type: Counter = field(default_factory=Counter)
    images_per_split: Counter = field(default_factory=Counter)
    errors: list[dict[str, str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "images": self.images,
            "images_with_targets": self.images_with_targets,
            "images_skipped": self.images_skipped,
            "triplets": self.triplets,
            "rejected_masks": self.rejected_masks,
            "images_per_split": dict(sorted(self.images_per_split.items())),
            "triplets_per_split": dict(sorted(self.per_split.items())),
            "prompt_types": dict(sorted(self.per_prompt_type.items())),
            "categories": dict(sorted(self.per_category.items())),
            "errors": sorted(self.errors, key=lambda e: (e["source"], e["error"])),
        }


def extract_targets(instance_map: np.ndarray, min_area_frac: float = DEFAULT_MIN_AREA_FRAC):
    """Instances (ID 0 is background) with at least ``min_area_frac * H * W`` pixels.

    Returns ``[(instance_id, mask, bbox), ...]`` ascending by ID.
    """
    if not 0 < min_area_frac < 1:
        raise ValueError(f"min_area_frac must be in (0, 1), got {min_area_frac}")
    ids = np.asarray(instance_map)
    threshold = min_area_frac * ids.shape[0] * ids.shape[1]
    values, counts = np.unique(ids, return_counts=True)
    out = []
    for inst, count in zip(values.tolist(), counts.tolist()):
        if inst == 0 or count < threshold:
            continue
        mask = ids == inst
        out.append((int(inst), mask, tight_bbox(mask)))
    return out


def split_hash(seed: int, group_key: str) -> int:
    """Stable unsigned 64-bit hash of ``(seed, group_key)``."""
    digest = hashlib.blake2b(f"{seed}\x00{group_key}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def assign_splits(group_keys: Iterable[str], val_ratio: float, seed: int = 0) -> dict[str, str]:
    if not 0 < val_ratio < 1:
        raise ValueError(f"val_ratio must be in (0, 1), got {val_ratio}")
    cut = val_ratio * 2.0**64
    return {key: ("val" if split_hash(seed, key) < cut else "train") for key in sorted(set(group_keys))}


def _infer_format(path: str) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".npy":
        return "npy-f32"
    if suffix == ".png":
        return "png-16"
    raise DecodeError(path, f"cannot infer depth format from suffix {suffix!r}")


def _process_source(src: SourceRecord, config: BuildConfig, base_dir: Path):
    fmt = config.depth_format or _infer_format(src.depth_path)
    if not (base_dir / src.image_path).is_file():
        raise DecodeError(src.image_path, "image not found")
    ids = read_instance_map(base_dir / src.instance_map_path)
    depth = decode_depth(base_dir / src.depth_path, fmt, config.depth_scale)
    if depth.shape != ids.shape:
        raise DecodeError(src.depth_path, f"depth shape {depth.shape} != instance map shape {ids.shape}")
    targets = extract_targets(ids, config.min_area_frac)
    n_instances = int(np.count_nonzero(np.unique(ids) != 0))
    name = src.name or Path(src.image_path).stem
    entries = []
    for inst, _mask, bbox in targets:
        text = None
        if src.class_names:
            text = src.class_names.get(inst)
        entries.append(
            dict(
                triplet_id=f"{config.dataset}/{name}/{inst:05d}",
                dataset=config.dataset,
                group_key=src.group_key,
                image_path=src.image_path,
                depth_path=src.depth_path,
                mask_path=src.instance_map_path,
                depth_format=fmt,
                depth_scale=config.depth_scale,
                instance_id=inst,
                bbox=bbox,
                text_prompt=text,
                pseudo_mask=src.pseudo_mask,
                min_depth=config.min_depth,
                max_depth=config.max_depth,
            )
        )
    return entries, n_instances - len(targets)


def build_manifest(sources: list[SourceRecord], config: BuildConfig, jobs: int = 1, base_dir: str | Path = "."):
    """Build sorted manifest entries and a build report.

    Source paths are stored as given and resolved against ``base_dir``.

    Unreadable sources are skipped and listed in the report; a duplicate
    triplet id is a hard error.
    """
    report = BuildReport(images=len(sources))
    base = Path(base_dir)
    results: list[tuple[SourceRecord, Any]] = []

    def work(src):
        try:
            return src, _process_source(src, config, base)
        except (DecodeError, OSError, ValueError) as exc:
            return src, exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, sources))
    else:
        results = [work(src) for src in sources]

    raw_entries = []
    for src, outcome in results:
        if isinstance(outcome, Exception):
            log.warning("skipping %s: %s", src.image_path, outcome)
            report.images_skipped += 1
            report.errors.append({"source": src.image_path, "error": str(outcome)})
            continue
        entries, rejected = outcome
        report.rejected_masks += rejected
        if not entries:
            log.warning("no retained targets in %s", src.image_path)
            report.images_skipped += 1
            report.errors.append({"source": src.image_path, "error": "no retained targets"})
            continue
        report.images_with_targets += 1
        raw_entries.extend(entries)

    keys = {e["group_key"] for e in raw_entries}
    if config.split_map is not None:
        missing = sorted(keys - set(config.split_map))
        if missing:
            raise ManifestError(f"split file has no entry for group keys {missing[:5]}")
        splits = {k: config.split_map[k] for k in keys}
    else:
        splits = assign_splits(keys, config.val_ratio, config.seed)

    seen: set[str] = set()
    manifest = []
    for e in sorted(raw_entries, key=lambda e: e["triplet_id"]):
        if e["triplet_id"] in seen:
            raise ManifestError(f"duplicate triplet_id {e['triplet_id']}")
        seen.add(e["triplet_id"])
        manifest.append(ManifestEntry(split=splits[e["group_key"]], **e))

    images_by_split: dict[str, set] = {}
    for entry in manifest:
        report.triplets += 1
        report.per_split[entry.split] += 1
        report.per_prompt_type[entry.prompt_type] += 1
        if entry.text_prompt:
            report.per_category[entry.text_prompt] += 1
        images_by_split.setdefault(entry.split, set()).add(entry.image_path)
    report.images_per_split = Counter({k: len(v) for k, v in images_by_split.items()})
    return manifest, report


def manifest_header(config: BuildConfig) -> dict[str, Any]:
    return {
        "kind": "header",
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "dataset": config.dataset,
        "config": config.to_json(),
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_manifest(path: str | Path, entries: list[ManifestEntry], config: BuildConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(manifest_header(config)) + "\n")
        for entry in entries:
            fh.write(_dumps(entry.to_json()) + "\n")


def read_manifest(path: str | Path) -> tuple[dict[str, Any], Iterator[ManifestEntry]]:
    """Header plus a lazy iterator over entries, so large manifests stream."""
    fh = open(path, encoding="utf-8")
    first = fh.readline()
    header = json.loads(first) if first.strip() else {}
    if header.get("kind") != "header":
        fh.close()
        raise ManifestError(f"{path}: missing manifest header line")

    def entries():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    yield ManifestEntry.from_json(json.loads(line))
                except (TypeError, KeyError, ValueError) as exc:
                    raise ManifestError(f"{path}:{lineno}: bad entry ({exc})") from exc

    return header, entries()


def validate_entry(entry: ManifestEntry, base_dir: str | Path = ".") -> np.ndarray:
    """Decode the entry's mask and check it against the recorded box; returns the mask."""
    mask = decode_mask(Path(base_dir) / entry.mask_path, entry.instance_id)
    if not mask.any():
        raise ManifestError(f"{entry.triplet_id}: empty mask")
    if tight_bbox(mask) != entry.bbox:
        raise ManifestError(f"{entry.triplet_id}: bbox {entry.bbox.as_list()} is not tight")
    if entry.split not in SPLITS:
        raise ManifestError(f"{entry.triplet_id}: unknown split {entry.split!r}")
    return mask


def validate_manifest(entries: Iterable[ManifestEntry], decode: bool = True, base_dir: str | Path = ".") -> None:
    """Check id uniqueness, per-group split consistency and (optionally) mask/bbox tightness."""
    ids: set[str] = set()
    split_of: dict[str, str] = {}
    for entry in entries:
        if entry.triplet_id in ids:
            raise ManifestError(f"duplicate triplet_id {entry.triplet_id}")
        ids.add(entry.triplet_id)
        prev = split_of.setdefault(entry.group_key, entry.split)
        if prev != entry.split:
            raise ManifestError(f"group {entry.group_key!r} appears in both {prev} and {entry.split}")
        if decode:
            validate_entry(entry, base_dir)
