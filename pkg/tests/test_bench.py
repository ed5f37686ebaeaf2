import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from fdebench.bench import (
    BuildConfig,
    ManifestEntry,
    ManifestError,
    SourceRecord,
    assign_splits,
    build_manifest,
    extract_targets,
    read_manifest,
    split_hash,
    validate_manifest,
    write_manifest,
)
from fdebench.depth import BBox, encode_depth
from fdebench.synthetic import make_frame


def test_extract_targets_area_filter():
    ids = np.zeros((100, 100), np.uint16)
    ids[0, :3] = 1  # 3 px < 0.001 * 10000 = 10
    ids[50:70, 10:35] = 2  # 500 px
    targets = extract_targets(ids, 0.001)
    assert [t[0] for t in targets] == [2]
    assert targets[0][2] == BBox(10, 50, 35, 70)
    assert targets[0][1].sum() == 500


def test_extract_targets_threshold_is_inclusive():
    ids = np.zeros((100, 100), np.uint16)
    ids[0, :10] = 5
    assert [t[0] for t in extract_targets(ids, 0.001)] == [5]


def test_extract_targets_background_only():
    assert extract_targets(np.zeros((8, 8), np.uint16)) == []
    with pytest.raises(ValueError):
        extract_targets(np.zeros((8, 8), np.uint16), 0.0)


def test_split_hash_stable():
    assert split_hash(0, "scene") == split_hash(0, "scene")
    assert split_hash(0, "scene") != split_hash(1, "scene")
    assert 0 <= split_hash(7, "x") < 2**64


def test_split_ratio_and_seed():
    keys = [f"group{i}" for i in range(10_000)]
    a = assign_splits(keys, 0.3, seed=0)
    frac = sum(v == "val" for v in a.values()) / len(keys)
    assert abs(frac - 0.3) <= 0.02
    assert assign_splits(reversed(keys), 0.3, seed=0) == a
    b = assign_splits(keys, 0.3, seed=1)
    assert sum(a[k] != b[k] for k in keys) > 1000
    with pytest.raises(ValueError):
        assign_splits(keys, 1.0)


def _write_frame(root: Path, name: str, depth, ids):
    for d in ("images", "depth", "instances"):
        (root / d).mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.zeros(ids.shape + (3,), np.uint8)).save(root / "images" / f"{name}.png")
    encode_depth(root / "depth" / f"{name}.png", depth, "png-16", 0.001)
    Image.fromarray(ids.astype(np.uint16)).save(root / "instances" / f"{name}.png")
    return SourceRecord(f"images/{name}.png", f"depth/{name}.png", f"instances/{name}.png", group_key=name)


@pytest.fixture
def corpus(tmp_path):
    rng = np.random.default_rng(3)
    sources, frames = [], []
    for i in range(6):
        depth, ids = make_frame(rng)
        sources.append(_write_frame(tmp_path, f"f{i}", depth, ids))
        frames.append(ids)
    return tmp_path, sources, frames


def _hand_counts(frames, frac):
    kept = rejected = 0
    for ids in frames:
        for v in set(ids.ravel().tolist()) - {0}:
            if (ids == v).sum() >= frac * ids.size:
                kept += 1
            else:
                rejected += 1
    return kept, rejected


def test_build_counts_match_hand_count(corpus):
    root, sources, frames = corpus
    entries, report = build_manifest(sources, BuildConfig("toy", val_ratio=0.5), base_dir=root)
    kept, rejected = _hand_counts(frames, 0.001)
    assert report.triplets == len(entries) == kept
    assert report.rejected_masks == rejected
    assert report.images == 6 and report.images_with_targets == 6 and report.images_skipped == 0
    assert sum(report.per_split.values()) == kept
    assert all(e.prompt_type == "box" and e.text_prompt is None for e in entries)
    assert [e.triplet_id for e in entries] == sorted(e.triplet_id for e in entries)
    assert all(e.instance_id != 99 for e in entries)  # the 2-pixel speck
    validate_manifest(entries, base_dir=root)


def test_build_with_class_names(corpus):
    root, sources, _ = corpus
    named = [SourceRecord(**{**s.__dict__, "class_names": {1: "mug", 2: "box"}}) for s in sources]
    entries, report = build_manifest(named, BuildConfig("toy"), base_dir=root)
    by_inst = {e.instance_id: e for e in entries}
    assert by_inst[1].text_prompt == "mug" and by_inst[1].prompt_type == "box+text"
    assert by_inst[3].text_prompt is None and by_inst[3].prompt_type == "box"
    assert report.per_prompt_type["box+text"] == sum(e.text_prompt is not None for e in entries)
    assert report.per_category["mug"] == sum(e.text_prompt == "mug" for e in entries)


def test_unreadable_source_is_skipped(corpus):
    root, sources, _ = corpus
    (root / "depth" / "f2.png").write_bytes(b"not a png")
    bad_image = SourceRecord("images/missing.png", "depth/f0.png", "instances/f0.png", "missing")
    entries, report = build_manifest(sources + [bad_image], BuildConfig("toy"), base_dir=root)
    assert report.images_skipped == 2
    assert {e["source"] for e in report.errors} == {"images/f2.png", "images/missing.png"}
    assert not any(e.image_path.endswith("f2.png") for e in entries)


def test_duplicate_triplet_id_is_an_error(corpus):
    root, sources, _ = corpus
    dup = SourceRecord(**{**sources[0].__dict__, "group_key": "other"})
    with pytest.raises(ManifestError, match="duplicate triplet_id"):
        build_manifest([sources[0], dup], BuildConfig("toy"), base_dir=root)


def test_split_file_overrides_hash(corpus):
    root, sources, _ = corpus
    split_map = {s.group_key: "val" for s in sources}
    entries, _ = build_manifest(sources, BuildConfig("toy", split_map=split_map), base_dir=root)
    assert {e.split for e in entries} == {"val"}
    with pytest.raises(ManifestError, match="no entry"):
        build_manifest(sources, BuildConfig("toy", split_map={"f0": "val"}), base_dir=root)


def test_manifest_roundtrip_and_deterministic(corpus, tmp_path):
    root, sources, _ = corpus
    cfg = BuildConfig("toy", seed=4)
    e1, _ = build_manifest(sources, cfg, jobs=1, base_dir=root)
    e2, _ = build_manifest(list(reversed(sources)), cfg, jobs=3, base_dir=root)
    write_manifest(tmp_path / "a.jsonl", e1, cfg)
    write_manifest(tmp_path / "b.jsonl", e2, cfg)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    header, it = read_manifest(tmp_path / "a.jsonl")
    assert header["kind"] == "header" and header["dataset"] == "toy"
    assert list(it) == e1


def test_read_manifest_rejects_missing_header(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"triplet_id": "x"}) + "\n")
    with pytest.raises(ManifestError, match="header"):
        read_manifest(p)


def test_validate_manifest_catches_problems(corpus):
    root, sources, _ = corpus
    entries, _ = build_manifest(sources, BuildConfig("toy"), base_dir=root)
    e = entries[0]
    loose = ManifestEntry(**{**e.__dict__, "bbox": BBox(0, 0, e.bbox.x_max, e.bbox.y_max)})
    with pytest.raises(ManifestError, match="not tight"):
        validate_manifest([loose], base_dir=root)
    leak = ManifestEntry(**{**entries[1].__dict__, "group_key": e.group_key, "split": "val" if e.split == "train" else "train"})
    with pytest.raises(ManifestError, match="both"):
        validate_manifest([e, leak], decode=False)
    with pytest.raises(ManifestError, match="duplicate"):
        validate_manifest([e, e], decode=False)
