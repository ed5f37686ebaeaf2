"""Small synthetic RGB-D corpora for smoke tests and demos."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .depth import encode_depth

CLASS_NAMES = ("mug", "box", "bottle", "bowl")


def make_frame(rng: np.random.Generator, height: int = 48, width: int = 64, n_objects: int = 3):
    """Depth (meters), uint16 instance map and the IDs of placed objects.

    A tilted background plane carries ``n_objects`` nearer discs/rectangles
    plus one 2-pixel speck (ID 99) that an area filter should drop.
    """
    yy, xx = np.mgrid[0:height, 0:width]
    depth = 3.0 + 0.02 * yy + 0.01 * xx
    ids = np.zeros((height, width), np.uint16)
    for k in range(1, n_objects + 1):
        cy, cx = rng.integers(8, height - 8), rng.integers(8, width - 8)
        if k % 2:
            r = rng.integers(4, 9)
            shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hh, ww = rng.integers(4, 9, size=2)
            shape = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
        ids[shape] = k
        depth[shape] = rng.uniform(0.8, 2.0) + 0.01 * (yy[shape] - cy)
    ids[0, :2] = 99
    holes = rng.random((height, width)) < 0.02
    depth[holes] = np.nan
    return depth, ids


def write_corpus(
    root: str | Path,
    n_sequences: int = 10,
    frames_per_sequence: int = 5,
    seed: int = 0,
    depth_format: str = "png-16",
    height: int = 48,
    width: int = 64,
) -> dict[str, Path]:
    """Write ``images/``, ``depth/``, ``instances/`` (``seqNN/frameNN``) and ``classes.json``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    dirs = {name: root / name for name in ("images", "depth", "instances")}
    classes: dict[str, dict[str, str]] = {"*": {}}
    for s in range(n_sequences):
        for f in range(frames_per_sequence):
            stem = f"seq{s:02d}/frame{f:02d}"
            for d in dirs.values():
                (d / stem).parent.mkdir(parents=True, exist_ok=True)
            depth, ids = make_frame(rng, height, width)
            rgb = (rng.random((height, width, 3)) * 255).astype(np.uint8)
            Image.fromarray(rgb).save(dirs["images"] / f"{stem}.png")
            if depth_format == "png-16":
                encode_depth(dirs["depth"] / f"{stem}.png", depth, "png-16", 0.001)
            else:
                encode_depth(dirs["depth"] / f"{stem}.npy", depth, "npy-f32")
            Image.fromarray(ids).save(dirs["instances"] / f"{stem}.png")
            # every other sequence has class labels
            if s % 2 == 0:
                classes[stem] = {str(k): CLASS_NAMES[(k - 1) % len(CLASS_NAMES)] for k in (1, 2, 3)}
    (root / "classes.json").write_text(json.dumps(classes, indent=2, sort_keys=True) + "\n")
    return {**dirs, "classes": root / "classes.json"}


def corrupt_prediction(
    depth: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    inside_noise: float = 0.25,
    outside_noise: float = 0.02,
    scale: float = 0.5,
    shift: float = 0.2,
) -> np.ndarray:
    """Relative-depth prediction: multiplicative noise, stronger inside ``mask``, then an affine distortion."""
    sigma = np.where(mask, inside_noise, outside_noise)
    filled = np.where(np.isfinite(depth), depth, np.nanmedian(depth))
    noisy = filled * np.exp(sigma * rng.standard_normal(depth.shape))
    return (scale * noisy + shift).astype(np.float32)
