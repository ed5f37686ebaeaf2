"""Depth/mask decoding, validity masks and bounding boxes.

Depth grids are kept as float64 ``(H, W)`` arrays, masks as boolean ``(H, W)``
arrays. Missing depth is represented by NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_FORMATS = ("npy-f32", "png-16")
UNIT_TAGS = ("metric", "relative", "disparity")

# Validity bounds used when the manifest does not override them.
DEFAULT_METRIC_BOUNDS = (0.01, 80.0)
DEFAULT_RELATIVE_BOUNDS = (1e-6, float("inf"))


class DecodeError(ValueError):
    """A depth or mask file could not be decoded."""

    def __init__(self, path: str | Path, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray  # (H, W) float64; NaN/Inf allowed, never valid
    unit_tag: str = "metric"

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"depth grid must be 2-D, got shape {values.shape}")
        if self.unit_tag not in UNIT_TAGS:
            raise ValueError(f"unknown unit tag {self.unit_tag!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box: ``x_max``/``y_max`` are exclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values) -> "BBox":
        x_min, y_min, x_max, y_max = (int(v) for v in values)
        return cls(x_min, y_min, x_max, y_max)

    def check(self, width: int, height: int) -> None:
        if not (0 <= self.x_min < self.x_max <= width and 0 <= self.y_min < self.y_max <= height):
            raise ValueError(f"bbox {self.as_list()} outside {width}x{height} image")


def as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            arr = np.array(img)
    except (OSError, ValueError) as exc:
        raise DecodeError(path, f"unreadable image ({exc})") from exc
    return arr


def decode_depth(
    path: str | Path,
    format: str,
    depth_scale: float = 1.0,
    *,
    unit_tag: str = "metric",
    expected_shape: tuple[int, int] | None = None,
) -> DepthMap:
    """Load a depth grid.

    ``png-16`` counts are multiplied by ``depth_scale`` and count 0 becomes NaN.
    ``npy-f32`` grids are widened to float64 unchanged.
    """
    path = Path(path)
    if not path.is_file():
        raise DecodeError(path, "file not found")
    if format == "npy-f32":
        try:
            raw = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise DecodeError(path, f"malformed npy ({exc})") from exc
        if raw.ndim != 2:
            raise DecodeError(path, f"expected a 2-D grid, got shape {raw.shape}")
        if raw.dtype != np.float32:
            raise DecodeError(path, f"expected float32, got {raw.dtype}")
        values = raw.astype(np.float64)
    elif format == "png-16":
        raw = _read_image(path)
        if raw.ndim != 2 or raw.dtype != np.uint16:
            raise DecodeError(path, f"expected single-channel 16-bit png, got {raw.dtype} {raw.shape}")
        values = raw.astype(np.float64) * float(depth_scale)
        values[raw == 0] = np.nan
    else:
        raise DecodeError(path, f"unknown depth format {format!r}")
    if expected_shape is not None and values.shape != tuple(expected_shape):
        raise DecodeError(path, f"shape {values.shape} does not match expected {tuple(expected_shape)}")
    return DepthMap(values, unit_tag)


def encode_depth(path: str | Path, values: np.ndarray, format: str, depth_scale: float = 1.0) -> None:
    """Write a depth grid in one of the decodable formats (inverse of :func:`decode_depth`)."""
    values = np.asarray(values)
    if format == "npy-f32":
        np.save(path, np.ascontiguousarray(values, dtype="<f4"), allow_pickle=False)
    elif format == "png-16":
        counts = np.where(np.isfinite(values), np.rint(np.nan_to_num(values) / depth_scale), 0)
        counts = np.clip(counts, 0, 65535).astype(np.uint16)
        Image.fromarray(counts).save(path)
    else:
        raise ValueError(f"unknown depth format {format!r}")


def decode_mask(path: str | Path, instance_id: int | None = None) -> np.ndarray:
    """Decode a binary mask (8-bit, nonzero is true) or one instance of a 16-bit ID map."""
    path = Path(path)
    if not path.is_file():
        raise DecodeError(path, "file not found")
    raw = _read_image(path)
    if raw.ndim != 2:
        raise DecodeError(path, f"expected single-channel image, got shape {raw.shape}")
    if raw.dtype == np.uint8 or raw.dtype == bool:
        if instance_id is not None:
            raise DecodeError(path, "instance_id given for an 8-bit mask")
        return raw != 0
    if raw.dtype in (np.uint16, np.int32, np.uint32):
        if instance_id is None:
            raise DecodeError(path, "16-bit instance map requires instance_id")
        mask = raw == instance_id
        if not mask.any():
            raise DecodeError(path, f"instance absent: {instance_id}")
        return mask
    raise DecodeError(path, f"unsupported mask dtype {raw.dtype}")


def read_instance_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DecodeError(path, "file not found")
    raw = _read_image(path)
    if raw.ndim != 2 or raw.dtype not in (np.uint16, np.int32, np.uint32):
        raise DecodeError(path, f"expected single-channel 16-bit instance map, got {raw.dtype} {raw.shape}")
    return raw.astype(np.int64)


def compute_valid(depth: DepthMap | np.ndarray, min_depth: float, max_depth: float) -> np.ndarray:
    """True where depth is finite and within ``[min_depth, max_depth]``."""
    if not min_depth > 0 or not max_depth > min_depth:
        raise ValueError(f"invalid depth bounds [{min_depth}, {max_depth}]")
    values = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.isfinite(values) & (values >= min_depth) & (values <= max_depth)


def tight_bbox(mask) -> BBox:
    mask = as_mask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise ValueError("tight_bbox of an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
