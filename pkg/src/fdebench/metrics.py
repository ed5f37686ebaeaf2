"""Scale-shift alignment, per-region delta1/AbsRel, aggregation and table rendering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Mapping

import numpy as np

from .depth import DepthMap, as_mask
from .regions import DEFAULT_RADIUS, region_partition

REGIONS = ("boundary", "foreground", "global")
METRICS = ("delta1", "absrel")
DEFAULT_DELTA_THRESHOLD = 1.25
DISPARITY_CLAMP = 1e-6
_VARIANCE_FLOOR = 1e-12


class NoValidPixels(ValueError):
    pass


def _grid(x) -> np.ndarray:
    if isinstance(x, DepthMap):
        return x.values
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class AlignmentParams:
    a: float = 1.0
    b: float = 0.0
    degenerate_fallback: bool = False
    negative_scale: bool = False

    @property
    def flags(self) -> list[str]:
        out = []
        if self.degenerate_fallback:
            out.append("degenerate_fallback")
        if self.negative_scale:
            out.append("negative_scale")
        return out

    def to_json(self) -> dict[str, Any]:
        return {"a": self.a, "b": self.b, "flags": self.flags}


def fit_scale_shift(pred, gt, valid) -> AlignmentParams:
    """Least-squares ``(a, b)`` minimising ``sum((a * pred + b - gt)^2)`` over valid pixels.

    Falls back to ``a=1, b=mean(gt)-mean(pred)`` when fewer than two pixels are
    valid or the prediction has (near) zero variance there.
    """
    pred = _grid(pred)
    gt = _grid(gt)
    valid = as_mask(valid)
    if not (pred.shape == gt.shape == valid.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    p = pred[valid]
    g = gt[valid]
    if p.size == 0:
        raise NoValidPixels("no valid pixels")
    p_mean = p.mean()
    g_mean = g.mean()
    pc = p - p_mean
    var = np.dot(pc, pc) / p.size
    if p.size < 2 or not var >= _VARIANCE_FLOOR:
        return AlignmentParams(1.0, float(g_mean - p_mean), degenerate_fallback=True)
    # centred normal equations: a = cov(p, g) / var(p), b = mean(g) - a mean(p)
    a = np.dot(pc, g - g_mean) / p.size / var
    b = g_mean - a * p_mean
    return AlignmentParams(float(a), float(b), negative_scale=bool(a < 0))


def apply_alignment(pred, params: AlignmentParams) -> np.ndarray:
    return params.a * _grid(pred) + params.b


@dataclass(frozen=True)
class RegionMetrics:
    delta1: float | None
    absrel: float | None
    n_pixels: int

    def to_json(self) -> dict[str, Any]:
        return {"delta1": self.delta1, "absrel": self.absrel, "n_pixels": self.n_pixels}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "RegionMetrics":
        return cls(d.get("delta1"), d.get("absrel"), int(d.get("n_pixels", 0)))


def delta1(pred_aligned, gt, region, threshold: float = DEFAULT_DELTA_THRESHOLD) -> float | None:
    """Fraction of region pixels with ``max(p/g, g/p) < threshold``; nonpositive ``p`` always fails."""
    region = as_mask(region)
    n = int(region.sum())
    if n == 0:
        return None
    p = _grid(pred_aligned)[region]
    g = _grid(gt)[region]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
        hit = (p > 0) & (ratio < threshold)
    return float(np.count_nonzero(hit) / n)


def absrel(pred_aligned, gt, region) -> float | None:
    region = as_mask(region)
    if not region.any():
        return None
    p = _grid(pred_aligned)[region]
    g = _grid(gt)[region]
    return float(np.mean(np.abs(p - g) / g))


@dataclass(frozen=True)
class EvalConfig:
    radius: int = DEFAULT_RADIUS
    pred_space: str = "depth"  # depth | disparity
    alignment_mode: str = "affine"  # affine | none
    delta_threshold: float = DEFAULT_DELTA_THRESHOLD
    band_shape: str = "disk"

    def __post_init__(self) -> None:
        if self.pred_space not in ("depth", "disparity"):
            raise ValueError(f"unknown pred_space {self.pred_space!r}")
        if self.alignment_mode not in ("affine", "none"):
            raise ValueError(f"unknown alignment_mode {self.alignment_mode!r}")

    def to_json(self) -> dict[str, Any]:
        return {
            "radius": self.radius,
            "pred_space": self.pred_space,
            "alignment_mode": self.alignment_mode,
            "delta_threshold": self.delta_threshold,
            "band_shape": self.band_shape,
        }


@dataclass
class TripletResult:
    triplet_id: str
    regions: dict[str, RegionMetrics] = field(default_factory=dict)
    alignment: AlignmentParams | None = None
    dataset: str = ""
    prompt_type: str = ""
    error: str | None = None

    @property
    def boundary(self) -> RegionMetrics:
        return self.regions["boundary"]

    @property
    def foreground(self) -> RegionMetrics:
        return self.regions["foreground"]

    @property
    def global_(self) -> RegionMetrics:
        return self.regions["global"]

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "triplet_id": self.triplet_id,
            "dataset": self.dataset,
            "prompt_type": self.prompt_type,
        }
        if self.error is not None:
            out["error"] = self.error
            return out
        out["alignment"] = self.alignment.to_json()
        out["regions"] = {name: self.regions[name].to_json() for name in REGIONS}
        return out

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "TripletResult":
        if "error" in d:
            return cls(d["triplet_id"], dataset=d.get("dataset", ""), prompt_type=d.get("prompt_type", ""), error=d["error"])
        al = d["alignment"]
        flags = set(al.get("flags", ()))
        return cls(
            d["triplet_id"],
            {name: RegionMetrics.from_json(d["regions"][name]) for name in REGIONS},
            AlignmentParams(al["a"], al["b"], "degenerate_fallback" in flags, "negative_scale" in flags),
            d.get("dataset", ""),
            d.get("prompt_type", ""),
        )


def evaluate_triplet(pred, gt, mask, valid, config: EvalConfig = EvalConfig(), triplet_id: str = "") -> TripletResult:
    """Align the prediction over the whole valid image, then score each region.

    With ``pred_space="disparity"`` the prediction is fitted against ``1/gt``
    and the aligned disparity is inverted (clamped at 1e-6) before scoring.
    Images without valid pixels come back as an error record.
    """
    pred = _grid(pred)
    gt = _grid(gt)
    valid = as_mask(valid)
    mask = as_mask(mask)
    if not (pred.shape == gt.shape == valid.shape == mask.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}, valid {valid.shape}")
    if not valid.any():
        return TripletResult(triplet_id, error="no valid pixels")

    if config.alignment_mode == "none":
        params = AlignmentParams()
        aligned = pred if config.pred_space == "depth" else 1.0 / np.maximum(pred, DISPARITY_CLAMP)
    elif config.pred_space == "depth":
        params = fit_scale_shift(pred, gt, valid)
        aligned = apply_alignment(pred, params)
    else:
        gt_disp = np.full_like(gt, np.nan)
        gt_disp[valid] = 1.0 / gt[valid]
        params = fit_scale_shift(pred, gt_disp, valid)
        aligned = 1.0 / np.maximum(apply_alignment(pred, params), DISPARITY_CLAMP)

    regions = region_partition(mask, valid, config.radius, config.band_shape)
    scored = {}
    for name, region in regions.items():
        scored[name] = RegionMetrics(
            delta1(aligned, gt, region, config.delta_threshold),
            absrel(aligned, gt, region),
            int(region.sum()),
        )
    return TripletResult(triplet_id, scored, params)


@dataclass(frozen=True)
class AggregateStats:
    median: float | None
    q25: float | None
    q75: float | None
    mean: float | None
    count: int
    statistic_mode: str = "median-quartiles"

    def to_json(self) -> dict[str, Any]:
        return {
            "median": self.median,
            "q25": self.q25,
            "q75": self.q75,
            "mean": self.mean,
            "count": self.count,
            "statistic_mode": self.statistic_mode,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "AggregateStats":
        return cls(d["median"], d["q25"], d["q75"], d["mean"], int(d["count"]), d.get("statistic_mode", "median-quartiles"))


STAT_MODES = ("median-quartiles", "mean")


def aggregate(values, mode: str = "median-quartiles") -> AggregateStats:
    """Median and quartiles (linear interpolation at ``h=(n-1)q``) plus the mean."""
    if mode not in STAT_MODES:
        raise ValueError(f"unknown statistic mode {mode!r}")
    xs = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if xs.size == 0:
        return AggregateStats(None, None, None, None, 0, mode)
    q25, median, q75 = np.quantile(xs, [0.25, 0.5, 0.75], method="linear")
    return AggregateStats(float(median), float(q25), float(q75), float(np.mean(np.sort(xs))), int(xs.size), mode)


def round3(x: float) -> str:
    """Round half away from zero to 3 decimals, using the shortest decimal repr of ``x``."""
    if not math.isfinite(x):
        return str(x)
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def format_cell(stats: AggregateStats | None, metric: str) -> str:
    if stats is None or stats.count == 0:
        return "-"
    if stats.statistic_mode == "mean":
        return round3(stats.mean)
    if metric == "delta1":
        return f"{round3(stats.median)} ({round3(stats.q25)}, {round3(stats.q75)})"
    return round3(stats.median)


_HEADERS = {
    ("boundary", "delta1"): "Boundary δ1",
    ("boundary", "absrel"): "Boundary AbsRel",
    ("foreground", "delta1"): "Foreground δ1",
    ("foreground", "absrel"): "Foreground AbsRel",
    ("global", "delta1"): "Global δ1",
    ("global", "absrel"): "Global AbsRel",
}


def render_report(stats: Mapping[str, Mapping[str, Mapping[str, Mapping[str, AggregateStats]]]], format: str = "markdown") -> str:
    """Render ``dataset -> method -> region -> metric -> stats`` as a table.

    Columns follow boundary / foreground / global, each with delta1 and AbsRel;
    rows are sorted by dataset, then method.
    """
    columns = [(r, m) for r in REGIONS for m in METRICS]
    header = ["Dataset", "Method"] + [_HEADERS[c] for c in columns]
    rows = []
    for dataset in sorted(stats):
        for method in sorted(stats[dataset]):
            by_region = stats[dataset][method]
            cells = [format_cell(by_region.get(r, {}).get(m), m) for r, m in columns]
            rows.append([dataset, method] + cells)

    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if format != "markdown":
        raise ValueError(f"unknown report format {format!r}")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"
