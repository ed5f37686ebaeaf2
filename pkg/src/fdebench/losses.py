"""Region-aware training objective with analytic gradients.

``total = L_glb + L_fg + L_bd + L_seg`` where each depth term is a masked MSE
plus a weighted forward-difference gradient loss on the aligned prediction,
and ``L_seg`` is BCE + Dice on the predicted mask probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Any

import numpy as np

from .depth import DepthMap, as_mask
from .metrics import AlignmentParams, NoValidPixels, fit_scale_shift
from .oracles import central_difference, relative_error
from .regions import DEFAULT_RADIUS, region_partition

DEPTH_TERMS = ("l_glb", "l_fg", "l_bd")


@dataclass(frozen=True)
class LossConfig:
    grad_weight: float = 0.5
    disparity_space: bool = False
    disparity_floor: float = 1e-3
    prob_clamp: float = 1e-7
    dice_eps: float = 1.0
    radius: int = DEFAULT_RADIUS
    # set a term to False to drop it from the total (ablation arms)
    use_fg: bool = True
    use_bd: bool = True
    use_seg: bool = True

    def __post_init__(self) -> None:
        if self.grad_weight < 0:
            raise ValueError("grad_weight must be >= 0")
        if not 0 < self.prob_clamp < 0.5:
            raise ValueError("prob_clamp must be in (0, 0.5)")
        if self.disparity_floor <= 0:
            raise ValueError("disparity_floor must be > 0")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def _grid(x) -> np.ndarray:
    # float64, except that extended-precision input is kept (used by the gradient checker)
    if isinstance(x, DepthMap):
        return x.values
    x = np.asarray(x)
    return x if x.dtype == np.longdouble else x.astype(np.float64)


def to_disparity(depth, floor: float = 1e-3) -> np.ndarray:
    """``1 / max(d, floor)``; NaN stays NaN."""
    if floor <= 0:
        raise ValueError("floor must be > 0")
    d = _grid(depth)
    with np.errstate(invalid="ignore"):
        return 1.0 / np.maximum(d, floor)


def _disparity_grad(depth: np.ndarray, floor: float) -> np.ndarray:
    # derivative of 1 / max(d, floor); zero on the clamped side
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(depth > floor, -1.0 / (depth * depth), 0.0)


def depth_region_loss(pred_aligned, gt, region, config: LossConfig = LossConfig()):
    """Masked MSE plus ``grad_weight`` times the mean absolute forward difference of the residual.

    A horizontal/vertical pair contributes only when both pixels are inside
    ``region``; horizontal and vertical pairs are pooled into one mean.
    Returns ``(value, gradient)`` with the gradient zero outside the region.
    """
    pred = _grid(pred_aligned)
    gt = _grid(gt)
    region = as_mask(region)
    grad = np.zeros_like(pred)
    n = int(region.sum())
    if n == 0:
        return 0.0, grad
    resid = np.where(region, pred - np.where(region, gt, 0.0), 0.0)
    value = np.sum(resid[region] ** 2) / n
    grad += np.where(region, 2.0 * resid / n, 0.0)

    if config.grad_weight > 0:
        pair_x = region[:, 1:] & region[:, :-1]
        pair_y = region[1:, :] & region[:-1, :]
        n_pairs = int(pair_x.sum() + pair_y.sum())
        if n_pairs:
            dx = resid[:, 1:] - resid[:, :-1]
            dy = resid[1:, :] - resid[:-1, :]
            value += config.grad_weight * (np.abs(dx[pair_x]).sum() + np.abs(dy[pair_y]).sum()) / n_pairs
            sx = np.where(pair_x, np.sign(dx), 0.0) * (config.grad_weight / n_pairs)
            sy = np.where(pair_y, np.sign(dy), 0.0) * (config.grad_weight / n_pairs)
            grad[:, 1:] += sx
            grad[:, :-1] -= sx
            grad[1:, :] += sy
            grad[:-1, :] -= sy
    return value, grad


def seg_loss(pred_mask, gt_mask, config: LossConfig = LossConfig()):
    """Mean BCE on clamped probabilities plus soft Dice loss; returns ``(value, gradient)``."""
    p = _grid(pred_mask)
    m = as_mask(gt_mask).astype(p.dtype)
    if p.shape != m.shape:
        raise ValueError(f"pred mask shape {p.shape} != gt mask shape {m.shape}")
    if not (np.all(p >= 0.0) and np.all(p <= 1.0)):
        raise ValueError("mask probabilities must lie in [0, 1]")
    eps = config.prob_clamp
    pc = np.clip(p, eps, 1.0 - eps)
    n = p.size
    bce = -np.sum(m * np.log(pc) + (1.0 - m) * np.log1p(-pc)) / n
    inside = (p > eps) & (p < 1.0 - eps)
    d_bce = np.where(inside, (-m / pc + (1.0 - m) / (1.0 - pc)) / n, 0.0)

    inter = np.sum(p * m)
    union = np.sum(p) + np.sum(m)
    e = config.dice_eps
    dice = 1.0 - (2.0 * inter + e) / (union + e)
    d_dice = -(2.0 * m * (union + e) - (2.0 * inter + e)) / (union + e) ** 2
    return bce + dice, d_bce + d_dice


@dataclass
class LossBreakdown:
    l_fg: float
    l_bd: float
    l_glb: float
    l_seg: float
    total: float
    counts: dict[str, int]
    alignment: AlignmentParams
    grad_depth: np.ndarray  # d total / d pred_depth, (a, b) held fixed
    grad_mask: np.ndarray  # d total / d pred_mask

    def to_json(self) -> dict[str, Any]:
        return {
            "l_fg": float(self.l_fg),
            "l_bd": float(self.l_bd),
            "l_glb": float(self.l_glb),
            "l_seg": float(self.l_seg),
            "total": float(self.total),
            "counts": self.counts,
            "alignment": self.alignment.to_json(),
        }


def total_objective(
    pred_depth,
    pred_mask,
    gt_depth,
    gt_mask,
    valid,
    config: LossConfig = LossConfig(),
    alignment: AlignmentParams | None = None,
) -> LossBreakdown:
    """Full objective and its gradients.

    The scale/shift fit is treated as a constant: pass ``alignment`` to pin it
    (this is what the finite-difference checker does), otherwise it is fitted
    over ``valid``.
    """
    pred = _grid(pred_depth)
    gt = _grid(gt_depth)
    valid = as_mask(valid)
    gt_mask = as_mask(gt_mask)
    if not (pred.shape == gt.shape == valid.shape == gt_mask.shape):
        raise ValueError("pred, gt, mask and valid must share dimensions")
    if not valid.any():
        raise NoValidPixels("no valid pixels")

    regions = region_partition(gt_mask, valid, config.radius)
    if config.disparity_space:
        pred_s = to_disparity(pred, config.disparity_floor)
        gt_s = to_disparity(gt, config.disparity_floor)
        chain = _disparity_grad(pred, config.disparity_floor)
    else:
        pred_s, gt_s, chain = pred, gt, None

    params = alignment if alignment is not None else fit_scale_shift(pred_s, gt_s, valid)
    aligned = params.a * pred_s + params.b

    l_glb, g_glb = depth_region_loss(aligned, gt_s, regions.glb, config)
    l_fg, g_fg = depth_region_loss(aligned, gt_s, regions.fg, config)
    l_bd, g_bd = depth_region_loss(aligned, gt_s, regions.bd, config)
    if config.use_seg:
        l_seg, g_mask = seg_loss(pred_mask, gt_mask, config)
    else:
        l_seg, g_mask = 0.0, np.zeros(gt_mask.shape)
    if not config.use_fg:
        l_fg, g_fg = 0.0, np.zeros_like(g_fg)
    if not config.use_bd:
        l_bd, g_bd = 0.0, np.zeros_like(g_bd)

    g_aligned = g_glb + g_fg + g_bd
    g_depth = params.a * g_aligned
    if chain is not None:
        g_depth = g_depth * chain

    counts = regions.counts
    return LossBreakdown(
        l_fg=l_fg,
        l_bd=l_bd,
        l_glb=l_glb,
        l_seg=l_seg,
        total=l_glb + l_fg + l_bd + l_seg,
        counts={"fg": counts["foreground"], "bd": counts["boundary"], "glb": counts["global"], "seg": int(gt_mask.size)},
        alignment=params,
        grad_depth=g_depth,
        grad_mask=g_mask,
    )


def make_fixture(seed: int = 0, size: int = 16):
    """Random non-affine prediction, soft mask and depth with a few invalid pixels."""
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    gt = 1.0 + 2.0 * rng.random((h, w)) + 0.05 * xx
    cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
    rad = size * rng.uniform(0.15, 0.3)
    gt_mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
    gt[gt_mask] -= 0.5
    valid = rng.random((h, w)) > 0.1
    gt[~valid] = np.nan
    pred = 0.8 * np.nan_to_num(gt, nan=2.0) + 0.3 + 0.3 * rng.standard_normal((h, w)) ** 2 + 0.05 * yy
    pred_mask = rng.uniform(0.05, 0.95, size=(h, w))
    return pred, pred_mask, gt, gt_mask, valid


def loss_grad_check(
    seed: int = 0,
    size: int = 16,
    tolerance: float = 1e-4,
    step: float = 1e-6,
    config: LossConfig = LossConfig(),
) -> dict[str, Any]:
    """Central-difference check of each loss term and of the total on a random fixture.

    Analytic gradients come from the float64 path. The finite differences are
    evaluated on extended-precision copies of the inputs, so their round-off
    (~eps * |loss| / step) stays far below the gradients being checked. The
    fitted alignment is pinned, matching the stop-gradient contract of
    :func:`total_objective`.
    """
    if size > 32:
        raise ValueError("loss_grad_check is meant for fixtures up to 32x32")
    pred, pred_mask, gt, gt_mask, valid = make_fixture(seed, size)
    base = total_objective(pred, pred_mask, gt, gt_mask, valid, config)
    params = base.alignment
    regions = region_partition(gt_mask, valid, config.radius)

    ext = np.longdouble
    gt_x = gt.astype(ext)
    if config.disparity_space:
        space = lambda d: to_disparity(d, config.disparity_floor)  # noqa: E731
        chain = _disparity_grad(pred, config.disparity_floor)
    else:
        space = lambda d: d  # noqa: E731
        chain = np.ones_like(pred)

    errors: dict[str, float] = {}

    def check(name, f, analytic, x):
        worst = 0.0
        for idx in np.ndindex(x.shape):
            worst = max(worst, relative_error(float(analytic[idx]), float(central_difference(f, x, idx, step))))
        errors[name] = worst

    for name, region in (("l_glb", regions.glb), ("l_fg", regions.fg), ("l_bd", regions.bd)):
        _, g = depth_region_loss(params.a * space(pred) + params.b, space(gt), region, config)
        x = pred.astype(ext)
        f = lambda x=x, region=region: depth_region_loss(params.a * space(x) + params.b, space(gt_x), region, config)[0]  # noqa: E731
        check(name, f, params.a * g * chain, x)

    _, g_seg = seg_loss(pred_mask, gt_mask, config)
    pm = pred_mask.astype(ext)
    check("l_seg", lambda: seg_loss(pm, gt_mask, config)[0], g_seg, pm)

    xd = pred.astype(ext)
    pm = pred_mask.astype(ext)
    check(
        "total.depth",
        lambda: total_objective(xd, pm, gt_x, gt_mask, valid, config, alignment=params).total,
        base.grad_depth,
        xd,
    )
    xd = pred.astype(ext)
    check(
        "total.mask",
        lambda: total_objective(xd, pm, gt_x, gt_mask, valid, config, alignment=params).total,
        base.grad_mask,
        pm,
    )
    worst = max(errors.values())
    return {
        "seed": seed,
        "size": size,
        "step": step,
        "tolerance": tolerance,
        "extended_precision_eps": float(np.finfo(ext).eps),
        "config": config.to_json(),
        "terms": base.to_json(),
        "max_rel_err": errors,
        "worst_rel_err": worst,
        "passed": bool(worst < tolerance),
    }


def global_only(config: LossConfig = LossConfig()) -> LossConfig:
    """Configuration for the global-loss-only ablation arm."""
    return replace(config, use_fg=False, use_bd=False, use_seg=False)
