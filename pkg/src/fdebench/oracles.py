"""Slow, direct reference implementations used to cross-check the fast paths.

Nothing here shares code with the modules it checks: distances are found by
scanning every source, morphology by visiting every disk offset, metrics by
per-pixel Python loops, quantiles by sorting.
"""

from __future__ import annotations

import math

import numpy as np


def brute_edt(sources: np.ndarray) -> np.ndarray:
    sources = np.asarray(sources, dtype=bool)
    h, w = sources.shape
    ys, xs = np.nonzero(sources)
    out = np.full((h, w), np.inf)
    if ys.size == 0:
        return out
    gy, gx = np.mgrid[0:h, 0:w]
    for y, x in zip(ys, xs):
        d = (gy - y) ** 2 + (gx - x) ** 2
        np.minimum(out, d, out=out)
    return out


def brute_band(mask: np.ndarray, radius: int) -> np.ndarray:
    """Disk dilation minus disk erosion by visiting every offset of the disk.

    Outside the frame is background for dilation and foreground for erosion.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    offsets = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]
    pad_bg = np.pad(mask, radius, constant_values=False)
    pad_fg = np.pad(mask, radius, constant_values=True)
    dil = np.zeros_like(mask)
    ero = mask.copy()
    for dy, dx in offsets:
        # view[y, x] = padded mask at (y + dy, x + dx)
        ys = slice(radius + dy, radius + dy + h)
        xs = slice(radius + dx, radius + dx + w)
        dil |= pad_bg[ys, xs]
        ero &= pad_fg[ys, xs]
    return dil & ~ero


def loop_delta1(pred, gt, region, threshold: float = 1.25):
    hits = 0
    n = 0
    for p, g, r in zip(np.ravel(pred), np.ravel(gt), np.ravel(region)):
        if not r:
            continue
        n += 1
        if p > 0 and max(p / g, g / p) < threshold:
            hits += 1
    return None if n == 0 else hits / n


def loop_absrel(pred, gt, region):
    total = 0.0
    n = 0
    for p, g, r in zip(np.ravel(pred), np.ravel(gt), np.ravel(region)):
        if not r:
            continue
        n += 1
        total += abs(p - g) / g
    return None if n == 0 else total / n


def sse(pred, gt, a: float, b: float) -> float:
    r = a * np.asarray(pred, dtype=np.float64) + b - np.asarray(gt, dtype=np.float64)
    return float(np.dot(r, r))


def grid_search_affine(pred, gt, center: tuple[float, float], half_width: float = 1.0, steps: int = 101):
    """Smallest squared residual over a steps x steps grid of (a, b) around ``center``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    a_grid = center[0] + np.linspace(-half_width, half_width, steps)
    b_grid = center[1] + np.linspace(-half_width, half_width, steps)
    best = (math.inf, None, None)
    for a in a_grid:
        for b in b_grid:
            value = sse(pred, gt, a, b)
            if value < best[0]:
                best = (value, a, b)
    return best


def sorted_quantile(values, q: float) -> float:
    xs = sorted(float(v) for v in values)
    h = (len(xs) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def central_difference(f, x: np.ndarray, index, step: float) -> float:
    """Central finite difference of scalar ``f`` with respect to ``x[index]`` (``x`` restored after)."""
    orig = x[index]
    x[index] = orig + step
    up = f()
    x[index] = orig - step
    down = f()
    x[index] = orig
    return (up - down) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
