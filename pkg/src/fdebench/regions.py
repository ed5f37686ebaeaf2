"""Exact Euclidean distance transform and the boundary band around a target mask."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .depth import as_mask

DEFAULT_RADIUS = 10
BAND_SHAPES = ("disk", "square")

# Squared distances are exact int64; "no source" is this sentinel internally and
# +inf in the returned float field.
_NO_SOURCE = np.iinfo(np.int64).max // 4


@numba.njit(cache=True)
def _column_pass(sources, out):
    h, w = sources.shape
    for x in range(w):
        last = -1
        for y in range(h):
            if sources[y, x]:
                last = y
            out[y, x] = y - last if last >= 0 else -1
        last = -1
        for y in range(h - 1, -1, -1):
            if sources[y, x]:
                last = y
            if last >= 0:
                d = last - y
                if out[y, x] < 0 or d < out[y, x]:
                    out[y, x] = d
    for y in range(h):
        for x in range(w):
            d = out[y, x]
            out[y, x] = d * d if d >= 0 else _NO_SOURCE


@numba.njit(cache=True)
def _row_envelope(f, out, v, z_num, z_den):
    # Lower envelope of parabolas (q - i)^2 + f[q] over finite f[q].
    # Breakpoints are kept as exact rationals num/den with den > 0.
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] >= _NO_SOURCE:
            continue
        if k < 0:
            k = 0
            v[0] = q
            continue
        while True:
            p = v[k]
            num = (f[q] + q * q) - (f[p] + p * p)
            den = 2 * (q - p)
            # intersection s = num / den; pop while s <= z[k]
            if k > 0 and num * z_den[k] <= z_num[k] * den:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z_num[k] = num
        z_den[k] = den
    if k < 0:
        for i in range(n):
            out[i] = _NO_SOURCE
        return
    j = 0
    for i in range(n):
        # advance while the next breakpoint is < i
        while j < k and z_num[j + 1] < i * z_den[j + 1]:
            j += 1
        p = v[j]
        out[i] = (i - p) * (i - p) + f[p]


@numba.njit(cache=True)
def _edt_sq(sources):
    h, w = sources.shape
    col = np.empty((h, w), dtype=np.int64)
    _column_pass(sources, col)
    out = np.empty((h, w), dtype=np.int64)
    v = np.empty(w, dtype=np.int64)
    z_num = np.empty(w + 1, dtype=np.int64)
    z_den = np.empty(w + 1, dtype=np.int64)
    row = np.empty(w, dtype=np.int64)
    for y in range(h):
        _row_envelope(col[y], row, v, z_num, z_den)
        out[y] = row
    return out


def exact_edt_int(sources) -> np.ndarray:
    """Squared distance to the nearest true pixel as int64; -1 where no source exists."""
    sources = np.ascontiguousarray(as_mask(sources))
    d = _edt_sq(sources)
    d[d >= _NO_SOURCE] = -1
    return d


def exact_edt(sources) -> np.ndarray:
    """Squared Euclidean distance to the nearest true pixel (``+inf`` if there is none)."""
    d = exact_edt_int(sources).astype(np.float64)
    d[d < 0] = np.inf
    return d


def _dilate(mask: np.ndarray, radius: int, shape: str) -> np.ndarray:
    if shape == "disk":
        d = exact_edt_int(mask)
        return (d >= 0) & (d <= radius * radius)
    size = 2 * radius + 1
    return ndimage.maximum_filter(mask, size=size, mode="constant", cval=False)


def _erode(mask: np.ndarray, radius: int, shape: str) -> np.ndarray:
    # pixels outside the frame count as foreground
    if shape == "disk":
        d = exact_edt_int(~mask)
        return mask & ((d < 0) | (d > radius * radius))
    size = 2 * radius + 1
    return ndimage.minimum_filter(mask, size=size, mode="constant", cval=True)


def boundary_band(mask, radius: int = DEFAULT_RADIUS, shape: str = "disk") -> np.ndarray:
    """Ring between the dilation and the erosion of ``mask`` by a radius-``radius`` element.

    ``shape="disk"`` uses a Euclidean disk (``dist^2 <= r^2``); ``"square"`` a
    Chebyshev square, kept for sensitivity studies.
    """
    if radius < 1 or int(radius) != radius:
        raise ValueError(f"radius must be an integer >= 1, got {radius}")
    if shape not in BAND_SHAPES:
        raise ValueError(f"unknown band shape {shape!r}")
    mask = as_mask(mask)
    radius = int(radius)
    return _dilate(mask, radius, shape) & ~_erode(mask, radius, shape)


@dataclass(frozen=True)
class RegionSet:
    fg: np.ndarray
    bd: np.ndarray
    glb: np.ndarray
    radius: int

    @property
    def counts(self) -> dict[str, int]:
        return {
            "foreground": int(self.fg.sum()),
            "boundary": int(self.bd.sum()),
            "global": int(self.glb.sum()),
        }

    def items(self):
        """(name, mask) pairs in report order."""
        return (("boundary", self.bd), ("foreground", self.fg), ("global", self.glb))


def region_partition(mask, valid, radius: int = DEFAULT_RADIUS, shape: str = "disk") -> RegionSet:
    mask = as_mask(mask)
    valid = as_mask(valid)
    if mask.shape != valid.shape:
        raise ValueError(f"mask shape {mask.shape} != valid shape {valid.shape}")
    band = boundary_band(mask, radius, shape)
    return RegionSet(fg=valid & mask, bd=valid & band, glb=valid.copy(), radius=int(radius))
