"""Sparse annotation synthesis (points, scribbles, blocks) from dense label maps.

All generators take an ``H x W`` class-index map and return an ``H x W`` uint8
map with 255 on unlabeled pixels. Class 0 is background.
"""
from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy import ndimage as ndi
from skimage.morphology import thin

from .config import SparseGenConfig
from .data import UNLABELED

log = logging.getLogger(__name__)

_EIGHT = np.ones((3, 3), dtype=bool)


class SparseGenWarning(UserWarning):
    pass


def _warn(msg):
    warnings.warn(msg, SparseGenWarning, stacklevel=3)


def max_inscribed_rectangle(mask: np.ndarray):
    """Largest axis-aligned all-True rectangle as ``(top, left, height, width)``.

    Row-by-row largest-rectangle-in-histogram scan; the first maximum in scan
    order wins. Returns ``None`` for an empty mask.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    heights = np.zeros(w, dtype=int)
    best, best_area = None, 0
    for row in range(h):
        heights = np.where(mask[row], heights + 1, 0)
        stack = []  # column indices with strictly increasing heights
        for col in range(w + 1):
            cur = heights[col] if col < w else 0
            while stack and heights[stack[-1]] >= cur:
                height = heights[stack.pop()]
                left = stack[-1] + 1 if stack else 0
                area = height * (col - left)
                if area > best_area:
                    best_area = area
                    best = (row - height + 1, left, int(height), col - left)
            stack.append(col)
    return best


def gaussian_brush(sigma: float) -> np.ndarray:
    """Binary footprint: a discrete Gaussian truncated at 3 sigma, thresholded at half its peak."""
    r = int(np.ceil(3 * sigma))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    g = np.exp(-(yy**2 + xx**2) / (2 * sigma**2))
    fp = g >= 0.5
    nz = np.argwhere(fp)
    lo, hi = nz.min(0), nz.max(0) + 1
    return fp[lo[0]:hi[0], lo[1]:hi[1]]


def _stamp(shape, points, footprint):
    out = np.zeros(shape, dtype=bool)
    fh, fw = footprint.shape
    cy, cx = fh // 2, fw // 2
    for y, x in points:
        for dy, dx in np.argwhere(footprint):
            yy, xx = y + dy - cy, x + dx - cx
            if 0 <= yy < shape[0] and 0 <= xx < shape[1]:
                out[yy, xx] = True
    return out


def _kernel(kind: str, size: int):
    if kind == "CROSS":
        k = np.zeros((size, size), dtype=bool)
        k[size // 2, :] = True
        k[:, size // 2] = True
        return k
    return np.ones((size, size), dtype=bool)


def _components(region):
    lab, n = ndi.label(region, structure=_EIGHT)
    return [lab == k for k in range(1, n + 1)]


def _classes(dense, num_classes, annotate_background):
    n = int(dense.max()) + 1 if num_classes is None else num_classes
    return range(0 if annotate_background else 1, n)


def erode_keep_nonempty(region, kernel, iters: int):
    """Erode ``iters`` times, stopping before the step that would empty the region."""
    cur = region
    for _ in range(iters):
        nxt = ndi.binary_erosion(cur, structure=kernel)
        if not nxt.any():
            break
        cur = nxt
    return cur


def scribble_region(region, cfg: SparseGenConfig):
    out = np.zeros(region.shape, dtype=bool)
    for comp in _components(region):
        core = erode_keep_nonempty(comp, _kernel("CROSS", cfg.erosion_kernel_size), cfg.erosion_iters)
        out |= thin(core) & comp
    return out


def block_region(region, cfg: SparseGenConfig):
    out = np.zeros(region.shape, dtype=bool)
    kernel = _kernel(cfg.erosion_kernel, cfg.erosion_kernel_size)
    for comp in _components(region):
        area0 = comp.sum()
        if area0 < 4:
            out |= comp
            continue
        cur = comp
        while cur.sum() > cfg.target_area_fraction * area0:
            nxt = ndi.binary_erosion(cur, structure=kernel)
            if not nxt.any() or nxt.sum() == cur.sum():
                break
            cur = nxt
        out |= cur
    return out


def gen_scribbles(dense, cfg: SparseGenConfig, num_classes=None) -> np.ndarray:
    dense = np.asarray(dense)
    out = np.full(dense.shape, UNLABELED, dtype=np.uint8)
    for c in _classes(dense, num_classes, cfg.annotate_background):
        region = dense == c
        if not region.any():
            continue
        s = scribble_region(region, cfg)
        if not s.any():
            _warn(f"class {c} produced an empty scribble")
        out[s] = c
    return out


def gen_blocks(dense, cfg: SparseGenConfig, num_classes=None) -> np.ndarray:
    dense = np.asarray(dense)
    out = np.full(dense.shape, UNLABELED, dtype=np.uint8)
    for c in _classes(dense, num_classes, cfg.annotate_background):
        region = dense == c
        if region.any():
            out[block_region(region, cfg)] = c
    return out


def gen_points(dense, cfg: SparseGenConfig, num_classes=None) -> np.ndarray:
    """Brush-dilated points on the contracted maximum inscribed rectangle of each component."""
    dense = np.asarray(dense)
    out = np.full(dense.shape, UNLABELED, dtype=np.uint8)
    if cfg.annotate_background and (dense == 0).any():
        out[scribble_region(dense == 0, cfg)] = 0
    brush = gaussian_brush(cfg.brush_sigma)
    n = int(dense.max()) + 1 if num_classes is None else num_classes
    found = False
    for c in range(1, n):
        for comp in _components(dense == c):
            found = True
            rect = max_inscribed_rectangle(comp)
            t, l, h, w = rect
            k = cfg.contraction
            t, b, l, r = t + k, t + h - 1 - k, l + k, l + w - 1 - k
            if t > b or l > r:
                _warn(f"class {c} component too small for an inscribed rectangle after contraction {k}")
                continue
            cy, cx = (t + b) // 2, (l + r) // 2
            if cfg.mode == "POINT_CENTER":
                pts = [(cy, cx)]
            else:
                pts = [(t, cx), (b, cx), (cy, l), (cy, r)]
            out[_stamp(dense.shape, pts, brush) & comp] = c
    if not found:
        _warn("no foreground component to place points on")
    return out


def gen_sparse(dense, cfg: SparseGenConfig, num_classes=None) -> np.ndarray:
    if cfg.mode in ("POINT_SIDES", "POINT_CENTER"):
        return gen_points(dense, cfg, num_classes)
    if cfg.mode == "SCRIBBLE":
        return gen_scribbles(dense, cfg, num_classes)
    return gen_blocks(dense, cfg, num_classes)


def annotation_stats(sparse, dense) -> dict:
    """Fraction of densely-labeled pixels that carry a sparse label, plus per-class counts."""
    sparse, dense = np.asarray(sparse), np.asarray(dense)
    if sparse.shape != dense.shape:
        raise ValueError(f"shape mismatch {sparse.shape} vs {dense.shape}")
    n_dense = int((dense != UNLABELED).sum())
    n_sparse = int((sparse != UNLABELED).sum())
    classes = sorted(set(np.unique(dense).tolist()) - {UNLABELED})
    counts = {int(c): int((sparse == c).sum()) for c in classes}
    return {"proportion": n_sparse / n_dense if n_dense else 0.0, "per_class_counts": counts}
