"""Desk-scale synthetic segmentation data with deliberately ambiguous boundaries."""
from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .config import DatasetConfig, SparseGenConfig
from .data import DataError, write_image, write_label
from .sparse_gen import annotation_stats, gen_sparse


def _shape_mask(rng, size, kind):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = rng.uniform(size / 8, size / 4.5)
    margin = r + 2
    cy, cx = rng.uniform(margin, size - margin, 2)
    dy, dx = yy - cy, xx - cx
    if kind == "DISK":
        return dy**2 + dx**2 <= r**2
    if kind == "ELLIPSE":
        a, b = r, r * rng.uniform(0.5, 0.9)
        th = rng.uniform(0, math.pi)
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1
    # BLOB: a disk whose radius is modulated by a few low-order harmonics
    ang = np.arctan2(dy, dx)
    rad = np.full_like(ang, r * 0.85)
    for k in (2, 3, 5):
        rad += r * rng.uniform(0.0, 0.12) * np.cos(k * ang + rng.uniform(0, 2 * math.pi))
    return np.hypot(dy, dx) <= rad


def make_sample(rng: np.random.Generator, cfg: DatasetConfig):
    """Return ``(image in [0,1], dense class map)`` for one sample."""
    size = cfg.image_size
    dense = np.zeros((size, size), dtype=np.uint8)
    for c in range(1, cfg.num_classes):
        kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        dense[_shape_mask(rng, size, kind)] = c

    bg = rng.uniform(0.25, 0.4)
    contrast = rng.uniform(0.15, 0.35)
    img = np.full((size, size), bg)
    for c in range(1, cfg.num_classes):
        img[dense == c] = bg + contrast * (1 + 0.5 * (c - 1))
    # weaker look-alike blobs in the background
    for _ in range(cfg.distractors):
        m = _shape_mask(rng, size, "BLOB") & (dense == 0)
        img[m] = bg + contrast * rng.uniform(0.3, 0.6)
    yy, xx = np.mgrid[0:size, 0:size] / size
    g = rng.uniform(-0.1, 0.1, 2)
    img = img + g[0] * (yy - 0.5) + g[1] * (xx - 0.5)
    if cfg.boundary_blur_sigma > 0:
        img = ndi.gaussian_filter(img, cfg.boundary_blur_sigma)
    img = img + rng.normal(0, cfg.noise_std, img.shape)
    return np.clip(img, 0, 1), dense


def corrupt_boundary(dense: np.ndarray, rng: np.random.Generator, fraction: float = 0.1) -> np.ndarray:
    """Degrade a dense label by moving its foreground boundary.

    Each foreground class is dilated or eroded (coin flip per sample) one pixel at
    a time until at least ``fraction`` of its original area has changed.
    """
    out = dense.copy()
    for c in np.unique(dense):
        if c == 0:
            continue
        region = dense == c
        area = region.sum()
        grow = rng.random() < 0.5
        cur = region
        while (cur ^ region).sum() < fraction * area:
            nxt = ndi.binary_dilation(cur) & ((dense == 0) | region) if grow else ndi.binary_erosion(cur)
            if (nxt == cur).all() or not nxt.any():
                break
            cur = nxt
        out[region & ~cur] = 0
        out[cur] = c
    return out


def gen_synthetic_dataset(cfg: DatasetConfig, sparse_cfg: SparseGenConfig, out_dir=None) -> Path:
    """Write the dataset layout plus ``manifest.json``; deterministic in ``cfg.seed``."""
    root = Path(out_dir if out_dir is not None else cfg.path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {root}: {e}") from None
    n_train, n_total = cfg.num_samples, cfg.num_samples + cfg.num_test
    width = max(4, len(str(n_total)))
    ids = [f"{k:0{width}d}" for k in range(n_total)]
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_total + 1)
    order = np.random.default_rng(seeds[-1]).permutation(n_train)
    n_full = int(math.floor(cfg.full_label_fraction * n_train))
    full_ids = sorted(ids[k] for k in order[:n_full])
    props = []
    for k, sid in enumerate(ids):
        rng = np.random.default_rng(seeds[k])
        img, dense = make_sample(rng, cfg)
        sparse = dense.copy() if sid in full_ids else gen_sparse(dense, sparse_cfg, cfg.num_classes)
        try:
            write_image(root / "images" / f"{sid}.png", img)
            write_label(root / "labels_full" / f"{sid}.png", dense)
            write_label(root / "labels_sparse" / f"{sid}.png", sparse)
        except OSError as e:
            raise DataError(f"failed writing sample {sid} under {root}: {e}") from None
        if k < n_train and sid not in full_ids:
            props.append(annotation_stats(sparse, dense)["proportion"])
    manifest = {
        "ids": ids,
        "class_names": ["background"] + [f"class_{c}" for c in range(1, cfg.num_classes)],
        "split": {"train": ids[:n_train], "test": ids[n_train:]},
        "full_label_ids": full_ids,
        "generator": asdict(cfg),
        "sparse_gen": asdict(sparse_cfg),
        "mean_sparse_proportion": float(np.mean(props)) if props else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root
