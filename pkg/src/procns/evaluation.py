"""DSC / HD95 metrics, error maps and the denoised-label noise-suppression report."""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .data import UNLABELED, DataError, read_label, write_label

log = logging.getLogger(__name__)

_FOUR = ndi.generate_binary_structure(2, 1)


def dsc(pred, gt) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2 * (pred & gt).sum() / denom)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    mask = np.asarray(mask, bool)
    return mask & ~ndi.binary_erosion(mask, structure=_FOUR, border_value=0)


def max_diag(shape) -> float:
    return float(np.hypot(*shape))


def surface_distances(a, b) -> np.ndarray:
    """Distances from each boundary pixel of ``a`` to the nearest boundary pixel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dt = ndi.distance_transform_edt(~bb)
    return dt[ba]


def hd95(pred, gt) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        log.info("hd95 on an empty mask; returning image diagonal")
        return max_diag(pred.shape)
    d = np.concatenate([surface_distances(pred, gt), surface_distances(gt, pred)])
    return float(np.percentile(d, 95))


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # (sample_id, class, dsc, hd95)

    def add(self, sample_id, c, d, h):
        self.rows.append((sample_id, c, d, h))

    def per_class(self) -> dict:
        out = {}
        for c in sorted({r[1] for r in self.rows}):
            sel = [r for r in self.rows if r[1] == c]
            out[c] = {"dsc": float(np.mean([r[2] for r in sel])), "hd95": float(np.mean([r[3] for r in sel]))}
        return out

    @property
    def mean_dsc(self) -> float:
        pc = self.per_class()
        return float(np.mean([v["dsc"] for v in pc.values()])) if pc else float("nan")

    @property
    def mean_hd95(self) -> float:
        pc = self.per_class()
        return float(np.mean([v["hd95"] for v in pc.values()])) if pc else float("nan")

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "class", "dsc", "hd95"])
            for r in self.rows:
                w.writerow([r[0], r[1], f"{r[2]:.6f}", f"{r[3]:.6f}"])
        return path


def evaluate_labels(preds: dict, gts: dict, num_classes: int) -> MetricReport:
    """One-vs-rest metrics for every foreground class of every sample."""
    rep = MetricReport()
    for sid in preds:
        p, g = preds[sid], gts[sid]
        for c in range(1, num_classes):
            rep.add(sid, c, dsc(p == c, g == c), hd95(p == c, g == c))
    return rep


COLORS = {
    "tn": (0, 0, 0),
    "tp": (255, 255, 255),
    "fp": (255, 0, 0),
    "fn": (0, 0, 255),
    "confused": (255, 0, 255),  # predicted one foreground class where the truth is another
}


def error_map(pred_label, gt_label) -> np.ndarray:
    """RGB uint8 map: correct background black, correct foreground white, FP red, FN blue."""
    p, g = np.asarray(pred_label), np.asarray(gt_label)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    ok = p == g
    out[ok & (g != 0)] = COLORS["tp"]
    out[~ok & (g == 0)] = COLORS["fp"]
    out[~ok & (p == 0)] = COLORS["fn"]
    out[~ok & (p != 0) & (g != 0)] = COLORS["confused"]
    return out


def write_error_map(path, pred_label, gt_label) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(error_map(pred_label, gt_label), mode="RGB").save(path)
    return path


def denoised_label_dsc(label, gt, num_classes: int) -> float:
    """Foreground DSC of a (possibly partial) label against ground truth, on its labeled pixels only.

    Pixels masked out by the denoising are excluded from both sides, so the score
    measures how clean the surviving labels are.
    """
    label, gt = np.asarray(label), np.asarray(gt)
    keep = label != UNLABELED
    scores = [dsc((label == c) & keep, (gt == c) & keep) for c in range(1, num_classes)]
    return float(np.mean(scores))


_EPOCH_DIR = re.compile(r"epoch_(\d+)$")


def noise_suppression_report(snapshots_dir, gt_labels: dict, num_classes: int, out_dir=None) -> list:
    """Per-epoch mean denoised-label DSC; writes ``noise_suppression.csv`` and ``.png``.

    ``snapshots_dir`` holds ``epoch_{t:03d}/{id}.png`` label maps; epoch 0 is
    the initial pseudo-label set and serves as the baseline row.
    """
    snapshots_dir = Path(snapshots_dir)
    if not snapshots_dir.is_dir():
        raise DataError(f"snapshot directory not found: {snapshots_dir}")
    epochs = sorted((int(m.group(1)), p) for p in snapshots_dir.iterdir()
                    if p.is_dir() and (m := _EPOCH_DIR.match(p.name)))
    if not epochs:
        raise DataError(f"no epoch snapshots under {snapshots_dir}")
    rows = []
    for epoch, path in epochs:
        scores = []
        for sid, gt in gt_labels.items():
            f = path / f"{sid}.png"
            if f.exists():
                scores.append(denoised_label_dsc(read_label(f), gt, num_classes))
        if not scores:
            log.warning("epoch %d snapshot has no labels for the given ids, skipped", epoch)
            continue
        rows.append({"epoch": epoch, "dsc": float(np.mean(scores)), "n": len(scores)})
    out_dir = Path(out_dir) if out_dir is not None else snapshots_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "noise_suppression.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "dsc", "n"])
        w.writeheader()
        w.writerows(rows)
    _plot_curve(rows, out_dir / "noise_suppression.png")
    return rows


def _plot_curve(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [r["epoch"] for r in rows]
    ys = [100 * r["dsc"] for r in rows]
    ax.plot(xs, ys, marker="o", ms=3)
    if rows and rows[0]["epoch"] == 0:
        ax.axhline(ys[0], ls="--", c="gray", label="initial pseudo-labels")
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("denoised-label DSC (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_predictions(out_dir, preds: dict) -> None:
    for sid, lab in preds.items():
        write_label(Path(out_dir) / f"{sid}.png", lab)
