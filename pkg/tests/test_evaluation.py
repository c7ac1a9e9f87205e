import csv

import numpy as np
import pytest

from procns.data import UNLABELED, DataError, write_label
from procns.evaluation import (
    COLORS,
    MetricReport,
    denoised_label_dsc,
    dsc,
    error_map,
    evaluate_labels,
    hd95,
    max_diag,
    noise_suppression_report,
    write_error_map,
)


def brute_boundary(m):
    h, w = m.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not m[yy, xx]:
                    out.append((y, x))
                    break
    return np.array(out, dtype=float)


def brute_hd95(a, b):
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return max_diag(a.shape)
    pa, pb = brute_boundary(a), brute_boundary(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(np.percentile(np.concatenate([d.min(1), d.min(0)]), 95))


def brute_dsc(a, b):
    inter = sum(1 for x, y in zip(a.flat, b.flat) if x and y)
    tot = int(a.sum()) + int(b.sum())
    return 1.0 if tot == 0 else 2 * inter / tot


def test_dsc_examples():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    assert dsc(a, a) == 1.0
    assert dsc(a, ~a) == 0.0
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert dsc(a, b) == 0.5


def test_hd95_examples():
    a = np.zeros((6, 6), bool)
    a[1:4, 1:4] = True
    assert hd95(a, a) == 0.0
    p, q = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
    p[2, 1], q[2, 4] = True, True
    assert hd95(p, q) == 3.0


def test_hd95_shifted_squares():
    a = np.zeros((10, 10), bool)
    a[2:7, 2:7] = True
    b = np.roll(a, 1, axis=0)
    assert hd95(a, b) == pytest.approx(brute_hd95(a, b))


def test_oracles_10k_random_masks():
    rng = np.random.default_rng(0)
    n = 0
    for _ in range(10_000):
        h, w = rng.integers(1, 7, size=2)
        p = rng.random(2)
        a, b = rng.random((h, w)) < p[0], rng.random((h, w)) < p[1]
        assert dsc(a, b) == pytest.approx(brute_dsc(a, b), abs=1e-12)
        v = hd95(a, b)
        assert v == pytest.approx(brute_hd95(a, b), abs=1e-9)
        assert v == hd95(b, a) and v >= 0
        n += 1
    assert n >= 10_000


def test_dsc_permutation_invariant():
    rng = np.random.default_rng(1)
    a, b = rng.random(36) < 0.4, rng.random(36) < 0.5
    perm = rng.permutation(36)
    assert dsc(a, b) == dsc(a[perm], b[perm])


def test_empty_conventions():
    e = np.zeros((3, 4), bool)
    f = e.copy()
    f[1, 1] = True
    assert hd95(e, e) == 0.0
    assert hd95(e, f) == 5.0


def test_evaluate_labels_multiclass(tmp_path):
    gt = {"a": np.array([[0, 1], [2, 2]], np.uint8)}
    pred = {"a": np.array([[0, 1], [2, 0]], np.uint8)}
    rep = evaluate_labels(pred, gt, 3)
    pc = rep.per_class()
    assert pc[1]["dsc"] == 1.0 and pc[2]["dsc"] == pytest.approx(2 / 3)
    assert rep.mean_dsc == pytest.approx((1 + 2 / 3) / 2)
    rows = list(csv.reader(rep.write_csv(tmp_path / "m.csv").open()))
    assert rows[0] == ["sample_id", "class", "dsc", "hd95"] and len(rows) == 3
    assert MetricReport().per_class() == {}


class TestErrorMap:
    def test_all_correct(self):
        g = np.array([[0, 1], [1, 0]])
        m = error_map(g, g)
        assert (m[g == 1] == COLORS["tp"]).all() and (m[g == 0] == COLORS["tn"]).all()

    def test_empty_prediction(self):
        g = np.array([[0, 1], [1, 1]])
        m = error_map(np.zeros_like(g), g)
        assert (m[g == 1] == COLORS["fn"]).all()

    def test_checkerboard(self):
        g = np.indices((4, 4)).sum(0) % 2
        m = error_map(1 - g, g)
        assert (m[g == 0] == COLORS["fp"]).all() and (m[g == 1] == COLORS["fn"]).all()

    def test_png(self, tmp_path):
        from PIL import Image

        g = np.indices((4, 4)).sum(0) % 2
        path = write_error_map(tmp_path / "e.png", 1 - g, g)
        assert np.array_equal(np.asarray(Image.open(path)), error_map(1 - g, g))


def test_denoised_dsc_ignores_masked():
    gt = np.array([[1, 1, 0, 0]], np.uint8)
    lab = np.array([[1, UNLABELED, UNLABELED, 0]], np.uint8)
    assert denoised_label_dsc(lab, gt, 2) == 1.0
    lab = np.array([[1, 0, 1, 0]], np.uint8)
    assert denoised_label_dsc(lab, gt, 2) == 0.5


class TestNoiseReport:
    def test_flat_curve(self, tmp_path):
        gt = {"s0": np.array([[0, 1], [1, 1]], np.uint8)}
        write_label(tmp_path / "snap" / "epoch_001" / "s0.png", gt["s0"])
        rows = noise_suppression_report(tmp_path / "snap", gt, 2, tmp_path / "out")
        assert rows == [{"epoch": 1, "dsc": 1.0, "n": 1}]
        assert (tmp_path / "out" / "noise_suppression.csv").exists()
        assert (tmp_path / "out" / "noise_suppression.png").exists()

    def test_improving(self, tmp_path):
        gt = {"s0": np.array([[0, 0, 1, 1, 1, 1]], np.uint8)}
        labs = [[1, 1, 1, 1, 1, 1], [1, UNLABELED, 1, 1, 1, 1], [0, UNLABELED, 1, 1, 1, 1]]
        for e, lab in enumerate(labs):
            write_label(tmp_path / f"epoch_{e:03d}" / "s0.png", np.array([lab], np.uint8))
        ys = [r["dsc"] for r in noise_suppression_report(tmp_path, gt, 2)]
        assert ys == sorted(ys) and ys[-1] > ys[0]

    def test_empty_dir(self, tmp_path):
        with pytest.raises(DataError, match=str(tmp_path)):
            noise_suppression_report(tmp_path, {}, 2)
        with pytest.raises(DataError, match="nope"):
            noise_suppression_report(tmp_path / "nope", {}, 2)
