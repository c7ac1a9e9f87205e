import numpy as np
import pytest

from procns.pseudo_init import MissingSampleError, PredictionBuffer, ema_update, finalize_pseudo_labels


def test_ema_example():
    buf = PredictionBuffer(alpha=0.8)
    buf.update("a", np.array([[[0.5]]]))
    out = buf.update("a", np.array([[[1.0]]]))
    assert out.item() == pytest.approx(0.9)


def test_fixed_point_exact():
    p = np.random.default_rng(0).dirichlet([1, 1, 1], size=(4, 4)).transpose(2, 0, 1).astype(np.float32)
    buf = PredictionBuffer(alpha=0.8)
    for t in range(10):
        ema_update(buf, "s", p, epoch=t)
        assert np.array_equal(buf.maps["s"], p)
    assert buf.last_epoch_updated["s"] == 9


def test_alpha_one_tracks_latest():
    rng = np.random.default_rng(1)
    buf = PredictionBuffer(alpha=1.0)
    for _ in range(3):
        p = rng.random((2, 3, 3)).astype(np.float32)
        buf.update(0, p)
        assert np.array_equal(buf.maps[0], p)


def test_normalization_1000_updates():
    rng = np.random.default_rng(2)
    buf = PredictionBuffer(alpha=0.8)
    for _ in range(1000):
        buf.update("x", rng.dirichlet([0.5, 0.5, 0.5], size=(8, 8)).transpose(2, 0, 1))
    assert np.abs(buf.maps["x"].sum(0) - 1).max() < 1e-5


def test_finalize_examples():
    buf = PredictionBuffer()
    buf.update("onehot", np.array([[[0.0, 1.0]], [[1.0, 0.0]]]))
    buf.update("soft", np.array([[[0.6]], [[0.4]]]))
    buf.update("tie", np.array([[[0.5]], [[0.5]]]))
    out = finalize_pseudo_labels(buf)
    assert out["onehot"].tolist() == [[1, 0]]
    assert out["soft"].item() == 0 and out["tie"].item() == 0
    assert out["soft"].dtype == np.uint8


def test_missing_samples():
    buf = PredictionBuffer()
    buf.update("a", np.ones((2, 2, 2)) / 2)
    with pytest.raises(MissingSampleError) as e:
        buf.finalize(["a", "b", "c"])
    assert e.value.missing == ["b", "c"]


def test_spill_to_disk(tmp_path):
    p = np.full((2, 4, 4), 0.5, dtype=np.float32)
    buf = PredictionBuffer(alpha=0.5, memory_budget=p.nbytes, spill_dir=tmp_path)
    buf.update("mem", p)
    buf.update("disk", p)
    assert isinstance(buf.maps["disk"], np.memmap)
    assert (tmp_path / "disk.npy").exists()
    buf.update("disk", np.zeros_like(p))
    assert np.allclose(np.load(tmp_path / "disk.npy"), 0.25)
