"""Temporal ensembling of per-sample predictions and initial pseudo-label emission."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class MissingSampleError(RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"samples never updated: {', '.join(map(str, self.missing))}")


class PredictionBuffer:
    """Per-sample EMA of probability maps (``C x H x W`` float32).

    ``alpha`` weights the *new* prediction. When ``memory_budget`` (bytes) is set
    and exceeded, further maps are spilled to ``.npy`` memmaps under ``spill_dir``.
    """

    def __init__(self, alpha: float = 0.8, memory_budget: int | None = None, spill_dir=None):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        self.alpha = alpha
        self.memory_budget = memory_budget
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self.maps: dict = {}
        self.last_epoch_updated: dict = {}
        self._bytes = 0

    def _store(self, sample_id, arr):
        if self.memory_budget is not None and self._bytes + arr.nbytes > self.memory_budget:
            if self.spill_dir is None:
                raise RuntimeError("prediction buffer over memory budget and no spill_dir given")
            self.spill_dir.mkdir(parents=True, exist_ok=True)
            mm = np.lib.format.open_memmap(self.spill_dir / f"{sample_id}.npy", mode="w+",
                                           dtype=np.float32, shape=arr.shape)
            mm[...] = arr
            return mm
        self._bytes += arr.nbytes
        return arr

    def update(self, sample_id, p_t, epoch: int | None = None) -> np.ndarray:
        p_t = np.asarray(p_t, dtype=np.float32)
        prev = self.maps.get(sample_id)
        if prev is None:
            self.maps[sample_id] = self._store(sample_id, p_t.copy())
        elif self.alpha == 1:
            prev[...] = p_t
        else:
            # same as alpha*p_t + (1-alpha)*prev, but exact when p_t == prev
            prev += self.alpha * (p_t - prev)
        if epoch is not None:
            self.last_epoch_updated[sample_id] = epoch
        return self.maps[sample_id]

    def __contains__(self, sample_id):
        return sample_id in self.maps

    def __len__(self):
        return len(self.maps)

    def finalize(self, sample_ids=None) -> dict:
        return finalize_pseudo_labels(self, sample_ids)


def ema_update(buffer: PredictionBuffer, sample_id, p_t, epoch=None) -> PredictionBuffer:
    buffer.update(sample_id, p_t, epoch)
    return buffer


def finalize_pseudo_labels(buffer: PredictionBuffer, sample_ids=None) -> dict:
    """Argmax (lowest index on ties) of each buffered map, as ``H x W`` uint8 class maps."""
    ids = list(buffer.maps) if sample_ids is None else list(sample_ids)
    missing = [s for s in ids if s not in buffer.maps]
    if missing:
        raise MissingSampleError(missing)
    return {s: np.argmax(buffer.maps[s], axis=0).astype(np.uint8) for s in ids}
