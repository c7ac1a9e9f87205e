"""Multi-scale prototypes, relation matrix and prototype-refined predictions."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import ShapeError, upsample_to

EPS_NORM = 1e-8
EPS_NORMALIZE = 1e-8


@dataclass
class PrototypeSet:
    deep: torch.Tensor  # C x Dh, shared by the batch
    shallow: torch.Tensor  # B x C x Dl
    concat: torch.Tensor  # B x C x (Dh + Dl)
    present: torch.Tensor  # B x C bool


class PrototypeMemory:
    """Per-class EMA of batch-level prototypes, used when a class is absent from a batch.

    Observations are accumulated during an epoch and folded into the EMA by
    :meth:`end_epoch`, so a fallback always refers to earlier epochs.
    """

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.deep = None  # C x Dh
        self.shallow = None
        self.known = None  # C bool
        self._acc = None

    def observe(self, deep, shallow_batch, present_batch):
        deep, shallow_batch = deep.detach(), shallow_batch.detach()
        if self._acc is None:
            c = deep.shape[0]
            self._acc = [torch.zeros_like(deep), torch.zeros_like(shallow_batch), torch.zeros(c)]
        w = present_batch.float()
        self._acc[0] += deep * w[:, None]
        self._acc[1] += shallow_batch * w[:, None]
        self._acc[2] += w

    def end_epoch(self):
        if self._acc is None:
            return
        deep_sum, sh_sum, n = self._acc
        seen = n > 0
        mean_deep = deep_sum / n.clamp_min(1)[:, None]
        mean_sh = sh_sum / n.clamp_min(1)[:, None]
        if self.deep is None:
            self.deep, self.shallow, self.known = mean_deep, mean_sh, seen.clone()
        else:
            first = seen & ~self.known
            both = seen & self.known
            for store, new in ((self.deep, mean_deep), (self.shallow, mean_sh)):
                store[first] = new[first]
                store[both] = self.decay * store[both] + (1 - self.decay) * new[both]
            self.known |= seen
        self._acc = None

    def lookup(self, c: int, which: str, dim: int) -> torch.Tensor:
        if self.known is not None and bool(self.known[c]):
            return (self.deep if which == "deep" else self.shallow)[c]
        return torch.zeros(dim)


def masked_average_pool(embedding: torch.Tensor, label: torch.Tensor, class_id: int):
    """Mean of ``embedding`` (D x H x W) over pixels with ``label[class_id] == 1``.

    Returns ``None`` when the class has no labeled pixel.
    """
    if embedding.shape[-2:] != label.shape[-2:]:
        raise ShapeError(f"embedding {tuple(embedding.shape)} and label {tuple(label.shape)} differ spatially")
    mask = label[class_id].to(embedding.dtype)
    n = mask.sum()
    if n == 0:
        return None
    return (embedding * mask).sum(dim=(-2, -1)) / n


def _pool(embeds, labels):
    """Sums and counts per sample and class: (B x C x D, B x C)."""
    labels = labels.to(embeds.dtype)
    sums = torch.einsum("bdhw,bchw->bcd", embeds, labels)
    return sums, labels.sum(dim=(-2, -1))


def build_prototypes(embed_high, embed_low, labels, granularity: str = "sample",
                     memory: PrototypeMemory | None = None) -> PrototypeSet:
    """Deep prototypes pooled over the batch, shallow ones per sample (or per batch).

    ``embed_high``/``embed_low`` are ``B x D x H x W`` at label resolution and
    ``labels`` is a one-hot ``B x C x H x W`` tensor where all-zero pixels are
    unlabeled. A class absent from sample ``i`` takes its shallow prototype from
    the whole batch; a class absent from the whole batch takes both parts from
    ``memory`` (or zeros when nothing is remembered).
    """
    if embed_high.shape[-2:] != labels.shape[-2:] or embed_low.shape[-2:] != labels.shape[-2:]:
        raise ShapeError("embeddings must be upsampled to label resolution first")
    b, c = labels.shape[:2]
    dh, dl = embed_high.shape[1], embed_low.shape[1]
    hi_sum, counts = _pool(embed_high, labels)
    lo_sum, _ = _pool(embed_low, labels)
    batch_counts = counts.sum(0)  # C
    in_batch = batch_counts > 0
    denom = batch_counts.clamp_min(1)[:, None]
    deep = hi_sum.sum(0) / denom
    batch_low = lo_sum.sum(0) / denom
    present = counts > 0

    if granularity == "sample":
        shallow = lo_sum / counts.clamp_min(1)[..., None]
        shallow = torch.where(present[..., None], shallow, batch_low.expand(b, c, dl))
    elif granularity == "batch":
        shallow = batch_low.expand(b, c, dl)
    else:
        raise ValueError(f"unknown prototype granularity {granularity!r}")

    if not bool(in_batch.all()):
        deep_rows, shallow_rows = [], []
        for k in range(c):
            if in_batch[k]:
                deep_rows.append(deep[k])
                shallow_rows.append(shallow[:, k])
            else:
                fallback = memory.lookup if memory is not None else (lambda _c, _w, dim: torch.zeros(dim))
                deep_rows.append(fallback(k, "deep", dh).to(deep))
                shallow_rows.append(fallback(k, "shallow", dl).to(deep).expand(b, dl))
        deep = torch.stack(deep_rows)
        shallow = torch.stack(shallow_rows, dim=1)

    if memory is not None:
        memory.observe(deep, batch_low, in_batch)

    concat = torch.cat([deep.expand(b, c, dh), shallow], dim=-1)
    return PrototypeSet(deep=deep, shallow=shallow, concat=concat, present=present)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity along ``dim``; defined as 0 when either norm is below 1e-8."""
    na = a.norm(dim=dim)
    nb = b.norm(dim=dim)
    dot = (a * b).sum(dim=dim)
    ok = (na >= EPS_NORM) & (nb >= EPS_NORM)
    return torch.where(ok, dot / torch.where(ok, na * nb, torch.ones_like(dot)), torch.zeros_like(dot))


def relation_matrix(pixel_embeds: torch.Tensor, prototypes) -> torch.Tensor:
    """ReLU'd cosine similarity to each class prototype, L1-normalized over classes.

    ``pixel_embeds`` is ``B x D x H x W``; ``prototypes`` a :class:`PrototypeSet`
    or a ``B x C x D`` tensor. Returns ``B x C x H x W``.
    """
    z = prototypes.concat if isinstance(prototypes, PrototypeSet) else prototypes
    f = pixel_embeds
    fn = f.norm(dim=1)  # B x H x W
    zn = z.norm(dim=-1)  # B x C
    dot = torch.einsum("bdhw,bcd->bchw", f, z)
    denom = fn[:, None] * zn[:, :, None, None]
    ok = (fn[:, None] >= EPS_NORM) & (zn[:, :, None, None] >= EPS_NORM)
    sim = torch.where(ok, dot / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dot))
    sim = F.relu(sim)
    return sim / (sim.sum(dim=1, keepdim=True) + EPS_NORMALIZE)


def refine_prediction(logits: torch.Tensor, relation: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits * relation, dim=1)


def pixel_embeddings(embed_high, embed_low, size) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Upsample both taps to ``size`` and concatenate them along channels."""
    hi = upsample_to(embed_high, size)
    lo = upsample_to(embed_low, size)
    return hi, lo, torch.cat([hi, lo], dim=1)


def dump_prototypes(path, protos: PrototypeSet, class_ids=None) -> None:
    """Write prototypes as ``path.npz`` plus a ``path.json`` manifest."""
    import json
    from pathlib import Path

    import numpy as np

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), deep=protos.deep.detach().cpu().numpy(),
             shallow=protos.shallow.detach().cpu().numpy(), concat=protos.concat.detach().cpu().numpy())
    c = protos.deep.shape[0]
    manifest = {
        "class_ids": list(class_ids) if class_ids is not None else list(range(c)),
        "dims": {"deep": int(protos.deep.shape[1]), "shallow": int(protos.shallow.shape[-1])},
        "present": protos.present.cpu().tolist(),
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
