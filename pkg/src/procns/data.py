"""Label conversions, PNG I/O and the on-disk dataset layout.

Layout::

    images/{id}.png        grayscale image
    labels_full/{id}.png   dense class-index map
    labels_sparse/{id}.png sparse class-index map, 255 = unlabeled
    manifest.json          ids, class names, split, generator config
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

UNLABELED = 255


class DataError(RuntimeError):
    pass


def to_onehot(index_map: np.ndarray, num_classes: int) -> np.ndarray:
    """``H x W`` class indices (255 = unlabeled) -> ``C x H x W`` float32 one-hot."""
    index_map = np.asarray(index_map)
    out = np.zeros((num_classes,) + index_map.shape, dtype=np.float32)
    for c in range(num_classes):
        out[c] = index_map == c
    return out


def from_onehot(onehot) -> np.ndarray:
    """Inverse of :func:`to_onehot`; pixels with an all-zero vector map to 255."""
    if isinstance(onehot, torch.Tensor):
        onehot = onehot.detach().cpu().numpy()
    idx = np.argmax(onehot, axis=0).astype(np.uint8)
    idx[onehot.sum(axis=0) == 0] = UNLABELED
    return idx


def read_label(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.array(im, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read label {path}: {e}") from None


def write_label(path, index_map: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(index_map, dtype=np.uint8), mode="L").save(path)


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.array(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per image."""
    std = image.std()
    return ((image - image.mean()) / (std if std > 1e-8 else 1.0)).astype(np.float32)


def read_label_dir(path, ids) -> dict:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"label directory not found: {path}")
    out = {}
    for i in ids:
        f = path / f"{i}.png"
        if not f.exists():
            raise DataError(f"missing label file {f}")
        out[i] = read_label(f)
    return out


def write_label_dir(path, labels: dict) -> list:
    path = Path(path)
    written = []
    for i, lab in labels.items():
        write_label(path / f"{i}.png", lab)
        written.append(str(path / f"{i}.png"))
    return written


def dir_hash(path) -> str:
    """SHA-256 over every file under ``path`` (names and bytes, sorted)."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class Dataset:
    root: Path
    ids: list
    num_classes: int
    images: dict  # id -> normalized H x W float32
    sparse: dict  # id -> H x W uint8
    dense: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def image_tensor(self, ids) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.images[i] for i in ids]))[:, None]

    def subset(self, ids) -> "Dataset":
        ids = list(ids)
        return Dataset(self.root, ids, self.num_classes,
                       {i: self.images[i] for i in ids}, {i: self.sparse[i] for i in ids},
                       {i: self.dense[i] for i in ids if i in self.dense}, self.manifest)


def load_dataset(root, split: str | None = "train", sparse_dir: str = "labels_sparse") -> Dataset:
    root = Path(root)
    mf = root / "manifest.json"
    if not mf.exists():
        raise DataError(f"dataset manifest not found: {mf}")
    manifest = json.loads(mf.read_text())
    ids = manifest["split"][split] if split else manifest["ids"]
    num_classes = len(manifest["class_names"])
    images, sparse, dense = {}, {}, {}
    for i in ids:
        img = root / "images" / f"{i}.png"
        if not img.exists():
            raise DataError(f"missing image {img}")
        images[i] = normalize_image(read_image(img))
        sp = root / sparse_dir / f"{i}.png"
        if sp.exists():
            sparse[i] = read_label(sp)
        full = root / "labels_full" / f"{i}.png"
        if full.exists():
            dense[i] = read_label(full)
    if split == "train" and len(sparse) != len(ids):
        missing = [i for i in ids if i not in sparse]
        raise DataError(f"missing sparse labels under {root / sparse_dir} for {missing[:5]}")
    return Dataset(root, list(ids), num_classes, images, sparse, dense, manifest)
