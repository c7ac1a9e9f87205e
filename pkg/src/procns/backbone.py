"""UNet backbone exposing logits plus two intermediate embedding taps.

Tap numbering is by resolution level: level ``k`` lives at ``1/2**(k-1)`` of the
input size. The encoder tap is the post-activation output of the encoder block at
that level (the skip feature); the decoder tap is the post-activation output of
the upsampling block that produces that level. Hence ``tap_encoder=3`` and
``tap_decoder=3`` on a 64x64 input both yield 16x16 maps.

Tensors are laid out ``B x C x H x W`` throughout the package.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetworkConfig


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ForwardResult:
    logits: torch.Tensor
    embed_high: torch.Tensor
    embed_low: torch.Tensor


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        b, d = cfg.base_width, cfg.depth
        # widths[k] is the channel count at resolution 1/2**k; widths[d] is the bottleneck
        self.widths = [b * 2**k for k in range(d + 1)]
        self.encoder = nn.ModuleList([_double_conv(cfg.in_channels, self.widths[0])])
        for k in range(1, d + 1):
            self.encoder.append(_double_conv(self.widths[k - 1], self.widths[k]))
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for k in range(d, 0, -1):
            self.up.append(nn.ConvTranspose2d(self.widths[k], self.widths[k - 1], 2, stride=2))
            self.decoder.append(_double_conv(2 * self.widths[k - 1], self.widths[k - 1]))
        self.head = nn.Conv2d(self.widths[0], cfg.num_classes, 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight.shape[1] * m.weight[0, 0].numel()
                if isinstance(m, nn.ConvTranspose2d):
                    fan_in = m.weight.shape[0] * m.weight[0, 0].numel()
                std = (2.0 / fan_in) ** 0.5
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                    if m.bias is not None:
                        m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def embed_dims(self) -> tuple[int, int]:
        return self.widths[self.cfg.tap_encoder - 1], self.widths[self.cfg.tap_decoder - 1]

    def forward(self, x: torch.Tensor) -> ForwardResult:
        d = self.cfg.depth
        h, w = x.shape[-2:]
        if x.dim() != 4 or h % 2**d or w % 2**d:
            raise ShapeError(f"input {tuple(x.shape)} must be B x C x H x W with H, W divisible by {2**d}")
        skips = []
        y = x
        for k, block in enumerate(self.encoder):
            if k:
                y = F.max_pool2d(y, 2)
            y = block(y)
            skips.append(y)
        embed_high = skips[self.cfg.tap_encoder - 1]
        embed_low = None
        for j, (up, block) in enumerate(zip(self.up, self.decoder)):
            level = d - j  # 1-based level this block produces
            y = block(torch.cat([skips[level - 1], up(y)], dim=1))
            if level == self.cfg.tap_decoder:
                embed_low = y
        return ForwardResult(self.head(y), embed_high, embed_low)


def forward(model: UNet, image: torch.Tensor) -> ForwardResult:
    """Run ``model`` on a single ``H x W`` image or a ``B x C x H x W`` batch."""
    if image.dim() == 2:
        image = image[None, None]
    return model(image)


def upsample_to(embedding: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize with half-pixel (align_corners=False) sampling."""
    h, w = embedding.shape[-2:]
    th, tw = size
    if th < h or tw < w:
        raise ShapeError(f"target {size} smaller than embedding {(h, w)}")
    if (th, tw) == (h, w):
        return embedding
    squeeze = embedding.dim() == 3
    if squeeze:
        embedding = embedding[None]
    out = F.interpolate(embedding, size=(th, tw), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(path, model: UNet, epoch: int, stage: str, rng_seed: int, extra=None) -> Path:
    """Write ``path`` (weights) and ``path`` + ``.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    manifest = {"config": asdict(model.cfg), "epoch": epoch, "stage": stage, "rng_seed": rng_seed}
    if extra:
        manifest.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise CheckpointError(f"checkpoint manifest not found: {side}")
    return json.loads(side.read_text())


def load_checkpoint(path, model: UNet | None = None) -> tuple[UNet, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    manifest = read_manifest(path)
    if model is None:
        model = UNet(NetworkConfig(**manifest["config"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = model.state_dict()
    for k, v in state.items():
        if k not in own or own[k].shape != v.shape:
            have = tuple(own[k].shape) if k in own else None
            raise CheckpointError(f"incompatible checkpoint {path}: {k} has shape {tuple(v.shape)}, model expects {have}")
    missing = set(own) - set(state)
    if missing:
        raise CheckpointError(f"incompatible checkpoint {path}: missing {sorted(missing)[:3]}")
    model.load_state_dict(state)
    return model, manifest
