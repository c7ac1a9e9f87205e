"""Partial cross-entropy, prototype-based affinity loss and noisy-region Dice loss."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import AffinityConfig
from .prototypes import refine_prediction

EPS_LOG = 1e-12
EPS_DICE = 1e-8


class ZeroLabeledError(ValueError):
    """Raised when a partial loss receives no labeled pixel."""


def low_level_weight(loc_m, loc_n, v_m, v_n, cfg: AffinityConfig) -> float:
    d2 = sum((a - b) ** 2 for a, b in zip(loc_m, loc_n))
    return math.exp(-d2 / (2 * cfg.sigma_l**2) - (v_m - v_n) ** 2 / (2 * cfg.sigma_v**2))


def _shift(x, dy, dx):
    """out[..., y, x] = x[..., y + dy, x + dx], zero where that falls outside."""
    h, w = x.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return torch.zeros_like(x)
    src = x[..., max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)]
    return F.pad(src, (max(-dx, 0), max(dx, 0), max(-dy, 0), max(dy, 0)))


def _offsets(r):
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy or dx]


def low_affinity(image: torch.Tensor, cfg: AffinityConfig) -> torch.Tensor:
    """Sum of Gaussian location/intensity weights over each pixel's truncated window.

    ``image`` is ``B x K x H x W``; multi-channel intensity differences are the
    mean squared channel difference. Returns ``B x 1 x H x W``.
    """
    h, w = image.shape[-2:]
    ones = torch.ones((1, 1, h, w), dtype=image.dtype)
    out = torch.zeros((image.shape[0], 1, h, w), dtype=image.dtype)
    for dy, dx in _offsets(cfg.radius):
        valid = _shift(ones, dy, dx)
        if not valid.any():
            continue
        dv2 = ((image - _shift(image, dy, dx)) ** 2).mean(dim=1, keepdim=True)
        wgt = torch.exp(-(dy * dy + dx * dx) / (2 * cfg.sigma_l**2) - dv2 / (2 * cfg.sigma_v**2))
        out = out + wgt * valid
    return out


def high_affinity(p_hat: torch.Tensor, radius: int) -> torch.Tensor:
    """Sum of neighbour probabilities over the truncated window, excluding the centre."""
    c, k = p_hat.shape[1], 2 * radius + 1
    kernel = torch.ones((c, 1, k, k), dtype=p_hat.dtype)
    kernel[..., radius, radius] = 0
    return F.conv2d(p_hat, kernel, padding=radius, groups=c)


def neighbour_count(h: int, w: int, radius: int) -> torch.Tensor:
    """``|W_m minus {m}|`` for the truncated window at every pixel (``1 x 1 x H x W``)."""
    k = 2 * radius + 1
    ones = torch.ones((1, 1, h, w), dtype=torch.float64)
    return F.avg_pool2d(ones, k, stride=1, padding=radius, count_include_pad=True) * (k * k) - 1


def affinity_matrices(image, p_hat, cfg: AffinityConfig):
    """Raw (un-normalized) window sums ``(A_low: B x 1 x H x W, A_high: B x C x H x W)``."""
    return low_affinity(image, cfg), high_affinity(p_hat, cfg.radius)


def prsa_pixel_terms(image, p_hat, cfg: AffinityConfig, a_low=None) -> torch.Tensor:
    """Per-pixel affinity terms (``B x H x W``); the loss is minus their mean.

    ``a_low`` may be passed precomputed since it depends on the image only.
    """
    if a_low is None:
        a_low = low_affinity(image, cfg)
    a_high = high_affinity(p_hat, cfg.radius)
    if cfg.normalize:
        n = neighbour_count(*p_hat.shape[-2:], cfg.radius).to(p_hat.dtype).clamp_min(1)
        a_low, a_high = a_low / n, a_high / n
    if cfg.interpretation == "CLASS_MATCHED":
        return (a_high * a_low * p_hat).sum(dim=1)
    # printed form: class-summed high affinity times class-summed prediction
    return a_high.sum(dim=1) * a_low[:, 0] * p_hat.sum(dim=1)


def prsa_loss_from_refined(image, p_hat, cfg: AffinityConfig, a_low=None) -> torch.Tensor:
    return -prsa_pixel_terms(image, p_hat, cfg, a_low).mean()


def prsa_loss(image, logits, relation, cfg: AffinityConfig) -> torch.Tensor:
    return prsa_loss_from_refined(image, refine_prediction(logits, relation), cfg)


def pce_loss(prob: torch.Tensor, sparse: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over labeled pixels only (all-zero class vectors are unlabeled)."""
    labeled = sparse.sum(dim=1) > 0
    n = labeled.sum()
    if n == 0:
        raise ZeroLabeledError("pCE loss received no labeled pixel")
    ce = -(sparse * torch.log(prob + EPS_LOG)).sum(dim=1)
    return ce[labeled].sum() / n


def noise_dice_loss(p_noisy: torch.Tensor, y_soft: torch.Tensor) -> torch.Tensor:
    total = p_noisy.sum() + y_soft.sum()
    if total == 0:
        return p_noisy.sum() * 0.0
    return 1 - 2 * (p_noisy * y_soft).sum() / (total + EPS_DICE)
