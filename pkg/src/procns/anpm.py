"""Adaptive noise perception and masking.

Labels here are one-hot ``B x C x H x W`` tensors (or ``C x H x W`` for a single
sample); an all-zero class vector marks an unlabeled pixel.
"""
from __future__ import annotations

import torch


def onehot_argmax(pred: torch.Tensor) -> torch.Tensor:
    """One-hot of the per-pixel argmax over the class axis (-3); ties go to the lowest index."""
    idx = pred.argmax(dim=-3, keepdim=True)
    return torch.zeros_like(pred).scatter_(-3, idx, 1.0)


def extract_masks(pred: torch.Tensor, prev_label: torch.Tensor):
    """Reliable mask (prediction AND label) and noisy mask (prediction XOR label), per channel."""
    if pred.shape != prev_label.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and label {tuple(prev_label.shape)} differ")
    o = onehot_argmax(pred).bool()
    y = prev_label.bool()
    return (o & y).to(pred.dtype), (o ^ y).to(pred.dtype)


def update_denoised_label(m_r: torch.Tensor, prev_label: torch.Tensor) -> torch.Tensor:
    return m_r * prev_label


def reassign_noisy(m_n: torch.Tensor, prob: torch.Tensor, p_hat: torch.Tensor):
    """Restrict the prediction and the (detached) refined prediction to the noisy region."""
    return m_n * prob, (m_n * p_hat).detach()


def anpm_round(pred, prev_label):
    """One epoch-end update: returns (new_label, reliable_mask, noisy_mask)."""
    m_r, m_n = extract_masks(pred, prev_label)
    return update_denoised_label(m_r, prev_label), m_r, m_n
