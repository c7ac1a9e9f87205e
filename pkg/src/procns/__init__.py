"""Weakly-supervised segmentation with prototype affinity and noise-aware self-training."""

__version__ = "0.1.0"
