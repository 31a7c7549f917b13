"""Synthetic low-rank ground-truth scenes for desk-scale experiments."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

from .cube import HsiCube


def low_rank_factors(height: int, width: int, bands: int, rank: int, seed: int = 0):
    """(E, A): Gaussian-bump spectra (bands x rank) and smooth abundance fields (rank x H*W)."""
    if min(height, width, bands, rank) < 1:
        raise ValueError("dimensions and rank must be >= 1")
    if rank > min(bands, height * width):
        raise ValueError(f"rank {rank} exceeds min(bands, pixels) = {min(bands, height * width)}")
    rng = np.random.default_rng(seed)
    x = np.arange(bands, dtype=np.float64)
    centers = (np.arange(rank) + rng.uniform(0.2, 0.8, rank)) * bands / rank
    widths = bands / (2.0 * rank) * rng.uniform(0.7, 1.3, rank)
    e = np.exp(-((x[:, None] - centers[None, :]) ** 2) / (2 * widths[None, :] ** 2))

    fields = rng.uniform(0.0, 1.0, size=(rank, height, width))
    for _ in range(2):
        fields = uniform_filter(fields, size=(1, 5, 5), mode="mirror")
    a = fields.reshape(rank, -1)
    lo, hi = a.min(axis=1, keepdims=True), a.max(axis=1, keepdims=True)
    a = (a - lo) / np.where(hi > lo, hi - lo, 1.0)
    return e, a


def make_gt(height: int, width: int, bands: int, rank: int, seed: int = 0) -> HsiCube:
    """E @ A folded to a cube and min-max normalized to [0, 1]."""
    e, a = low_rank_factors(height, width, bands, rank, seed)
    z = e @ a
    lo, hi = z.min(), z.max()
    z = (z - lo) / (hi - lo) if hi > lo else np.zeros_like(z)
    return HsiCube(z.reshape(bands, height, width))
