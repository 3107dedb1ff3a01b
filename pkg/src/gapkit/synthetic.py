"""Synthetic paired embeddings with a controllable modality gap."""

from __future__ import annotations

import numpy as np

from gapkit.embstore import PairedDataset, unit_rows


def two_cluster_dataset(
    n: int = 2000,
    d: int = 256,
    offset: float = 1.0,
    semantic_scale: float = 1.0,
    noise: float = 0.3,
    seed: int = 0,
) -> PairedDataset:
    """Image and text clouds around two different directions.

    Pair ``i`` shares a semantic vector, so true pairs stay more similar than
    mismatched ones; each modality adds its own constant offset of norm
    ``offset`` along a random direction plus independent noise.
    """
    rng = np.random.default_rng(seed)
    cx, cy = unit_rows(rng.standard_normal((2, d)))
    sem = semantic_scale * rng.standard_normal((n, d)) / np.sqrt(d)
    x = offset * cx + sem + noise * rng.standard_normal((n, d)) / np.sqrt(d)
    y = offset * cy + sem + noise * rng.standard_normal((n, d)) / np.sqrt(d)
    return PairedDataset(unit_rows(x), unit_rows(y))


def peaked_dataset(
    n: int = 1000,
    d: int = 512,
    image_peak: float = -0.5,
    text_peak: float = 1 / 3,
    image_peak_dim: int = 92,
    text_peak_dims: tuple[int, int] = (133, 312),
    pattern_scale: float = 0.05,
    semantic_scale: float = 0.6,
    seed: int = 0,
) -> PairedDataset:
    """Embeddings carrying modality-specific peaks on top of a per-modality
    low-amplitude pattern spread over every dimension.

    The pattern entries are small enough to survive clipping to [-0.1, 0.1],
    which is what keeps the gap severe after clipping.
    """
    rng = np.random.default_rng(seed)
    px = pattern_scale * rng.choice([-1.0, 1.0], size=d)
    py = pattern_scale * rng.choice([-1.0, 1.0], size=d)
    px[image_peak_dim] = image_peak
    py[list(text_peak_dims)] = text_peak
    sem = semantic_scale * rng.standard_normal((n, d)) / np.sqrt(d)
    x = px + sem + 0.2 * semantic_scale * rng.standard_normal((n, d)) / np.sqrt(d)
    y = py + sem + 0.2 * semantic_scale * rng.standard_normal((n, d)) / np.sqrt(d)
    return PairedDataset(unit_rows(x), unit_rows(y))
