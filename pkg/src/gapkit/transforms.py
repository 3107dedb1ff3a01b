"""Post-hoc repairs of the modality gap on precomputed embeddings.

``i0t_post`` removes each modality's mean and renormalizes. ``clip_activations``
and ``mg_shift`` are the two baselines it is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gapkit.embstore import EmbeddingMatrix, PairedDataset, as_array, unit_rows
from gapkit.errors import ConfigError, DimensionMismatchError


@dataclass(frozen=True)
class ModalityStats:
    mean: np.ndarray
    per_dim_std: np.ndarray
    source_n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "per_dim_std": self.per_dim_std.tolist(), "source_n": self.source_n}

    @classmethod
    def from_dict(cls, obj) -> "ModalityStats":
        return cls(np.asarray(obj["mean"], float), np.asarray(obj["per_dim_std"], float), int(obj["source_n"]))


@dataclass(frozen=True)
class MgShiftConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ConfigError("lambda must be finite")


def compute_modality_stats(m) -> ModalityStats:
    a = as_array(m)
    return ModalityStats(mean=a.mean(axis=0), per_dim_std=a.std(axis=0), source_n=a.shape[0])


def center(m, stats: ModalityStats) -> np.ndarray:
    """Rows minus the modality mean, before renormalization."""
    a = as_array(m)
    if stats.mean.shape != (a.shape[1],):
        raise DimensionMismatchError(f"stats have dim {stats.mean.shape[0]}, embeddings {a.shape[1]}")
    return a - stats.mean


def i0t_post(m, stats: ModalityStats) -> EmbeddingMatrix:
    """Subtract the modality mean from every row, then renormalize.

    ``stats`` is passed in rather than recomputed so that statistics from a
    reference split can be applied to new data.
    """
    return EmbeddingMatrix(unit_rows(center(m, stats), "centered row"))


def i0t_post_pair(ds: PairedDataset, image_stats=None, text_stats=None) -> PairedDataset:
    image_stats = image_stats or compute_modality_stats(ds.images)
    text_stats = text_stats or compute_modality_stats(ds.texts)
    return PairedDataset(i0t_post(ds.images, image_stats), i0t_post(ds.texts, text_stats), ds.ids)


def clip_raw(m, lo: float = -0.1, hi: float = 0.1) -> np.ndarray:
    if not lo < hi:
        raise ConfigError(f"clip range needs lo < hi, got [{lo}, {hi}]")
    return np.clip(as_array(m), lo, hi)


def clip_activations(m, lo: float = -0.1, hi: float = 0.1) -> EmbeddingMatrix:
    """Clamp every activation into [lo, hi], then renormalize rows."""
    return EmbeddingMatrix(unit_rows(clip_raw(m, lo, hi), "clipped row"))


def mg_shift_raw(ds: PairedDataset, cfg: MgShiftConfig) -> tuple[np.ndarray, np.ndarray]:
    """Shift images by -lam*gap and texts by +lam*gap, gap = mean(x) - mean(y).

    Returns the shifted rows before renormalization; their centroid distance
    is exactly |1 - 2*lam| times the original one.
    """
    x, y = ds.images.data, ds.texts.data
    gap = x.mean(axis=0) - y.mean(axis=0)
    return x - cfg.lam * gap, y + cfg.lam * gap


def mg_shift(ds: PairedDataset, cfg: MgShiftConfig) -> PairedDataset:
    x, y = mg_shift_raw(ds, cfg)
    return PairedDataset(
        EmbeddingMatrix(unit_rows(x, "shifted image row")),
        EmbeddingMatrix(unit_rows(y, "shifted text row")),
        ds.ids,
    )
