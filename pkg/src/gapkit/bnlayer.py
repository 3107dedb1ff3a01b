"""Per-modality batch normalization on unit-normalized embeddings.

Each modality owns its own running statistics and affine parameters. The
forward pass always standardizes with the running statistics, applies the
elementwise affine map and renormalizes the row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from gapkit.embstore import EmbeddingMatrix, as_array, normalize_rows, unit_rows
from gapkit.errors import ConfigError, DataError, DimensionMismatchError


@dataclass(frozen=True)
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    alpha: float = 0.1
    t: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"momentum alpha must lie in (0, 1], got {self.alpha}")
        if np.any(np.asarray(self.var) < 0):
            raise ConfigError("running variance must be non-negative")

    @classmethod
    def init(cls, d: int, alpha: float = 0.1) -> "RunningStats":
        return cls(np.zeros(d), np.ones(d), alpha, 0)

    @property
    def d(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class BatchNormParams:
    weight: np.ndarray
    bias: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ConfigError("batch-norm parameters must be finite")

    @classmethod
    def identity(cls, d: int, epsilon: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(d), np.zeros(d), epsilon)


def batch_moments(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and population variance."""
    mu = batch.mean(axis=0)
    return mu, ((batch - mu) ** 2).mean(axis=0)


def update_running_stats(rs: RunningStats, batch) -> RunningStats:
    """One momentum step: stat <- alpha * batch_stat + (1 - alpha) * stat."""
    b = as_array(batch)
    if b.shape[1] != rs.d:
        raise DimensionMismatchError(f"batch dim {b.shape[1]} != running stats dim {rs.d}")
    if b.shape[0] < 2:
        raise DataError("a running-stats update needs at least 2 rows")
    mu, var = batch_moments(b)
    a = rs.alpha
    return replace(rs, mean=a * mu + (1 - a) * rs.mean, var=a * var + (1 - a) * rs.var, t=rs.t + 1)


def standardize(x: np.ndarray, mean: np.ndarray, var: np.ndarray, epsilon: float) -> np.ndarray:
    if x.shape[1] != len(mean):
        raise DimensionMismatchError(f"input dim {x.shape[1]} != batch-norm dim {len(mean)}")
    return (x - mean) / np.sqrt(var + epsilon)


def bn_forward(x, rs: RunningStats, params: BatchNormParams) -> EmbeddingMatrix:
    z = standardize(as_array(x), rs.mean, rs.var, params.epsilon)
    return EmbeddingMatrix(unit_rows(params.weight * z + params.bias, "batch-normalized row"))


def encode_with_optional_bn(m, rs: RunningStats, params: BatchNormParams, add_batch_norm: bool) -> EmbeddingMatrix:
    """Encoder tail: pass-through, or row-normalize then batch-normalize."""
    if not add_batch_norm:
        return m if isinstance(m, EmbeddingMatrix) else EmbeddingMatrix(m)
    return bn_forward(normalize_rows(m), rs, params)


@dataclass(frozen=True)
class BnState:
    """Everything one modality's layer needs at inference time."""

    stats: RunningStats
    params: BatchNormParams

    def forward(self, x) -> EmbeddingMatrix:
        return bn_forward(x, self.stats, self.params)

    def to_dict(self) -> dict:
        return {
            "alpha": self.stats.alpha,
            "t": self.stats.t,
            "mean": self.stats.mean.tolist(),
            "var": self.stats.var.tolist(),
            "weight": self.params.weight.tolist(),
            "bias": self.params.bias.tolist(),
            "epsilon": self.params.epsilon,
        }

    @classmethod
    def from_dict(cls, obj) -> "BnState":
        try:
            stats = RunningStats(
                np.asarray(obj["mean"], float), np.asarray(obj["var"], float), float(obj["alpha"]), int(obj["t"])
            )
            params = BatchNormParams(
                np.asarray(obj["weight"], float), np.asarray(obj["bias"], float), float(obj["epsilon"])
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed batch-norm state: {e}") from e
        dims = {len(stats.mean), len(stats.var), len(params.weight), len(params.bias)}
        if len(dims) != 1:
            raise DimensionMismatchError("batch-norm state vectors disagree on length")
        return cls(stats, params)


def save_bn_states(path, image: BnState, text: BnState) -> None:
    with open(path, "w") as f:
        json.dump({"image": image.to_dict(), "text": text.to_dict()}, f)


def load_bn_states(path) -> tuple[BnState, BnState]:
    with open(path) as f:
        obj = json.load(f)
    try:
        return BnState.from_dict(obj["image"]), BnState.from_dict(obj["text"])
    except KeyError as e:
        raise DataError(f"{path}: missing modality {e}") from e
