"""Modality-gap measurements: centroid distance, linear separability and
minimum cosine distance, plus the severity banding built on centroid distance."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from gapkit.embstore import PairedDataset, as_array, unit_rows
from gapkit.errors import ConfigError, DataError, DegenerateSystemError, DimensionMismatchError

SEVERE_AT = 0.63
MODERATE_AT = 0.19


class Severity(str, enum.Enum):
    SEVERE = "severe"
    MODERATE = "moderate"
    LOW = "low"


@dataclass(frozen=True)
class LsConfig:
    train_fraction: float = 0.7
    shuffle_seed: int = 42
    ridge_epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.ridge_epsilon < 0:
            raise ConfigError("ridge_epsilon must be non-negative")


@dataclass(frozen=True)
class GapReport:
    centroid_distance: float
    linear_separability: float
    min_cosine_distance: float
    severity: Severity

    def to_dict(self) -> dict:
        return {
            "centroid_distance": self.centroid_distance,
            "linear_separability": self.linear_separability,
            "min_cosine_distance": self.min_cosine_distance,
            "severity": self.severity.value,
        }


def _pair(ds):
    if isinstance(ds, PairedDataset):
        return ds.images.data, ds.texts.data
    x, y = (as_array(a) for a in ds)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatchError(f"image dim {x.shape[1]} != text dim {y.shape[1]}")
    return x, y


def centroid_gap(x: np.ndarray, y: np.ndarray) -> float:
    """Norm of the difference of column means, taken on the rows as given."""
    x, y = as_array(x), as_array(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatchError(f"image dim {x.shape[1]} != text dim {y.shape[1]}")
    return float(np.linalg.norm(x.mean(axis=0) - y.mean(axis=0)))


def centroid_distance(ds) -> float:
    """Distance between the mean unit-normalized image and text embeddings."""
    x, y = _pair(ds)
    return centroid_gap(unit_rows(x), unit_rows(y))


def linear_separability(ds, cfg: LsConfig = LsConfig()) -> float:
    """1 - test MSE of a least-squares regressor predicting modality.

    Images are labelled 1 and texts 0. The pooled rows are shuffled with
    ``cfg.shuffle_seed`` and split ``train_fraction`` / rest. The fit includes
    an intercept; ``ridge_epsilon`` is added to the diagonal of the normal
    equations. The result can be negative when the test MSE exceeds 1.
    """
    x, y = _pair(ds)
    x, y = unit_rows(x), unit_rows(y)
    pooled = np.concatenate([x, y])
    labels = np.concatenate([np.ones(len(x)), np.zeros(len(y))])
    total = len(pooled)
    if total < 10:
        raise DataError(f"linear separability needs at least 10 pooled rows, got {total}")
    order = np.random.default_rng(cfg.shuffle_seed).permutation(total)
    n_train = int(math.floor(cfg.train_fraction * total))
    train, test = order[:n_train], order[n_train:]

    design = np.hstack([pooled, np.ones((total, 1))])
    a = design[train]
    gram = a.T @ a + cfg.ridge_epsilon * np.eye(a.shape[1])
    try:
        coef = np.linalg.solve(gram, a.T @ labels[train])
    except np.linalg.LinAlgError as e:
        raise DegenerateSystemError("normal equations are singular even with ridge") from e
    if not np.all(np.isfinite(coef)):
        raise DegenerateSystemError("least-squares fit produced non-finite coefficients")
    resid = design[test] @ coef - labels[test]
    return float(1.0 - np.mean(resid**2))


def min_cosine_distance(ds, symmetric: bool = False) -> float:
    """Mean over images of 1 - (best cosine to any text).

    With ``symmetric`` the text->image direction is averaged in as well.
    """
    x, y = _pair(ds)
    if len(x) == 0 or len(y) == 0:
        raise DataError("min cosine distance of an empty dataset")
    sims = unit_rows(x) @ unit_rows(y).T
    i2t = float(np.mean(1.0 - sims.max(axis=1)))
    if not symmetric:
        return i2t
    t2i = float(np.mean(1.0 - sims.max(axis=0)))
    return 0.5 * (i2t + t2i)


def classify_severity(cd: float) -> Severity:
    if not cd >= 0:
        raise ValueError(f"centroid distance must be non-negative, got {cd}")
    if cd >= SEVERE_AT:
        return Severity.SEVERE
    if cd >= MODERATE_AT:
        return Severity.MODERATE
    return Severity.LOW


def severity_curves(cd: float) -> tuple[float, float]:
    """Piecewise-linear fits of (linear separability, min cosine distance)
    against centroid distance, with breakpoints at 0.19 and 0.63."""
    if cd < 0:
        raise ValueError(f"centroid distance must be non-negative, got {cd}")
    if cd < MODERATE_AT:
        ls = 4.53 * cd + 0.97 - 4.53 * 0.19
    else:
        ls = 0.04 * cd + 0.97 - 0.04 * 0.19
    if cd < SEVERE_AT:
        mcd = 0.17 * cd + 0.39 - 0.17 * 0.63
    else:
        mcd = 0.75 * cd + 0.39 - 0.75 * 0.63
    return ls, mcd


def gap_report(ds, ls_cfg: LsConfig = LsConfig(), symmetric_mcd: bool = False) -> GapReport:
    cd = centroid_distance(ds)
    return GapReport(
        centroid_distance=cd,
        linear_separability=linear_separability(ds, ls_cfg),
        min_cosine_distance=min_cosine_distance(ds, symmetric=symmetric_mcd),
        severity=classify_severity(cd),
    )
