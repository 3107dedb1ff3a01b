"""Downstream evaluations: R@1 retrieval, zero-shot classification, Kendall
tau-b against human judgments, CLIP-S / I0T-S pair scoring, and mean-rank
aggregation across models."""

from __future__ import annotations

import enum
import json
import math
from importlib import resources
from dataclasses import dataclass

import numpy as np

from gapkit.bnlayer import BnState
from gapkit.embstore import ClassTemplateSet, PairedDataset, as_array, unit_rows
from gapkit.errors import ConfigError, DataError, DimensionMismatchError
from gapkit.transforms import ModalityStats, center


class Transform(str, enum.Enum):
    NONE = "none"
    I0T_POST = "i0t_post"
    BN = "bn"


@dataclass(frozen=True)
class ScoreConfig:
    omega: float = 2.5
    clamp_negative: bool = True
    transform: Transform = Transform.NONE

    def __post_init__(self):
        object.__setattr__(self, "transform", Transform(self.transform))
        if not self.omega > 0:
            raise ConfigError(f"omega must be positive, got {self.omega}")

    @classmethod
    def clip_s(cls) -> "ScoreConfig":
        return cls(2.5, True, Transform.NONE)

    @classmethod
    def i0t_s(cls) -> "ScoreConfig":
        return cls(1.0, False, Transform.I0T_POST)


@dataclass(frozen=True)
class RetrievalResult:
    r_at_1_i2t: float
    r_at_1_t2i: float

    def to_dict(self) -> dict:
        return {"r_at_1_i2t": self.r_at_1_i2t, "r_at_1_t2i": self.r_at_1_t2i}


def similarity(x, y) -> np.ndarray:
    return unit_rows(as_array(x)) @ unit_rows(as_array(y)).T


def retrieval_r1(ds: PairedDataset) -> RetrievalResult:
    """Percent of images whose top text is their pair, and vice versa.

    Ties go to the lowest index.
    """
    sims = similarity(ds.images, ds.texts)
    hits = np.arange(ds.n)
    i2t = 100.0 * int(np.sum(sims.argmax(axis=1) == hits)) / ds.n
    t2i = 100.0 * int(np.sum(sims.argmax(axis=0) == hits)) / ds.n
    return RetrievalResult(i2t, t2i)


def class_embeddings(templates: ClassTemplateSet) -> np.ndarray:
    """Renormalized mean over each class's (normalized) template embeddings."""
    return unit_rows(np.stack([unit_rows(e).mean(axis=0) for e in templates.class_text_embeddings]), "class")


def zero_shot_predict(images, templates: ClassTemplateSet) -> np.ndarray:
    return similarity(images, class_embeddings(templates)).argmax(axis=1)


def zero_shot_classify(images, labels, templates: ClassTemplateSet, support_weighted: bool = False) -> float:
    """Balanced accuracy in percent: the mean of per-class recall over the
    classes present in ``labels``. ``support_weighted`` weights each recall by
    class frequency instead (which equals plain accuracy)."""
    labels = np.asarray(labels if labels is not None else templates.image_labels, dtype=np.int64)
    if labels.shape[0] != as_array(images).shape[0]:
        raise DimensionMismatchError("one label per image is required")
    if labels.size == 0:
        raise DataError("no images to classify")
    if labels.min() < 0 or labels.max() >= templates.num_classes:
        raise DataError("label outside the class range")
    pred = zero_shot_predict(images, templates)
    present = np.unique(labels)
    recalls = np.array([np.mean(pred[labels == c] == c) for c in present])
    if support_weighted:
        support = np.array([np.sum(labels == c) for c in present])
        return float(np.sum(recalls * support) / support.sum()) * 100.0
    return float(np.mean(recalls)) * 100.0


def kendall_tau_b(human, metric) -> float | None:
    """Kendall tau-b with tie correction.

    Returns None when either list is constant (tau-b undefined).
    """
    a = np.asarray(human, dtype=np.float64)
    b = np.asarray(metric, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatchError("kendall_tau_b needs two 1-D lists of equal length")
    n = a.shape[0]
    if n < 2:
        raise DataError("kendall_tau_b needs at least 2 observations")
    if np.any(np.isnan(a)) or np.any(np.isnan(b)):
        return None
    concordant = discordant = ties_a = ties_b = 0
    # row-blocked over the upper triangle to bound memory on long lists
    block = max(1, 4_000_000 // n)
    for start in range(0, n - 1, block):
        rows = np.arange(start, min(start + block, n - 1))
        da = np.sign(a[None, :] - a[rows, None])
        db = np.sign(b[None, :] - b[rows, None])
        upper = np.arange(n)[None, :] > rows[:, None]
        prod = (da * db)[upper]
        concordant += int(np.sum(prod > 0))
        discordant += int(np.sum(prod < 0))
        ties_a += int(np.sum(da[upper] == 0))
        ties_b += int(np.sum(db[upper] == 0))
    n0 = n * (n - 1) // 2
    denom = (n0 - ties_a) * (n0 - ties_b)
    if denom == 0:
        return None
    return (concordant - discordant) / math.sqrt(denom)


def _apply_transform(x, y, cfg: ScoreConfig, stats=None, bn=None):
    x, y = unit_rows(as_array(x)), unit_rows(as_array(y))
    if cfg.transform is Transform.I0T_POST:
        if stats is None:
            raise ConfigError("i0t_post scoring needs (image, text) modality stats")
        sx, sy = stats
        return unit_rows(center(x, sx), "centered image"), unit_rows(center(y, sy), "centered text")
    if cfg.transform is Transform.BN:
        if bn is None:
            raise ConfigError("bn scoring needs (image, text) batch-norm states")
        bx, by = bn
        return bx.forward(x).data, by.forward(y).data
    return x, y


def _finish(cos: np.ndarray, cfg: ScoreConfig) -> np.ndarray:
    if cfg.clamp_negative:
        cos = np.maximum(cos, 0.0)
    return cfg.omega * cos


def pair_score(
    image_row,
    text_row,
    cfg: ScoreConfig = ScoreConfig(),
    stats: tuple[ModalityStats, ModalityStats] | None = None,
    bn: tuple[BnState, BnState] | None = None,
) -> float:
    """omega * cosine after the configured transform; CLIP-S style configs
    clamp negative cosines to 0 before scaling."""
    x, y = _apply_transform(image_row, text_row, cfg, stats, bn)
    return float(_finish(np.sum(x * y, axis=1), cfg)[0])


def pair_scores(images, texts, cfg: ScoreConfig = ScoreConfig(), stats=None, bn=None) -> np.ndarray:
    """Row-wise scores of aligned (image, text) rows."""
    x, y = _apply_transform(images, texts, cfg, stats, bn)
    return _finish(np.sum(x * y, axis=1), cfg)


def score_matrix(images, texts, cfg: ScoreConfig = ScoreConfig(), stats=None, bn=None) -> np.ndarray:
    x, y = _apply_transform(images, texts, cfg, stats, bn)
    return _finish(x @ y.T, cfg)


@dataclass(frozen=True)
class ScoreSummary:
    min: float
    max: float
    mean: float
    counts: np.ndarray
    edges: np.ndarray

    def to_dict(self) -> dict:
        return {
            "min": self.min, "max": self.max, "mean": self.mean,
            "histogram": {"counts": self.counts.tolist(), "edges": self.edges.tolist()},
        }


def summarize_scores(scores, bins: int = 20) -> ScoreSummary:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise DataError("no scores to summarize")
    counts, edges = np.histogram(s, bins=bins)
    return ScoreSummary(float(s.min()), float(s.max()), float(s.mean()), counts, edges)


def score_distribution(ds: PairedDataset, cfg: ScoreConfig = ScoreConfig(), stats=None, bn=None,
                       bins: int = 20) -> ScoreSummary:
    """Summary of scores over the true pairs of ``ds``."""
    return summarize_scores(pair_scores(ds.images, ds.texts, cfg, stats, bn), bins)


HIGHER = "higher"
LOWER = "lower"


@dataclass(frozen=True)
class RankEntry:
    model: str
    mean_rank: float
    ranks: dict
    nan_metrics: tuple = ()


def rank_models(reports: dict, directions: dict) -> list[RankEntry]:
    """Mean of per-metric dense ranks (ties share a rank), best first.

    ``reports`` maps model name to {metric: value}; ``directions`` maps each
    metric to "higher" or "lower" (better). A NaN value ranks after every
    finite value on that metric and is listed in ``nan_metrics``.
    """
    if not reports:
        return []
    keys = set(directions)
    for name, metrics in reports.items():
        if set(metrics) != keys:
            raise DataError(f"model {name!r} does not report exactly the metrics {sorted(keys)}")
    for metric, sense in directions.items():
        if sense not in (HIGHER, LOWER):
            raise ConfigError(f"direction for {metric!r} must be 'higher' or 'lower'")
    names = list(reports)
    ranks = {name: {} for name in names}
    nans = {name: [] for name in names}
    for metric, sense in directions.items():
        vals = {name: float(reports[name][metric]) for name in names}
        finite = sorted({v for v in vals.values() if not math.isnan(v)}, reverse=sense == HIGHER)
        dense = {v: i + 1 for i, v in enumerate(finite)}
        for name, v in vals.items():
            if math.isnan(v):
                ranks[name][metric] = len(finite) + 1
                nans[name].append(metric)
            else:
                ranks[name][metric] = dense[v]
    entries = [
        RankEntry(name, float(np.mean(list(ranks[name].values()))), ranks[name], tuple(nans[name]))
        for name in names
    ]
    return sorted(entries, key=lambda e: (e.mean_rank, names.index(e.model)))


def load_reference_table() -> dict:
    """The bundled published comparison: {"models", "directions", "reported_rank"}.

    Missing entries are stored as NaN.
    """
    text = resources.files("gapkit").joinpath("data/table2.json").read_text()
    return json.loads(text)
