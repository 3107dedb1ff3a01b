"""Two-phase fitting of per-modality batch-norm layers on frozen embeddings.

Phase one streams shuffled mini-batches through the momentum update to get
running means/variances. Phase two trains the affine weights and biases with
AdamW (decoupled weight decay) against one of the losses in ``gapkit.losses``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from gapkit.bnlayer import BatchNormParams, BnState, RunningStats, update_running_stats
from gapkit.embstore import PairedDataset, unit_rows
from gapkit.errors import (
    ConfigError,
    DataError,
    NonFiniteGradientError,
    TrainingDivergedError,
    ZeroNormRowError,
)
from gapkit.gapmetrics import centroid_distance, centroid_gap
from gapkit.losses import LossConfig, LossKind, loss_and_grad_bn

log = logging.getLogger(__name__)

PAPER_BATCH_SIZES = (64, 128, 256, 512)
PAPER_LEARNING_RATE = 1e-6


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 64
    epochs: int = 3
    max_steps: int | None = None  # overrides epochs for the affine phase when set
    learning_rate: float = 1e-2
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 42
    loss_kind: LossKind = LossKind.CYCLIP
    temperature_log_scale: float = 4.6052
    cyclic_weight: float = 0.25
    alpha: float = 0.1
    epsilon: float = 1e-5
    stats_epochs: int | None = None  # defaults to ``epochs``
    forward_stats: str = "running"  # or "batch"
    joint_stats: bool = False  # keep updating running stats while training
    probe_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.forward_stats not in ("running", "batch"):
            raise ConfigError(f"forward_stats must be 'running' or 'batch', got {self.forward_stats!r}")
        if self.probe_every < 1:
            raise ConfigError("probe_every must be at least 1")
        if self.batch_size not in PAPER_BATCH_SIZES:
            log.warning("batch size %d is outside %s", self.batch_size, PAPER_BATCH_SIZES)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.temperature_log_scale, self.cyclic_weight, self.loss_kind)


@dataclass(frozen=True)
class StepRecord:
    step: int
    total: float
    components: dict
    probe_cd: float | None = None


@dataclass
class TrainLog:
    initial_probe_cd: float | None = None
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("training steps must be strictly increasing")
        self.records.append(rec)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    @property
    def final_probe_cd(self) -> float | None:
        for r in reversed(self.records):
            if r.probe_cd is not None:
                return r.probe_cd
        return self.initial_probe_cd

    def write_csv(self, path) -> None:
        keys = sorted({k for r in self.records for k in r.components})
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "total", *keys, "probe_cd"])
            for r in self.records:
                w.writerow(
                    [r.step, repr(r.total), *(repr(r.components.get(k, "")) for k in keys),
                     "" if r.probe_cd is None else repr(r.probe_cd)]
                )


def _batches(n: int, size: int, rng: np.random.Generator):
    """Shuffled index batches; indices are sorted within each batch and a
    trailing batch of fewer than 2 rows is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, size):
        idx = order[start:start + size]
        if len(idx) >= 2:
            yield np.sort(idx)


def fit_running_stats(ds: PairedDataset, cfg: TrainerConfig = TrainerConfig()) -> tuple[RunningStats, RunningStats]:
    if ds.n < cfg.batch_size:
        raise DataError(f"dataset of {ds.n} pairs is smaller than batch size {cfg.batch_size}")
    x, y = unit_rows(ds.images.data), unit_rows(ds.texts.data)
    rs_x = RunningStats.init(ds.d, cfg.alpha)
    rs_y = RunningStats.init(ds.d, cfg.alpha)
    rng = np.random.default_rng([cfg.shuffle_seed, 0])
    for _ in range(cfg.epochs if cfg.stats_epochs is None else cfg.stats_epochs):
        for idx in _batches(ds.n, cfg.batch_size, rng):
            rs_x = update_running_stats(rs_x, x[idx])
            rs_y = update_running_stats(rs_y, y[idx])
    return rs_x, rs_y


def _probe_cd(probe: PairedDataset, img: BnState, txt: BnState) -> float:
    return centroid_gap(img.forward(unit_rows(probe.images.data)).data, txt.forward(unit_rows(probe.texts.data)).data)


class _AdamW:
    def __init__(self, cfg: TrainerConfig, shapes: dict):
        self.cfg = cfg
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        c = self.cfg
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.adam_beta1 * self.m[k] + (1 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1 - c.adam_beta2) * g * g
            m_hat = self.m[k] / (1 - c.adam_beta1**self.t)
            v_hat = self.v[k] / (1 - c.adam_beta2**self.t)
            decayed = p * (1 - c.learning_rate * c.weight_decay)
            out[k] = decayed - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)
        return out


def train_bn(
    ds: PairedDataset,
    cfg: TrainerConfig = TrainerConfig(),
    aug: PairedDataset | None = None,
    stats: tuple[RunningStats, RunningStats] | None = None,
    probe: PairedDataset | None = None,
) -> tuple[BnState, BnState, TrainLog]:
    """Fit running stats (unless given), then train W and b of both layers.

    ``aug`` supplies augmented embeddings row-aligned with ``ds``; it is
    required for MCSIE losses. ``probe`` defaults to ``ds``; its centroid
    distance after the layers is logged every ``cfg.probe_every`` steps.
    Input matrices are never modified.
    """
    if cfg.loss_kind.is_mcsie:
        if aug is None:
            raise ConfigError("MCSIE training needs an augmented dataset")
        if aug.n != ds.n or aug.d != ds.d:
            raise DataError("augmented dataset must be row-aligned with the training set")
    if ds.n < cfg.batch_size:
        raise DataError(f"dataset of {ds.n} pairs is smaller than batch size {cfg.batch_size}")
    rs_x, rs_y = stats if stats is not None else fit_running_stats(ds, cfg)
    probe = probe if probe is not None else ds
    x, y = unit_rows(ds.images.data), unit_rows(ds.texts.data)
    xa = ya = None
    if aug is not None and cfg.loss_kind.is_mcsie:
        xa, ya = unit_rows(aug.images.data), unit_rows(aug.texts.data)

    params = {
        "w_img": np.ones(ds.d), "b_img": np.zeros(ds.d),
        "w_txt": np.ones(ds.d), "b_txt": np.zeros(ds.d),
    }
    opt = _AdamW(cfg, {k: v.shape for k, v in params.items()})
    loss_cfg = cfg.loss_config
    trace = TrainLog(initial_probe_cd=centroid_distance(probe))

    def states(p):
        return (
            BnState(rs_x, BatchNormParams(p["w_img"], p["b_img"], cfg.epsilon)),
            BnState(rs_y, BatchNormParams(p["w_txt"], p["b_txt"], cfg.epsilon)),
        )

    rng = np.random.default_rng([cfg.shuffle_seed, 1])
    step = 0
    total_steps = cfg.max_steps
    epoch = 0
    while True:
        if total_steps is None and epoch >= cfg.epochs:
            break
        if total_steps is not None and step >= total_steps:
            break
        epoch += 1
        for idx in _batches(ds.n, cfg.batch_size, rng):
            if total_steps is not None and step >= total_steps:
                break
            if cfg.joint_stats:
                rs_x = update_running_stats(rs_x, x[idx])
                rs_y = update_running_stats(rs_y, y[idx])
            img, txt = states(params)
            step += 1
            try:
                value, grads = loss_and_grad_bn(
                    x[idx], y[idx], img, txt, loss_cfg,
                    None if xa is None else xa[idx], None if ya is None else ya[idx],
                    stats_source=cfg.forward_stats,
                )
            except (NonFiniteGradientError, ZeroNormRowError) as e:
                raise TrainingDivergedError(step, (img, txt), trace) from e
            if not np.isfinite(value.total):
                raise TrainingDivergedError(step, (img, txt), trace)
            params = opt.step(params, dict(grads.items()))
            probe_cd = None
            if step % cfg.probe_every == 0:
                probe_cd = _probe_cd(probe, *states(params))
            trace.append(StepRecord(step, value.total, dict(value.components), probe_cd))
    if trace.records and trace.records[-1].probe_cd is None:
        last = trace.records[-1]
        trace.records[-1] = StepRecord(last.step, last.total, last.components, _probe_cd(probe, *states(params)))
    img, txt = states(params)
    return img, txt, trace
