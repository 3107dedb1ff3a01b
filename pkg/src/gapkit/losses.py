"""Contrastive and cyclic losses on unit-norm batches, the four-way MCSIE
composition over original/augmented embeddings, and analytic gradients with
respect to the batch-norm affine parameters of both modalities.

Conventions:

* ``clip``: symmetric cross-entropy over ``exp(temperature_log_scale) * X Y^T``,
  averaging the image->text and text->image directions.
* ``i_cyclic`` = mean_{j,k} (<x_j,x_k> - <y_j,y_k>)^2 and
  ``c_cyclic`` = mean_{j,k} (<x_j,y_k> - <x_k,y_j>)^2, on raw cosines.
* ``cyclip`` = clip + w * i_cyclic + w * c_cyclic with w = ``cyclic_weight``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from gapkit.bnlayer import BnState, batch_moments, standardize
from gapkit.embstore import as_array, unit_rows
from gapkit.errors import ConfigError, DimensionMismatchError, NonFiniteGradientError


class LossKind(str, enum.Enum):
    CLIP = "clip"
    CYCLIP = "cyclip"
    MCSIE_CYCLIP = "mcsie_cyclip"
    MCSIE_CLIP = "mcsie_clip"

    @property
    def is_mcsie(self) -> bool:
        return self in (LossKind.MCSIE_CYCLIP, LossKind.MCSIE_CLIP)

    @property
    def base(self) -> "LossKind":
        return {LossKind.MCSIE_CYCLIP: LossKind.CYCLIP, LossKind.MCSIE_CLIP: LossKind.CLIP}.get(self, self)


@dataclass(frozen=True)
class LossConfig:
    temperature_log_scale: float = 4.6052
    cyclic_weight: float = 0.25
    loss_kind: LossKind = LossKind.CYCLIP

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        try:
            math.exp(self.temperature_log_scale)
        except OverflowError:
            raise ConfigError("exp(temperature_log_scale) overflows") from None
        if self.cyclic_weight < 0:
            raise ConfigError("cyclic_weight must be non-negative")

    @property
    def logit_scale(self) -> float:
        return math.exp(self.temperature_log_scale)


@dataclass(frozen=True)
class LossValue:
    """Total loss and its named parts; ``total == sum(weights[k] * components[k])``."""

    total: float
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)


def _check_batch(x, y):
    x, y = as_array(x), as_array(y)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"batch shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise DimensionMismatchError("contrastive losses need a batch of at least 2")
    return x, y


def _log_softmax(s: np.ndarray, axis: int) -> np.ndarray:
    top = s.max(axis=axis, keepdims=True)
    shifted = s - top
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _clip_terms(x, y, scale):
    m = x.shape[0]
    s = scale * (x @ y.T)
    row = _log_softmax(s, axis=1)
    col = _log_softmax(s, axis=0)
    i2t = -float(np.mean(np.diag(row)))
    t2i = -float(np.mean(np.diag(col)))
    eye = np.eye(m)
    g = 0.5 * ((np.exp(row) - eye) + (np.exp(col) - eye)) / m  # dL/dS
    return i2t, t2i, scale * g @ y, scale * g.T @ x


def _i_cyclic_terms(x, y):
    m = x.shape[0]
    diff = x @ x.T - y @ y.T
    val = float(np.sum(diff**2)) / m**2
    return val, 4.0 * diff @ x / m**2, -4.0 * diff @ y / m**2


def _c_cyclic_terms(x, y):
    m = x.shape[0]
    c = x @ y.T
    e = c - c.T
    val = float(np.sum(e**2)) / m**2
    return val, 4.0 * e @ y / m**2, -4.0 * e @ x / m**2


def clip_loss(x, y, cfg: LossConfig = LossConfig()) -> LossValue:
    x, y = _check_batch(x, y)
    i2t, t2i, _, _ = _clip_terms(x, y, cfg.logit_scale)
    return LossValue(0.5 * (i2t + t2i), {"i2t": i2t, "t2i": t2i}, {"i2t": 0.5, "t2i": 0.5})


def i_cyclic_loss(x, y) -> float:
    x, y = _check_batch(x, y)
    return _i_cyclic_terms(x, y)[0]


def c_cyclic_loss(x, y) -> float:
    x, y = _check_batch(x, y)
    return _c_cyclic_terms(x, y)[0]


def _base_with_grads(x, y, kind: LossKind, cfg: LossConfig):
    i2t, t2i, gx, gy = _clip_terms(x, y, cfg.logit_scale)
    clip = 0.5 * (i2t + t2i)
    if kind is LossKind.CLIP:
        return LossValue(clip, {"i2t": i2t, "t2i": t2i}, {"i2t": 0.5, "t2i": 0.5}), gx, gy
    w = cfg.cyclic_weight
    ic, gxi, gyi = _i_cyclic_terms(x, y)
    cc, gxc, gyc = _c_cyclic_terms(x, y)
    value = LossValue(
        clip + w * ic + w * cc,
        {"clip": clip, "i_cyclic": ic, "c_cyclic": cc},
        {"clip": 1.0, "i_cyclic": w, "c_cyclic": w},
    )
    return value, gx + w * (gxi + gxc), gy + w * (gyi + gyc)


def base_loss(x, y, cfg: LossConfig = LossConfig(), kind: LossKind | None = None) -> LossValue:
    """Loss of one (image batch, text batch) pair: clip or cyclip."""
    x, y = _check_batch(x, y)
    return _base_with_grads(x, y, (kind or cfg.loss_kind).base, cfg)[0]


MCSIE_KEYS = (("I", "T"), ("I", "T_aug"), ("I_aug", "T"), ("I_aug", "T_aug"))


def _mcsie_with_grads(batches: dict, cfg: LossConfig):
    kind = cfg.loss_kind.base
    grads = {k: np.zeros_like(v) for k, v in batches.items()}
    comps = {}
    for ik, tk in MCSIE_KEYS:
        value, gx, gy = _base_with_grads(batches[ik], batches[tk], kind, cfg)
        comps[f"{ik}|{tk}"] = value.total
        grads[ik] += gx
        grads[tk] += gy
    total = sum(comps.values())
    return LossValue(total, comps, {k: 1.0 for k in comps}), grads


def mcsie_loss(i, i_aug, t, t_aug, cfg: LossConfig = LossConfig(loss_kind=LossKind.MCSIE_CYCLIP)) -> LossValue:
    """Sum of the base loss over the four (image set, text set) combinations."""
    batches = dict(zip(("I", "I_aug", "T", "T_aug"), (as_array(a) for a in (i, i_aug, t, t_aug))))
    shapes = {b.shape for b in batches.values()}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"MCSIE batches disagree in shape: {sorted(shapes)}")
    return _mcsie_with_grads(batches, cfg)[0]


@dataclass(frozen=True)
class BnGrads:
    w_img: np.ndarray
    b_img: np.ndarray
    w_txt: np.ndarray
    b_txt: np.ndarray

    def items(self):
        return (("w_img", self.w_img), ("b_img", self.b_img), ("w_txt", self.w_txt), ("b_txt", self.b_txt))


class _BnTape:
    """Forward through one modality's layer, remembering what backward needs."""

    def __init__(self, x, state: BnState, stats_source: str):
        if stats_source == "batch":
            mean, var = batch_moments(x)
        elif stats_source == "running":
            mean, var = state.stats.mean, state.stats.var
        else:
            raise ConfigError(f"unknown stats source {stats_source!r}")
        p = state.params
        self.z = standardize(x, mean, var, p.epsilon)
        h = p.weight * self.z + p.bias
        self.norm = np.linalg.norm(h, axis=1, keepdims=True)
        self.u = unit_rows(h, "batch-normalized row")

    def backward(self, gu):
        gh = (gu - self.u * np.sum(self.u * gu, axis=1, keepdims=True)) / self.norm
        return np.sum(gh * self.z, axis=0), np.sum(gh, axis=0)


def loss_and_grad_bn(
    images,
    texts,
    image_state: BnState,
    text_state: BnState,
    cfg: LossConfig = LossConfig(),
    images_aug=None,
    texts_aug=None,
    stats_source: str = "running",
) -> tuple[LossValue, BnGrads]:
    """Loss of the batch-normalized batches and its gradient w.r.t. W and b of
    both layers. The input embeddings are constants; only the affine
    parameters receive gradients.

    MCSIE kinds require ``images_aug`` and ``texts_aug``; both pass through
    the same layer as their originals.
    """
    images, texts = _check_batch(images, texts)
    tapes = {"I": _BnTape(images, image_state, stats_source), "T": _BnTape(texts, text_state, stats_source)}
    if cfg.loss_kind.is_mcsie:
        if images_aug is None or texts_aug is None:
            raise ConfigError("MCSIE losses need augmented image and text batches")
        images_aug, texts_aug = _check_batch(images_aug, texts_aug)
        if images_aug.shape != images.shape:
            raise DimensionMismatchError("augmented batches must match the originals in shape")
        tapes["I_aug"] = _BnTape(images_aug, image_state, stats_source)
        tapes["T_aug"] = _BnTape(texts_aug, text_state, stats_source)
        value, gu = _mcsie_with_grads({k: tp.u for k, tp in tapes.items()}, cfg)
    else:
        value, gx, gy = _base_with_grads(tapes["I"].u, tapes["T"].u, cfg.loss_kind, cfg)
        gu = {"I": gx, "T": gy}

    grads = {}
    for name, keys in (("img", ("I", "I_aug")), ("txt", ("T", "T_aug"))):
        gw = gb = 0.0
        for k in keys:
            if k in gu:
                dw, db = tapes[k].backward(gu[k])
                gw, gb = gw + dw, gb + db
        grads["w_" + name], grads["b_" + name] = gw, gb
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    return value, BnGrads(**grads)


def bn_loss(images, texts, image_state, text_state, cfg=LossConfig(), images_aug=None, texts_aug=None,
            stats_source="running") -> LossValue:
    """Loss only; same semantics as ``loss_and_grad_bn``."""
    return loss_and_grad_bn(images, texts, image_state, text_state, cfg, images_aug, texts_aug, stats_source)[0]


def gaussian_augment(m, sigma: float, seed) -> np.ndarray:
    """Stand-in for encoder dropout: add N(0, sigma^2) noise, renormalize rows."""
    a = as_array(m)
    rng = np.random.default_rng(seed)
    return unit_rows(a + sigma * rng.standard_normal(a.shape), "augmented row")
