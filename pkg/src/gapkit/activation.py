"""Per-dimension activation profiles, peak detection, and the cosine upper
bound implied by modality-specific peak activations.

Dimension indices are 0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gapkit.embstore import as_array
from gapkit.errors import ConfigError


@dataclass(frozen=True)
class Peak:
    dim: int
    mean: float
    sign: int


@dataclass(frozen=True)
class ActivationProfile:
    per_dim_mean: np.ndarray
    per_dim_std: np.ndarray
    peaks: tuple = field(default=())

    @property
    def peak_dims(self) -> list[int]:
        return [p.dim for p in self.peaks]

    def rows(self):
        """(dim, mean, std, is_peak) tuples, for CSV export."""
        dims = set(self.peak_dims)
        for j, (mu, sd) in enumerate(zip(self.per_dim_mean, self.per_dim_std)):
            yield j, float(mu), float(sd), j in dims


def profile_activations(m, peak_factor: float = 5.0) -> ActivationProfile:
    """Column means/stds and the dims whose |mean| exceeds
    ``peak_factor`` times the median |mean| across dims."""
    a = as_array(m)
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    mag = np.abs(mean)
    threshold = peak_factor * np.median(mag)
    peaks = tuple(
        Peak(int(j), float(mean[j]), int(np.sign(mean[j]))) for j in np.flatnonzero(mag > threshold)
    )
    return ActivationProfile(mean, std, peaks)


@dataclass(frozen=True)
class PeakBoundInput:
    """One image peak ``p`` and two equal text peaks ``q`` in dimension ``d``."""

    p: float
    q: float
    d: int

    def __post_init__(self):
        if not self.p**2 < 1:
            raise ConfigError(f"need p^2 < 1, got p={self.p}")
        if not 2 * self.q**2 < 1:
            raise ConfigError(f"need 2q^2 < 1, got q={self.q}")
        if self.d < 3:
            raise ConfigError(f"need d >= 3, got d={self.d}")

    @property
    def image_fill(self) -> float:
        """Magnitude of each non-peak image activation."""
        return math.sqrt((1 - self.p**2) / (self.d - 1))

    @property
    def text_fill(self) -> float:
        return math.sqrt((1 - 2 * self.q**2) / (self.d - 2))


def cosine_upper_bound_finite(inp: PeakBoundInput) -> float:
    a, b = inp.image_fill, inp.text_fill
    return 2 * abs(inp.q) * a + abs(inp.p) * b + (inp.d - 3) * a * b


def cosine_upper_bound_limit(p: float, q: float) -> float:
    """Large-d limit of the bound: sqrt((1 - p^2)(1 - 2 q^2))."""
    if not (p**2 < 1 and 2 * q**2 < 1):
        raise ConfigError(f"need p^2 < 1 and 2q^2 < 1, got p={p}, q={q}")
    return math.sqrt((1 - p**2) * (1 - 2 * q**2))


def construct_peaked_pair(
    inp: PeakBoundInput,
    image_peak_dim: int = 0,
    text_peak_dims: tuple[int, int] = (1, 2),
    seed: int | None = 0,
    aligned: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors with the given peaks and equal-magnitude fill elsewhere.

    Fill signs are drawn from ``seed``. With ``aligned`` they are chosen so
    every term of sum_i x_i*y_i is non-negative instead (x takes the sign of
    q on the text peak dims, y the sign of p on the image peak dim, all other
    fill positive); that pair attains the finite bound.
    """
    d = inp.d
    dims = {image_peak_dim, *text_peak_dims}
    if len(dims) != 3 or not all(0 <= j < d for j in dims):
        raise ConfigError("peak dims must be three distinct indices below d")
    if aligned:
        sx = np.ones(d)
        sy = np.ones(d)
        sx[list(text_peak_dims)] = 1.0 if inp.q >= 0 else -1.0
        sy[image_peak_dim] = 1.0 if inp.p >= 0 else -1.0
    else:
        rng = np.random.default_rng(seed)
        sx = rng.choice([-1.0, 1.0], size=d)
        sy = rng.choice([-1.0, 1.0], size=d)
    x = sx * inp.image_fill
    x[image_peak_dim] = inp.p
    y = sy * inp.text_fill
    y[list(text_peak_dims)] = inp.q
    return x, y


def monte_carlo_bound_check(inp: PeakBoundInput, trials: int, seed: int) -> dict:
    """Largest |cos| over ``trials`` random-sign constructions, with violations."""
    bound = cosine_upper_bound_finite(inp)
    ss = np.random.SeedSequence(seed)
    worst = 0.0
    violations = 0
    for child in ss.spawn(trials):
        x, y = construct_peaked_pair(inp, seed=child)
        c = abs(float(x @ y))
        worst = max(worst, c)
        violations += c > bound + 1e-12
    return {"trials": trials, "max_abs_cos": worst, "bound": bound, "violations": int(violations)}
