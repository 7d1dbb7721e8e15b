"""Block flat-fading uplink: scaling, power check, AWGN, equalization, SNR.

One coefficient per (device, round) block. The receiver divides by the
known coefficient, so the post-equalization noise is Gaussian with per
entry variance n0 / h**2; a floor on h keeps that variance finite. All
draws come from keyed streams, making every realization reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_vector, sample_gaussian

DEFAULT_H_FLOOR = 1e-3

# Relative slack for the power inequality so boundary cases do not flap.
_POWER_SLACK = 1e-12


@dataclass(frozen=True)
class ChannelState:
    """Per-(device, round) uplink state: coefficient, noise density, power cap."""

    h: float
    n0: float
    p_max: float

    def __post_init__(self):
        if self.h < 0:
            raise ValueError("channel coefficient must be nonnegative")
        if self.n0 < 0:
            raise ValueError("noise density must be nonnegative")
        if self.p_max <= 0:
            raise ValueError("power cap must be positive")


@dataclass(frozen=True)
class FadingModel:
    """Constant or unit-power Rayleigh fading, with a floor on the draw."""

    kind: str
    h0: float = 1.0
    h_floor: float = DEFAULT_H_FLOOR

    def __post_init__(self):
        if self.kind not in ("constant", "rayleigh"):
            raise ValueError(f"unknown fading kind {self.kind!r}")
        if self.h_floor <= 0:
            raise ValueError("h_floor must be positive")
        if self.kind == "constant" and self.h0 < 0:
            raise ValueError("h0 must be nonnegative")

    @classmethod
    def constant(cls, h0: float, h_floor: float = DEFAULT_H_FLOOR) -> "FadingModel":
        return cls(kind="constant", h0=h0, h_floor=h_floor)

    @classmethod
    def rayleigh(cls, h_floor: float = DEFAULT_H_FLOOR) -> "FadingModel":
        return cls(kind="rayleigh", h_floor=h_floor)


def draw_channel(model: FadingModel, rng: RngStream) -> float:
    """One block coefficient; Rayleigh draws satisfy E[h^2] = 1 before flooring."""
    if model.kind == "constant":
        h = model.h0
    else:
        # magnitude of a complex Gaussian with total variance 1
        h = float(rng.generator().rayleigh(scale=1.0 / math.sqrt(2.0)))
    return max(h, model.h_floor)


def transmit_uplink(g_clipped, alpha: float, ch: ChannelState, rng: RngStream) -> np.ndarray:
    """Received vector y = h * alpha * g + n with n ~ N(0, n0 I).

    The caller is responsible for having checked power_ok(alpha, ...).
    Fresh noise comes from the provided stream, so each (device, round)
    pair sees an independent realization.
    """
    g = as_vector(g_clipped)
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    noise = sample_gaussian(rng, 1, g.shape[0], math.sqrt(ch.n0)).ravel()
    return ch.h * alpha * g + noise


def equalize(y, h: float, h_floor: float = DEFAULT_H_FLOOR) -> np.ndarray:
    """Divide out the channel: returns alpha * g + n / h."""
    y = as_vector(y)
    if h < h_floor:
        raise ValueError(f"channel coefficient {h} below floor {h_floor}")
    return y / h


def snr(alpha: float, clip_c: float, d: int, n0: float) -> float:
    """Per-transmission SNR (alpha * clip_c)^2 / (d * n0)."""
    if d < 1:
        raise ValueError("dimension must be at least 1")
    if n0 < 0:
        raise ValueError("noise density must be nonnegative")
    signal = (alpha * clip_c) ** 2
    if n0 == 0.0:
        return math.inf if signal > 0.0 else 0.0
    return signal / (d * n0)


def power_ok(alpha: float, clip_c: float, ch: ChannelState) -> bool:
    """True iff the worst-case transmit power (alpha * clip_c)^2 fits the cap."""
    return (alpha * clip_c) ** 2 <= ch.p_max * (1.0 + _POWER_SLACK)
