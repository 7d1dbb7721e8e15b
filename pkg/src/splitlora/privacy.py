"""Clipping, (epsilon, delta) accounting, and privacy-aware power control.

The uplink adds Gaussian channel noise to a clipped, scaled gradient
vector, which is exactly a Gaussian mechanism with sensitivity alpha * C
and noise scale sqrt(n0) / h. Composed over T transmissions with a moments
accountant style bound, the budget comes out as

    epsilon = c1 * alpha * C * h * sqrt(T * ln(1/delta)) / sqrt(n0),

equivalently c1 * h * sqrt(T ln(1/delta)) * sqrt(SNR * d). Power control
inverts this for the largest alpha that stays inside the budget, capped by
the transmit power limit.

c1 is the accountant's constant; it rescales every epsilon in the same way
and defaults to 1. A conservative strong-composition preset (c1 = 2 with
the delta budget split in half) is available for comparison runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .channel import ChannelState
from .numerics import as_vector


@dataclass(frozen=True)
class PrivacyConfig:
    """Budget and mechanism parameters shared by all devices.

    epsilon_target may be math.inf to disable the privacy cap (used by
    noiseless baselines); rounds is the total number of uplink
    transmissions a device makes over the run.
    """

    epsilon_target: float
    delta: float
    clip_c: float
    rounds: int
    c1: float = 1.0

    def __post_init__(self):
        if self.epsilon_target <= 0:
            raise ValueError("epsilon_target must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0,1)")
        if self.clip_c <= 0:
            raise ValueError("clip_c must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.c1 <= 0:
            raise ValueError("c1 must be positive")


def with_strong_composition(cfg: PrivacyConfig) -> PrivacyConfig:
    """Conservative preset: doubled accountant constant, delta split in half."""
    return replace(cfg, c1=2.0 * cfg.c1, delta=cfg.delta / 2.0)


class Binding(str, Enum):
    """Which branch of the power-control minimum was active."""

    PRIVACY = "privacy"
    POWER = "power"


@dataclass
class PrivacySpend:
    """Realized budget for one device over a run."""

    device: int
    realized_epsilon: float
    binding: Binding | None
    per_round_epsilon: list[float]


def clip_gradient(g, clip_c: float) -> np.ndarray:
    """Rescale g so its l2 norm never exceeds clip_c; no-op below the threshold."""
    if clip_c <= 0:
        raise ValueError("clip_c must be positive")
    g = as_vector(g)
    nrm = float(np.sqrt(g @ g))
    return g * (clip_c / max(clip_c, nrm))


def _composition_factor(t_rounds: int, delta: float) -> float:
    if t_rounds < 1:
        raise ValueError("t_rounds must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0,1)")
    return math.sqrt(t_rounds * math.log(1.0 / delta))


def epsilon_from_snr(c1: float, h: float, t_rounds: int, delta: float,
                     snr_value: float, d: int) -> float:
    """Budget in SNR form: c1 * h * sqrt(T ln(1/delta)) * sqrt(SNR * d)."""
    if c1 <= 0 or h <= 0 or d < 1:
        raise ValueError("c1, h must be positive and d at least 1")
    if snr_value < 0:
        raise ValueError("snr must be nonnegative")
    return c1 * h * _composition_factor(t_rounds, delta) * math.sqrt(snr_value * d)


def epsilon_from_sigma(c1: float, alpha: float, clip_c: float, sigma_eff: float,
                       t_rounds: int, delta: float) -> float:
    """Budget in Gaussian-mechanism form: c1 * alpha * C * sqrt(T ln(1/delta)) / sigma.

    alpha = 0 transmits nothing about the data, so the budget is 0 even
    with zero noise; otherwise zero effective noise means an infinite
    budget.
    """
    if c1 <= 0 or clip_c <= 0 or alpha < 0 or sigma_eff < 0:
        raise ValueError("invalid mechanism parameters")
    factor = _composition_factor(t_rounds, delta)
    sensitivity = alpha * clip_c
    if sensitivity == 0.0:
        return 0.0
    if sigma_eff == 0.0:
        return math.inf
    return c1 * sensitivity * factor / sigma_eff


def power_control_alpha(cfg: PrivacyConfig, ch: ChannelState) -> tuple[float, Binding]:
    """Largest scaling factor meeting both the budget and the power cap.

    Returns (alpha, binding) where alpha is the minimum of the privacy cap
    epsilon0 sqrt(n0) / (c1 C h sqrt(T ln(1/delta))) and the power cap
    sqrt(P) / C, and binding names the active branch. When the power branch
    binds, the transmit power is fully used and the channel noise alone
    already provides the requested privacy.
    """
    if ch.h <= 0:
        raise ValueError("channel coefficient must be positive (clamped upstream)")
    power_cap = math.sqrt(ch.p_max) / cfg.clip_c
    if math.isinf(cfg.epsilon_target):
        privacy_cap = math.inf
    else:
        factor = _composition_factor(cfg.rounds, cfg.delta)
        privacy_cap = cfg.epsilon_target * math.sqrt(ch.n0) / (cfg.c1 * cfg.clip_c * ch.h * factor)
    if privacy_cap <= power_cap:
        return privacy_cap, Binding.PRIVACY
    return power_cap, Binding.POWER


def account_rounds(per_round_alphas, per_round_h, cfg: PrivacyConfig, n0: float,
                   per_round_bindings=None, device: int = 0) -> PrivacySpend:
    """Realized budget over a run, composed conservatively.

    The per-round entries use the single-shot mechanism bound; the realized
    total plugs the worst (largest) alpha * h product across rounds into
    the T-round formula, which upper-bounds any per-round composition. The
    recorded binding is the branch active at that worst round, when branch
    labels are supplied.
    """
    alphas = [float(a) for a in per_round_alphas]
    hs = [float(h) for h in per_round_h]
    if len(alphas) != cfg.rounds or len(hs) != cfg.rounds:
        raise ValueError(f"need exactly {cfg.rounds} per-round entries")
    if n0 < 0:
        raise ValueError("noise density must be nonnegative")
    if any(a < 0 for a in alphas) or any(h <= 0 for h in hs):
        raise ValueError("alphas must be nonnegative and coefficients positive")
    sqrt_n0 = math.sqrt(n0)
    per_round = [
        epsilon_from_sigma(cfg.c1, a * h, cfg.clip_c, sqrt_n0, 1, cfg.delta)
        for a, h in zip(alphas, hs)
    ]
    products = [a * h for a, h in zip(alphas, hs)]
    worst_idx = max(range(len(products)), key=products.__getitem__)
    realized = epsilon_from_sigma(cfg.c1, products[worst_idx], cfg.clip_c, sqrt_n0,
                                  cfg.rounds, cfg.delta)
    binding = None
    if per_round_bindings is not None:
        bindings = list(per_round_bindings)
        if len(bindings) != cfg.rounds:
            raise ValueError(f"need exactly {cfg.rounds} binding labels")
        binding = Binding(bindings[worst_idx])
    return PrivacySpend(device=device, realized_epsilon=realized,
                        binding=binding, per_round_epsilon=per_round)
