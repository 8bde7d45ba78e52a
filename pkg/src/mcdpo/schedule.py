"""Discrete DDPM forward process and per-timestep loss weighting.

Timesteps are indexed ``0 .. T-1``; index ``i`` holds the marginal of the
``(i+1)``-th noising step, so ``alpha_bars[0] < 1`` and ``x_0`` is clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OMEGA_MODES = ("constant", "snr")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    omega_mode: str = "constant"
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-d sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        if self.omega_mode not in OMEGA_MODES:
            raise ValueError(f"unknown omega mode {self.omega_mode!r}")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def snr(self, t):
        ab = self.alpha_bars[self._check_t(t)]
        return ab / (1.0 - ab)

    def _check_t(self, t):
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise TypeError("timesteps must be integers")
        if np.any(t < 0) or np.any(t >= self.T):
            raise IndexError(f"timestep out of range [0, {self.T})")
        return t


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    t: int | np.ndarray
    eps: np.ndarray


def make_linear_schedule(T: int, beta_start: float, beta_end: float,
                         omega_mode: str = "constant") -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)), omega_mode=omega_mode)


def forward_sample(x0, t, eps, sched: NoiseSchedule) -> NoisySample:
    """Closed-form ``q(x_t | x_0)`` with an explicit noise realization.

    ``x0`` and ``eps`` may be a single vector or a batch ``(N, d)``; ``t`` is a
    scalar or a length-``N`` integer array.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = sched._check_t(t)
    ab = sched.alpha_bars[t]
    if x0.ndim > 1:
        ab = np.reshape(ab, ab.shape + (1,) * (x0.ndim - ab.ndim))
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return NoisySample(x_t=x_t, t=t, eps=eps)


def snr_weight(alpha_bar):
    """Sigmoid of log-SNR, i.e. ``snr / (1 + snr)``; lies in (0, 1)."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    snr = alpha_bar / (1.0 - alpha_bar)
    return snr / (1.0 + snr)


def omega(t, sched: NoiseSchedule):
    """Per-timestep weight of the epsilon-space DPO logit."""
    t = sched._check_t(t)
    if sched.omega_mode == "constant":
        return np.ones(np.shape(t)) if np.ndim(t) else 1.0
    w = snr_weight(sched.alpha_bars[t])
    return w if np.ndim(t) else float(w)
