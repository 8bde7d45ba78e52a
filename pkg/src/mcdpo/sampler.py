"""Ancestral sampling with prompt and reward classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NULL_PROMPT
from .preference import check_outcome_vector, decode_outcome, encode_outcome
from .schedule import NoiseSchedule, forward_sample, omega

MODES = ("none", "prompt_cfg", "reward_two_point", "reward_multi_axis")


@dataclass
class GuidanceSpec:
    """How the noise prediction is assembled at every reverse step.

    ``gamma`` is the outcome condition used by the ``none`` and ``prompt_cfg``
    modes.  ``lose_unconditional`` drops the prompt from the ``gamma_lose``
    term of the two-point mode.
    """
    mode: str = "none"
    lambda_cfg: float = 1.0
    gamma: np.ndarray | None = None
    gamma_win: np.ndarray | None = None
    gamma_lose: np.ndarray | None = None
    axis_weights: np.ndarray | None = None
    lose_unconditional: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if not np.isfinite(self.lambda_cfg) or self.lambda_cfg < 0:
            raise ValueError("lambda_cfg must be finite and nonnegative")
        for attr in ("gamma", "gamma_win", "gamma_lose"):
            val = getattr(self, attr)
            if val is not None:
                setattr(self, attr, check_outcome_vector(val))
        if self.mode == "reward_two_point" and (self.gamma_win is None or self.gamma_lose is None):
            raise ValueError("reward_two_point needs gamma_win and gamma_lose")
        if self.mode == "reward_multi_axis":
            if self.axis_weights is None:
                raise ValueError("reward_multi_axis needs axis_weights")
            self.axis_weights = np.asarray(self.axis_weights, dtype=np.float64)

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "lambda_cfg": self.lambda_cfg,
               "lose_unconditional": self.lose_unconditional}
        for attr in ("gamma", "gamma_win", "gamma_lose"):
            val = getattr(self, attr)
            if val is not None:
                out[attr] = encode_outcome(val)
        if self.axis_weights is not None:
            out["axis_weights"] = self.axis_weights.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GuidanceSpec":
        data = dict(data)
        for attr in ("gamma", "gamma_win", "gamma_lose"):
            if isinstance(data.get(attr), str):
                data[attr] = decode_outcome(data[attr])
        return cls(**data)


def _extrapolate(base, target, scale):
    # unit scale returns the target term itself, so that path is exact
    if scale == 1.0:
        return target
    return base + scale * (target - base)


def guided_eps(model, x_t, t, spec: GuidanceSpec, c) -> np.ndarray:
    """Guided noise prediction for a batch ``x_t`` at timestep index ``t``."""
    x_t = np.atleast_2d(x_t)
    n = x_t.shape[0]
    c = np.broadcast_to(np.asarray(c), (n,))
    t = np.broadcast_to(np.asarray(t), (n,))
    if spec.mode == "none":
        return model.predict_eps(x_t, t, c, spec.gamma)
    if spec.mode == "prompt_cfg":
        uncond = model.predict_eps(x_t, t, np.full(n, NULL_PROMPT), spec.gamma)
        cond = model.predict_eps(x_t, t, c, spec.gamma)
        return _extrapolate(uncond, cond, spec.lambda_cfg)
    if spec.mode == "reward_two_point":
        c_lose = np.full(n, NULL_PROMPT) if spec.lose_unconditional else c
        lose = model.predict_eps(x_t, t, c_lose, spec.gamma_lose)
        win = model.predict_eps(x_t, t, c, spec.gamma_win)
        return _extrapolate(lose, win, spec.lambda_cfg)
    D = spec.axis_weights.size
    out = model.predict_eps(x_t, t, c, np.zeros(D, dtype=np.int8))
    for i, wi in enumerate(spec.axis_weights):
        if wi == 0:
            continue
        onehot = np.zeros(D, dtype=np.int8)
        onehot[i] = 1
        out = out + wi * (model.predict_eps(x_t, t, c, onehot) - model.predict_eps(x_t, t, c, -onehot))
    return out


def reverse_step(model, x_t, t: int, spec: GuidanceSpec, c, sched: NoiseSchedule, rng=None,
                 z=None) -> np.ndarray:
    """One ancestral update from ``x_t`` to ``x_{t-1}``, ``t`` in ``1..T``.

    The model is queried at schedule index ``t - 1``.  At ``t == 1`` the
    posterior mean is returned without noise.  Supply either ``rng`` or the
    standard-normal draw ``z`` directly.
    """
    if not 1 <= t <= sched.T:
        raise IndexError(f"reverse step t must lie in [1, {sched.T}]")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    i = t - 1
    eps_hat = guided_eps(model, x_t, i, spec, c)
    if eps_hat.shape != x_t.shape:
        raise ValueError("dimension mismatch between model output and x_t")
    beta, alpha, ab = sched.betas[i], sched.alphas[i], sched.alpha_bars[i]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    var = beta * (1.0 - sched.alpha_bars[i - 1]) / (1.0 - ab)
    if z is None:
        z = rng.normal(size=x_t.shape)
    return mean + np.sqrt(var) * z


def draw_sampling_noise(n: int, d: int, T: int, seed: int, offset: int = 0):
    """Initial noise ``(n, d)`` and per-step draws ``(T, n, d)``.

    Trajectory ``j`` uses its own stream ``(seed, offset + j)``, so any subset
    of trajectories can be regenerated independently.
    """
    x_T = np.empty((n, d))
    zs = np.empty((T, n, d))
    for j in range(n):
        r = np.random.default_rng([seed, offset + j])
        x_T[j] = r.normal(size=d)
        zs[:, j] = r.normal(size=(T, d))
    return x_T, zs


def sample(model, spec: GuidanceSpec, c, sched: NoiseSchedule, noise) -> np.ndarray:
    """Run the full reverse chain from ``x_T``; ``noise`` comes from :func:`draw_sampling_noise`."""
    x_T, zs = noise
    c = np.broadcast_to(np.asarray(c), (x_T.shape[0],))
    x = x_T.copy()
    for t in range(sched.T, 0, -1):
        x = reverse_step(model, x, t, spec, c, sched, z=zs[t - 1])
    return x


def implicit_reward_diff(model, ref, x, c, gamma_a, gamma_b, sched: NoiseSchedule,
                         beta_dpo: float, n_mc: int = 32, seed: int = 0) -> np.ndarray:
    """Monte-Carlo estimate of ``r(x | gamma_a) - r(x | gamma_b)`` per sample.

    The same ``n_mc`` draws of ``(t, eps)`` are used for every row of ``x``
    and for both conditions, so the estimate is a deterministic function of
    ``(x, c, seed)``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    c = np.broadcast_to(np.asarray(c), (n,))
    rng = np.random.default_rng(seed)
    ts = rng.integers(0, sched.T, size=n_mc)
    epss = rng.normal(size=(n_mc, d))
    total = np.zeros(n)
    for t, e in zip(ts, epss):
        eps = np.broadcast_to(e, (n, d))
        xt = forward_sample(x, np.full(n, t), eps, sched).x_t
        tt = np.full(n, t)
        er = np.sum((eps - ref.predict_eps(xt, tt, c)) ** 2, axis=1)
        ea = np.sum((eps - model.predict_eps(xt, tt, c, gamma_a)) ** 2, axis=1)
        eb = np.sum((eps - model.predict_eps(xt, tt, c, gamma_b)) ** 2, axis=1)
        total = total + beta_dpo * sched.T * omega(int(t), sched) * ((er - ea) - (er - eb))
    return total / n_mc
