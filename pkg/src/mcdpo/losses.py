"""Training objectives in epsilon space.

Every DPO-family logit here has the form

    z = -beta * T * omega_t * [(err_theta(x^w) - err_ref(x^w)) - (err_theta(x^l) - err_ref(x^l))]

with ``err(x) = ||eps - eps_hat(x_t)||^2``.  One timestep and one noise draw
are shared by both members of a pair (and by both orientations of the
conditional loss).  Losses return ``(value, ParamGradient, info)``; the
gradient is that of the batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .model import ParamGradient, ToyDenoiser
from .rewards import PairBatch
from .schedule import NoiseSchedule, forward_sample, omega

PHASES = ("pretrain", "mcsft", "mcdpo", "dpo", "dpo_filtered", "specialist")
DPO_PHASES = ("dpo", "dpo_filtered", "specialist")
LOG2 = float(np.log(2.0))

# Per-dimension reward dropout rates keyed by axis name; unlisted axes use the default.
DROPOUT_RATES = {"mcdpo": {"human": 0.0, "clip_like": 0.15}, "mcsft": {"human": 0.0}}
DROPOUT_DEFAULT = {"mcdpo": 0.2, "mcsft": 0.1}


@dataclass
class TrainConfig:
    phase: str = "mcdpo"
    beta_dpo: float = 300.0
    learning_rate: float = 1e-5
    steps: int = 500
    batch_size: int = 64
    dropout_rates: tuple = ()
    text_dropout: float = 0.0
    seed: int = 0
    specialist_dim: int | None = None
    momentum: float = 0.9
    warmup_steps: int = 100
    log_every: int = 10
    probe_every: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.beta_dpo <= 0:
            raise ValueError("beta_dpo must be positive")
        if self.learning_rate < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("learning_rate/steps must be nonnegative and batch_size positive")
        rates = np.asarray(self.dropout_rates, dtype=np.float64)
        if np.any(rates < 0) or np.any(rates >= 1):
            raise ValueError("dropout rates must lie in [0, 1)")
        if not 0 <= self.text_dropout < 1:
            raise ValueError("text_dropout must lie in [0, 1)")
        if self.phase == "specialist" and self.specialist_dim is None:
            raise ValueError("the specialist phase needs specialist_dim")
        self.dropout_rates = tuple(float(r) for r in rates)


@dataclass
class GradDiagnostics:
    sigma_z: float
    per_dim_grad_norm: np.ndarray
    dominance_ratio: float
    summands: np.ndarray = field(repr=False, default=None)


def default_dropout_rates(names, phase: str = "mcdpo") -> tuple:
    """Standard per-axis dropout rates for the ``mcdpo`` or ``mcsft`` phase."""
    return tuple(DROPOUT_RATES[phase].get(n, DROPOUT_DEFAULT[phase]) for n in names)


def draw_noise(n: int, d: int, sched: NoiseSchedule, rng):
    """One timestep and one noise vector per row."""
    return rng.integers(0, sched.T, size=n), rng.normal(size=(n, d))


def _sqerr(eps, pred):
    r = eps - pred
    return np.sum(r * r, axis=1)


def _mask_groups(model: ToyDenoiser, grads: ParamGradient, phase: str) -> ParamGradient:
    if phase == "mcsft":
        frozen = model.base_keys()
    elif phase == "pretrain":
        frozen = model.reward_keys()
    else:
        return grads
    for k in frozen:
        grads[k] = np.zeros_like(grads[k])
    return grads


def sft_loss(model, x0, c, gamma, t, eps, sched, phase="mcsft"):
    """Denoising loss ``mean ||eps - eps_theta(x_t, t, c, gamma)||^2``.

    In the ``mcsft`` phase only the reward pathway receives gradient; in
    ``pretrain`` only the base network does.
    """
    x0 = np.atleast_2d(x0)
    eps = np.atleast_2d(eps)
    xt = forward_sample(x0, t, eps, sched).x_t
    pred, tape = model.forward(xt, t, c, gamma)
    resid = pred - eps
    n = x0.shape[0]
    loss = float(np.sum(resid * resid) / n)
    grads = model.backward(tape, 2.0 * resid / n)
    return loss, _mask_groups(model, grads, phase), {}


def _logit_scale(t, sched, beta):
    return beta * sched.T * np.asarray(omega(t, sched), dtype=np.float64)


def _ref_errors(ref, batch, t, eps_w, eps_l, sched):
    xw = forward_sample(batch.x_w, t, eps_w, sched).x_t
    xl = forward_sample(batch.x_l, t, eps_l, sched).x_t
    ref_out = ref.predict_eps(np.concatenate([xw, xl]), np.concatenate([t, t]),
                              np.concatenate([batch.c, batch.c]))
    n = len(batch)
    return xw, xl, _sqerr(eps_w, ref_out[:n]), _sqerr(eps_l, ref_out[n:])


def _logit(e_pw, e_rw, e_pl, e_rl, K):
    return -K * ((e_pw - e_rw) - (e_pl - e_rl))


def dpo_inner_logit(model, ref, batch: PairBatch, t, eps_w, eps_l, sched, beta_dpo,
                    gamma=None) -> np.ndarray:
    """Per-pair DPO logit; ``gamma`` conditions the policy only."""
    t = np.asarray(t)
    xw, xl, e_rw, e_rl = _ref_errors(ref, batch, t, eps_w, eps_l, sched)
    pol = model.predict_eps(np.concatenate([xw, xl]), np.concatenate([t, t]),
                            np.concatenate([batch.c, batch.c]),
                            None if gamma is None else np.concatenate([gamma, gamma]))
    n = len(batch)
    return _logit(_sqerr(eps_w, pol[:n]), e_rw, _sqerr(eps_l, pol[n:]), e_rl,
                  _logit_scale(t, sched, beta_dpo))


def orient_batch(batch: PairBatch, phase: str, specialist_dim=None) -> PairBatch:
    """Validate a batch for a DPO phase; specialists re-derive winners from one axis."""
    if phase == "dpo_filtered" and np.any(batch.gamma_wl < 0):
        raise ValueError("dpo_filtered batch contains a conflicting pair")
    if phase != "specialist":
        return batch
    g = batch.gamma_wl[:, specialist_dim]
    keep = g != 0
    swap = (g < 0)[:, None]
    return PairBatch(np.where(swap, batch.x_l, batch.x_w)[keep],
                     np.where(swap, batch.x_w, batch.x_l)[keep],
                     batch.c[keep], np.where(swap, -batch.gamma_wl, batch.gamma_wl)[keep])


def dpo_loss(model, ref, batch: PairBatch, cfg: TrainConfig, sched, t, eps):
    """Diffusion-DPO on the global label (no outcome conditioning)."""
    if cfg.phase not in DPO_PHASES:
        raise ValueError(f"dpo_loss does not serve phase {cfg.phase!r}")
    if cfg.phase == "specialist":
        keep = batch.gamma_wl[:, cfg.specialist_dim] != 0
        t, eps = np.asarray(t)[keep], np.asarray(eps)[keep]
    batch = orient_batch(batch, cfg.phase, cfg.specialist_dim)
    n = len(batch)
    if n == 0:
        return LOG2, model.zero_grad(), {"z": np.zeros(0)}
    t = np.asarray(t)
    xw, xl, e_rw, e_rl = _ref_errors(ref, batch, t, eps, eps, sched)
    pol, tape = model.forward(np.concatenate([xw, xl]), np.concatenate([t, t]),
                              np.concatenate([batch.c, batch.c]))
    K = _logit_scale(t, sched, cfg.beta_dpo)
    z = _logit(_sqerr(eps, pol[:n]), e_rw, _sqerr(eps, pol[n:]), e_rl, K)
    loss = float(-np.mean(log_expit(z)))
    dz = (expit(z) - 1.0) / n
    coef = (2.0 * K * dz)[:, None]
    dout = np.concatenate([coef * (eps - pol[:n]), -coef * (eps - pol[n:])])
    return loss, model.backward(tape, dout), {"z": z}


def mcdpo_loss(model, ref, batch: PairBatch, cfg: TrainConfig, sched, t, eps, gamma_lw=None):
    """Conditional DPO over both orientations of every pair.

    ``batch.gamma_wl`` is the (already dropped-out) condition; the reverse
    orientation uses its negation.
    """
    g_wl = np.asarray(batch.gamma_wl)
    g_lw = -g_wl if gamma_lw is None else np.asarray(gamma_lw)
    if not np.array_equal(g_lw, -g_wl):
        raise ValueError("gamma_lw must equal -gamma_wl")
    n = len(batch)
    t = np.asarray(t)
    xw, xl, e_rw, e_rl = _ref_errors(ref, batch, t, eps, eps, sched)
    # blocks: (x^w | g_wl), (x^l | g_wl), (x^l | g_lw), (x^w | g_lw)
    pol, tape = model.forward(np.concatenate([xw, xl, xl, xw]), np.tile(t, 4),
                              np.tile(batch.c, 4), np.concatenate([g_wl, g_wl, g_lw, g_lw]))
    same = np.all(g_wl == g_lw, axis=1)
    pol[3 * n:][same] = pol[:n][same]
    pol[2 * n:3 * n][same] = pol[n:2 * n][same]
    K = _logit_scale(t, sched, cfg.beta_dpo)
    e = [_sqerr(eps, pol[i * n:(i + 1) * n]) for i in range(4)]
    z_fwd = _logit(e[0], e_rw, e[1], e_rl, K)
    z_rev = _logit(e[2], e_rl, e[3], e_rw, K)
    z = z_fwd + z_rev
    loss = float(-np.mean(log_expit(z)))
    coef = (2.0 * K * (expit(z) - 1.0) / n)[:, None]
    d = [coef * (eps - pol[:n]), -coef * (eps - pol[n:2 * n]),
         coef * (eps - pol[2 * n:3 * n]), -coef * (eps - pol[3 * n:])]
    # identical inputs in both orientations: fold before backprop so the
    # contributions cancel exactly
    d[0][same] += d[3][same]
    d[1][same] += d[2][same]
    d[2][same] = 0.0
    d[3][same] = 0.0
    return loss, model.backward(tape, np.concatenate(d)), {"z": z, "z_fwd": z_fwd, "z_rev": z_rev}


def apply_reward_dropout(gamma, rates, rng) -> np.ndarray:
    """Zero each entry independently with its dimension's rate.

    Applied to ``gamma_wl`` only; the reverse condition is its negation, so
    both orientations of a pair lose the same dimensions.
    """
    gamma = np.asarray(gamma)
    rates = np.broadcast_to(np.asarray(rates, dtype=np.float64), gamma.shape[-1:])
    if np.any(rates < 0) or np.any(rates >= 1):
        raise ValueError("dropout rates must lie in [0, 1)")
    drop = rng.random(gamma.shape) < rates
    return np.where(drop, 0, gamma).astype(gamma.dtype)


def lm_oracle_from_rewards(r_w, r_l, gamma, w):
    """Sign-corrected BT loss from per-dimension implicit rewards.

    Returns ``(loss, dloss/dr_w, dloss/dr_l, summands)`` for a single pair,
    where ``summands[i] = w_i * gamma_i * (r_w[i] - r_l[i])``.
    """
    r_w = np.asarray(r_w, dtype=np.float64)
    r_l = np.asarray(r_l, dtype=np.float64)
    coef = np.asarray(w, dtype=np.float64) * np.asarray(gamma)
    summands = coef * (r_w - r_l)
    z = np.sum(summands, axis=-1)
    loss = -log_expit(z)
    dz = expit(z) - 1.0
    dz = np.expand_dims(dz, -1) if np.ndim(dz) else dz
    return loss, dz * coef, -dz * coef, summands


def _oracle_setup(models, D):
    if isinstance(models, ToyDenoiser):
        return [models] * D, np.eye(D, dtype=np.int8), True
    models = list(models)
    if len(models) != D:
        raise ValueError(f"need one model per dimension: got {len(models)}, D={D}")
    return models, [None] * D, False


def _per_dim_rewards(models, ref, batch, t, eps, sched, beta, record=False):
    """Per-dimension epsilon-space implicit rewards of x^w and x^l, shape (N, D)."""
    D = batch.gamma_wl.shape[1]
    members, conds, _ = _oracle_setup(models, D)
    n = len(batch)
    xw, xl, e_rw, e_rl = _ref_errors(ref, batch, t, eps, eps, sched)
    K = _logit_scale(t, sched, beta)
    r_w, r_l, records = np.zeros((n, D)), np.zeros((n, D)), []
    for i, (m, g) in enumerate(zip(members, conds)):
        gi = None if g is None else np.tile(g, (2 * n, 1))
        pol, tape = m.forward(np.concatenate([xw, xl]), np.concatenate([t, t]),
                              np.concatenate([batch.c, batch.c]), gi)
        r_w[:, i] = -K * (_sqerr(eps, pol[:n]) - e_rw)
        r_l[:, i] = -K * (_sqerr(eps, pol[n:]) - e_rl)
        records.append((m, pol, tape))
    return r_w, r_l, K, records


def lm_oracle_loss(models, ref, batch: PairBatch, gamma, w, beta_dpo, sched, t, eps):
    """Oracle loss with one implicit reward model per dimension.

    ``models`` is either a list of ``D`` models (each evaluated without a
    condition) or one shared conditional model evaluated with the one-hot
    indicator of each dimension.  Returns ``(mean loss, summands (N, D))``.
    """
    t = np.asarray(t)
    r_w, r_l, _, _ = _per_dim_rewards(models, ref, batch, t, eps, sched, beta_dpo)
    loss, _, _, summands = lm_oracle_from_rewards(r_w, r_l, np.asarray(gamma), w)
    return float(np.mean(loss)), summands


def grad_diagnostics(models, ref, batch: PairBatch, gamma, w, beta_dpo, sched, t, eps):
    """Per-dimension norms of ``w_i gamma_i grad(z_i)`` through the oracle decomposition."""
    t = np.asarray(t)
    gamma = np.broadcast_to(np.asarray(gamma), batch.gamma_wl.shape)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), gamma.shape[-1:])
    n, D = gamma.shape
    r_w, r_l, K, records = _per_dim_rewards(models, ref, batch, t, eps, sched, beta_dpo)
    _, _, _, summands = lm_oracle_from_rewards(r_w, r_l, gamma, w)
    z = summands.sum(axis=1)
    norms = np.zeros(D)
    for i, (m, pol, tape) in enumerate(records):
        coef = (w[i] * gamma[:, i] / n)[:, None]
        if not np.any(coef):
            continue
        # z_i = r_w_i - r_l_i, d r_w_i / d pol_w = 2 K (eps - pol_w)
        dout = np.concatenate([coef * 2.0 * K[:, None] * (eps - pol[:n]),
                               -coef * 2.0 * K[:, None] * (eps - pol[n:])])
        norms[i] = m.backward(tape, dout).norm()
    active = norms[np.any(gamma != 0, axis=0)]
    active = active[active > 0]
    ratio = float(active.max() / active.min()) if active.size else 1.0
    return GradDiagnostics(float(np.mean(expit(z))), norms, ratio, summands)
