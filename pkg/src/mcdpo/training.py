"""Seeded SGD training loop shared by every phase, plus metric-log output."""

from __future__ import annotations

import csv
import logging

import numpy as np
from scipy.special import expit

from .losses import (DPO_PHASES, TrainConfig, apply_reward_dropout, dpo_loss, draw_noise,
                     grad_diagnostics, mcdpo_loss, sft_loss)
from .model import NULL_PROMPT, ParamGradient, ToyDenoiser
from .preference import uniform_weights
from .rewards import PairBatch, stack_pairs

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, phase):
        super().__init__(f"loss became NaN at step {step} ({phase})")
        self.step = step


def _as_batch(data) -> PairBatch:
    return data if isinstance(data, PairBatch) else stack_pairs(data)


def _prompt_dropout(c, rate, rng):
    if rate <= 0:
        return c
    return np.where(rng.random(c.shape) < rate, NULL_PROMPT, c)


def _step_loss(model, ref, batch, cfg, sched, rng):
    n = len(batch)
    d = batch.x_w.shape[1]
    if cfg.phase in ("pretrain", "mcsft"):
        # both pair members are denoising targets
        x0 = np.concatenate([batch.x_w, batch.x_l])
        c = _prompt_dropout(np.concatenate([batch.c, batch.c]), cfg.text_dropout, rng)
        gamma = None
        if cfg.phase == "mcsft":
            g = batch.gamma_wl
            if cfg.dropout_rates:
                g = apply_reward_dropout(g, cfg.dropout_rates, rng)
            gamma = np.concatenate([g, -g])
        t, eps = draw_noise(2 * n, d, sched, rng)
        return sft_loss(model, x0, c, gamma, t, eps, sched, cfg.phase)
    t, eps = draw_noise(n, d, sched, rng)
    if cfg.phase == "mcdpo":
        g = batch.gamma_wl
        if cfg.dropout_rates:
            g = apply_reward_dropout(g, cfg.dropout_rates, rng)
        dropped = PairBatch(batch.x_w, batch.x_l, batch.c, g)
        return mcdpo_loss(model, ref, dropped, cfg, sched, t, eps)
    return dpo_loss(model, ref, batch, cfg, sched, t, eps)


def train(model: ToyDenoiser, ref: ToyDenoiser | None, data, cfg: TrainConfig, sched,
          probe=None, probe_fn=None, callback=None):
    """Run ``cfg.steps`` SGD updates on ``model`` in place.

    Parameters
    ----------
    model, ref : ToyDenoiser
        Policy being trained and frozen reference (unused by pretrain/mcsft).
    data : list of PreferencePair or PairBatch
    probe : PairBatch, optional
        Held-out pairs; ``probe_fn(model, probe)`` is logged every
        ``cfg.probe_every`` steps and must return a per-axis sequence.
    callback : callable, optional
        Called as ``callback(steps_done, model)`` after every update.

    Returns
    -------
    (model, rows) where ``rows`` is the per-step metric log.
    """
    batch_all = _as_batch(data)
    if cfg.phase not in ("pretrain", "mcsft") and ref is None:
        raise ValueError(f"phase {cfg.phase!r} needs a reference model")
    if len(batch_all) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    D = batch_all.gamma_wl.shape[1]
    velocity = model.zero_grad()
    rows = []
    for step in range(cfg.steps):
        idx = rng.choice(len(batch_all), size=min(cfg.batch_size, len(batch_all)), replace=False)
        batch = batch_all.take(idx)
        loss, grads, info = _step_loss(model, ref, batch, cfg, sched, rng)
        if not np.isfinite(loss) or not grads.is_finite():
            raise TrainingDiverged(step, cfg.phase)
        lr = cfg.learning_rate * min(1.0, (step + 1) / max(cfg.warmup_steps, 1))
        velocity = ParamGradient((k, cfg.momentum * velocity[k] + grads[k]) for k in grads)
        model.apply_update(velocity * (-lr))

        row = {"step": step, "phase": cfg.phase, "loss": loss,
               "sigma_z": float(np.mean(expit(info["z"]))) if "z" in info else "",
               "dominance_ratio": ""}
        if ref is not None and cfg.log_every and step % cfg.log_every == 0 \
                and cfg.phase in DPO_PHASES + ("mcdpo",):
            t, eps = draw_noise(len(batch), batch.x_w.shape[1], sched, np.random.default_rng([cfg.seed, step]))
            diag = grad_diagnostics(model, ref, batch, batch.gamma_wl, uniform_weights(D),
                                    cfg.beta_dpo, sched, t, eps)
            row["dominance_ratio"] = diag.dominance_ratio
        for i in range(D):
            row[f"probe_acc_{i}"] = ""
        if probe is not None and probe_fn is not None and cfg.probe_every \
                and step % cfg.probe_every == 0:
            for i, acc in enumerate(probe_fn(model, probe)):
                row[f"probe_acc_{i}"] = float(acc)
        rows.append(row)
        if callback is not None:
            callback(step + 1, model)
        if step % 100 == 0:
            log.debug("%s step %d loss %.5f", cfg.phase, step, loss)
    return model, rows


def write_metrics(path, rows) -> None:
    if not rows:
        rows = [{"step": "", "phase": "", "loss": "", "sigma_z": "", "dominance_ratio": ""}]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
