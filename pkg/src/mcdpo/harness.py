"""Evaluation battery: paired win rates, implicit-reward accuracy, baseline matrix."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import TrainConfig
from .model import ToyDenoiser, merge_parameters
from .rewards import (RewardSpec, compute_conflict_stats, eval_rewards, filter_conflict_free,
                      stack_pairs)
from .sampler import GuidanceSpec, draw_sampling_noise, implicit_reward_diff, sample
from .schedule import NoiseSchedule
from .training import train

log = logging.getLogger(__name__)

UNGUIDED = GuidanceSpec("none")


@dataclass
class WinRateReport:
    per_axis: np.ndarray
    n: int
    ci95: np.ndarray
    names: list = field(default_factory=list)


@dataclass
class ImplicitAccuracyReport:
    per_axis_win_only: np.ma.MaskedArray
    per_axis_lose_only: np.ma.MaskedArray
    per_axis_combined: np.ma.MaskedArray
    n_pairs: np.ndarray

    def ci95(self, mode="combined") -> np.ma.MaskedArray:
        p = getattr(self, f"per_axis_{mode}")
        return 1.96 * np.sqrt(p * (1 - p) / np.maximum(self.n_pairs, 1))


def binomial_ci95(p, n):
    p = np.asarray(p, dtype=np.float64)
    return 1.96 * np.sqrt(p * (1.0 - p) / n)


def paired_samples(model, guidance, prompts, sched, n, seed, batch=500):
    """``n`` samples with prompts cycled from ``prompts`` and noise keyed by ``seed``."""
    prompts = np.asarray(prompts)
    c = prompts[np.arange(n) % prompts.size]
    out = []
    d = model.d
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        noise = draw_sampling_noise(stop - start, d, sched.T, seed, offset=start)
        out.append(sample(model, guidance, c[start:stop], sched, noise))
    return np.concatenate(out), c


def winrate(candidate, baseline, spec: RewardSpec, prompts, n: int, seed: int, sched,
            cand_guidance: GuidanceSpec = UNGUIDED,
            base_guidance: GuidanceSpec = UNGUIDED) -> WinRateReport:
    """Per-axis fraction of shared-noise draws where the candidate's sample wins; ties count 1/2."""
    if n < 1:
        raise ValueError("win rate needs at least one sample")
    xa, c = paired_samples(candidate, cand_guidance, prompts, sched, n, seed)
    xb, _ = paired_samples(baseline, base_guidance, prompts, sched, n, seed)
    return winrate_from_samples(eval_rewards(spec, xa, c), eval_rewards(spec, xb, c), spec.names)


def winrate_from_samples(r_cand, r_base, names=()) -> WinRateReport:
    r_cand, r_base = np.atleast_2d(r_cand), np.atleast_2d(r_base)
    score = np.where(r_cand > r_base, 1.0, np.where(r_cand < r_base, 0.0, 0.5))
    p = score.mean(axis=0)
    n = score.shape[0]
    return WinRateReport(p, n, binomial_ci95(p, n), list(names))


def pairwise_accuracy(score_fn, x_w, x_l, c, truth) -> float | None:
    """Accuracy of ``score_fn(x, c)`` at ranking pairs with ground truth ``truth`` in {-1, +1}.

    Pairs with ``truth == 0`` are skipped; returns None when none remain.
    Equal scores count as half correct, as in the win rate.
    """
    keep = truth != 0
    if not np.any(keep):
        return None
    s_w = score_fn(x_w[keep], c[keep])
    s_l = score_fn(x_l[keep], c[keep])
    pred = np.sign(s_w - s_l)
    return float(np.mean(np.where(pred == 0, 0.5, pred == truth[keep])))


def _onehot(D, i, sign):
    g = np.zeros(D, dtype=np.int8)
    g[i] = sign
    return g


def implicit_accuracy(model, ref, pairs, beta_dpo: float, sched, n_mc: int = 32,
                      seed: int = 0, modes=("win_only", "lose_only", "combined")):
    """Per-axis accuracy of the conditional implicit reward at ranking held-out pairs.

    win_only scores ``r(x|+e_i) - r(x|0)``, lose_only ``-(r(x|-e_i) - r(x|0))``,
    combined ``r(x|+e_i) - r(x|-e_i)``.
    """
    batch = stack_pairs(pairs)
    D = batch.gamma_wl.shape[1]
    zero = np.zeros(D, dtype=np.int8)
    acc = {m: np.ma.masked_all(D) for m in ("win_only", "lose_only", "combined")}
    counts = np.sum(batch.gamma_wl != 0, axis=0)
    for i in range(D):
        plus, minus = _onehot(D, i, 1), _onehot(D, i, -1)
        scorers = {
            "win_only": lambda x, c: implicit_reward_diff(model, ref, x, c, plus, zero, sched, beta_dpo, n_mc, seed),
            "lose_only": lambda x, c: -implicit_reward_diff(model, ref, x, c, minus, zero, sched, beta_dpo, n_mc, seed),
            "combined": lambda x, c: implicit_reward_diff(model, ref, x, c, plus, minus, sched, beta_dpo, n_mc, seed),
        }
        for m in modes:
            a = pairwise_accuracy(scorers[m], batch.x_w, batch.x_l, batch.c, batch.gamma_wl[:, i])
            if a is not None:
                acc[m][i] = a
    return ImplicitAccuracyReport(acc["win_only"], acc["lose_only"], acc["combined"], counts)


@dataclass
class MatrixConfig:
    """Budgets and sampling settings shared by every regime of the baseline matrix."""
    dpo: TrainConfig
    mcsft: TrainConfig
    mcdpo: TrainConfig
    mc_guidance: GuidanceSpec
    n_eval: int = 500
    n_mc: int = 32
    eval_prompts: tuple = ()
    heldout: list | None = None
    regimes: tuple = ("dpo", "dpo_filtered", "specialists", "merged", "mcsft", "mcdpo")


def _train_copy(ref, data, cfg, sched):
    model = ref.copy()
    model.trainable = True
    return train(model, ref, data, cfg, sched)


def run_baseline_matrix(ref: ToyDenoiser, dataset, spec: RewardSpec, mcfg: MatrixConfig,
                        sched: NoiseSchedule, seed: int = 0, jobs: int = 1) -> dict:
    """Train every regime from ``ref`` under the same step and batch budget and evaluate.

    Returns ``{"models", "winrates", "implicit", "logs", "skipped", "conflict"}``.
    """
    prompts = mcfg.eval_prompts or tuple(range(spec.n_prompts))
    D = spec.D
    tasks, skipped = {}, {}
    dpo_cfg = replace(mcfg.dpo, phase="dpo", seed=seed)
    if "dpo" in mcfg.regimes:
        tasks["dpo"] = (dataset, dpo_cfg)
    if "dpo_filtered" in mcfg.regimes:
        filtered = filter_conflict_free(dataset)
        if filtered:
            tasks["dpo_filtered"] = (filtered, replace(dpo_cfg, phase="dpo_filtered"))
        else:
            skipped["dpo_filtered"] = "filtered subset is empty"
    if "specialists" in mcfg.regimes or "merged" in mcfg.regimes:
        for i in range(D):
            tasks[f"specialist_{i}"] = (dataset, replace(dpo_cfg, phase="specialist", specialist_dim=i))

    def run_task(name):
        data, cfg = tasks[name]
        return name, _train_copy(ref, data, cfg, sched)

    def run_mc():
        sft_model = ref.copy()
        sft_model.trainable = True
        sft_model, sft_log = train(sft_model, None, dataset, replace(mcfg.mcsft, phase="mcsft", seed=seed), sched)
        out = {"mcsft": (sft_model.copy(), sft_log)}
        if "mcdpo" in mcfg.regimes:
            mc_model, mc_log = train(sft_model, ref, dataset, replace(mcfg.mcdpo, phase="mcdpo", seed=seed), sched)
            out["mcdpo"] = (mc_model, sft_log + mc_log)
        return out

    results = {}
    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        futures = [pool.submit(run_task, name) for name in tasks]
        mc_future = pool.submit(run_mc) if {"mcsft", "mcdpo"} & set(mcfg.regimes) else None
        for f in futures:
            name, res = f.result()
            results[name] = res
        if mc_future is not None:
            results.update(mc_future.result())

    models = {k: v[0] for k, v in results.items()}
    logs = {k: v[1] for k, v in results.items()}
    if "merged" in mcfg.regimes:
        models["merged"] = merge_parameters([models[f"specialist_{i}"] for i in range(D)])
    if "specialists" not in mcfg.regimes:
        for i in range(D):
            models.pop(f"specialist_{i}", None)

    winrates, implicit = {}, {}
    for name, model in models.items():
        guidance = mcfg.mc_guidance if name in ("mcsft", "mcdpo") else UNGUIDED
        winrates[name] = winrate(model, ref, spec, prompts, mcfg.n_eval, seed, sched, guidance)
        if mcfg.heldout and name in ("mcsft", "mcdpo"):
            implicit[name] = implicit_accuracy(model, ref, mcfg.heldout, mcfg.mcdpo.beta_dpo,
                                               sched, mcfg.n_mc, seed)
    for name, reason in skipped.items():
        log.warning("regime %s skipped: %s", name, reason)
    return {"models": models, "winrates": winrates, "implicit": implicit, "logs": logs,
            "skipped": skipped, "conflict": compute_conflict_stats(dataset)}


def write_winrate_table(path, winrates: dict, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "axis", "win_rate", "ci95", "n", "denominator"])
        for regime, rep in winrates.items():
            for i, name in enumerate(names):
                w.writerow([regime, name, repr(float(rep.per_axis[i])), repr(float(rep.ci95[i])),
                            rep.n, "pooled"])


def _masked_repr(v):
    return "undefined" if v is np.ma.masked else repr(float(v))


def write_implicit_table(path, implicit: dict, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "axis", "win_only", "lose_only", "combined", "combined_ci95", "n_pairs"])
        for regime, rep in implicit.items():
            ci = rep.ci95("combined")
            for i, name in enumerate(names):
                w.writerow([regime, name, _masked_repr(rep.per_axis_win_only[i]),
                            _masked_repr(rep.per_axis_lose_only[i]),
                            _masked_repr(rep.per_axis_combined[i]), _masked_repr(ci[i]),
                            int(rep.n_pairs[i])])


def summary_dict(result: dict, names) -> dict:
    def masked_list(a):
        return [None if v is np.ma.masked else float(v) for v in a]

    return {
        "axes": list(names),
        "winrates": {k: {"per_axis": v.per_axis.tolist(), "ci95": v.ci95.tolist(), "n": v.n,
                         "denominator": "pooled"} for k, v in result["winrates"].items()},
        "implicit": {k: {"win_only": masked_list(v.per_axis_win_only),
                         "lose_only": masked_list(v.per_axis_lose_only),
                         "combined": masked_list(v.per_axis_combined)}
                     for k, v in result["implicit"].items()},
        "skipped": result["skipped"],
        "conflict_rate": result["conflict"].conflict_rate,
    }


def write_summary(path, result: dict, names) -> None:
    with open(path, "w") as fh:
        json.dump(summary_dict(result, names), fh, indent=2, sort_keys=True)
        fh.write("\n")
