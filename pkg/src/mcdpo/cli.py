"""Command-line pipeline: gen-data, profile, train, sample, eval, matrix.

Each stage writes into ``<out>/<stage>/`` together with a ``manifest.json``
holding the resolved config, its hash, the package version, the seed and the
stage name.  Exit codes: 0 success, 2 invalid config, 3 training diverged,
4 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .config import ConfigError, ExperimentConfig
from .harness import (MatrixConfig, implicit_accuracy, paired_samples,
                      run_baseline_matrix, summary_dict, winrate, write_implicit_table,
                      write_winrate_table)
from .model import clone_frozen, load_checkpoint, save_checkpoint
from .rewards import (compute_conflict_stats, conflict_knob_sweep, eval_rewards,
                      generate_dataset, load_pairs, save_pairs)
from .sampler import GuidanceSpec
from .training import TrainingDiverged, train, write_metrics

log = logging.getLogger("mcdpo")

OUT_ENV = "MCDPO_OUT"
EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 2, 3, 4
STAGES = ("gen-data", "profile", "train", "sample", "eval", "matrix")
KNOB_GRID = np.round(np.linspace(0.0, 1.0, 10), 6)


class MissingArtifact(RuntimeError):
    pass


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{stage}` first")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_manifest(stage_dir: Path, cfg: ExperimentConfig, stage: str) -> None:
    artifacts = sorted(p.name for p in stage_dir.iterdir() if p.name != "manifest.json")
    _write_json(stage_dir / "manifest.json", {
        "stage": stage, "seed": cfg.seed, "version": __version__,
        "config_hash": cfg.hash(), "config": cfg.raw, "artifacts": artifacts,
    })


# -- stages ----------------------------------------------------------------

def stage_gen_data(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    spec = cfg.reward_spec()
    r = cfg.raw["rewards"]
    kw = dict(conflict_knob=r["conflict_knob"], label_weights=r["label_weights"], noise=r["noise"])
    train_pairs = generate_dataset(spec, r["n_pairs"], seed=cfg.seed, **kw)
    # held-out pairs come from a disjoint stream family
    held = generate_dataset(spec, r["n_heldout"], seed=cfg.seed + 1_000_003, **kw)
    d = out / "data"
    d.mkdir(parents=True, exist_ok=True)
    save_pairs(d / "train.jsonl", train_pairs, spec.hash(), cfg.seed, spec.names)
    save_pairs(d / "heldout.jsonl", held, spec.hash(), cfg.seed + 1_000_003, spec.names)
    write_manifest(d, cfg, "gen-data")


def _load_data(out: Path, name="train"):
    return load_pairs(_require(out / "data" / f"{name}.jsonl", "gen-data"))[1]


def stage_profile(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    spec = cfg.reward_spec()
    pairs = _load_data(out)
    stats = compute_conflict_stats(pairs)
    d = out / "profile"
    d.mkdir(parents=True, exist_ok=True)
    names = spec.names
    _write_csv(d / "pearson.csv", ["axis"] + names,
               [[a] + ["undefined" if v is np.ma.masked else float(v) for v in stats.pearson[i]]
                for i, a in enumerate(names)])
    _write_csv(d / "agreement.csv", ["axis", "agreement"],
               [[a, float(v)] for a, v in zip(names, stats.per_dim_agreement)])
    sweep = conflict_knob_sweep(spec, KNOB_GRID, seeds=(cfg.seed, cfg.seed + 1, cfg.seed + 2),
                                n_pairs=min(cfg.raw["rewards"]["n_pairs"], 500))
    _write_csv(d / "knob_sweep.csv", ["knob", "seed", "conflict_rate"],
               [[float(k), cfg.seed + j, float(sweep[i, j])]
                for i, k in enumerate(KNOB_GRID) for j in range(sweep.shape[1])])
    _write_json(d / "summary.json", {"axes": names, "n_pairs": stats.n_pairs,
                                     "conflict_rate": stats.conflict_rate})
    write_manifest(d, cfg, "profile")


def pretrain_reference(cfg: ExperimentConfig, pairs):
    """Fit the base model on both pair members and return a frozen copy plus its log."""
    base = cfg.build_model()
    base, rows = train(base, None, pairs, cfg.train_config("pretrain"), cfg.schedule())
    return clone_frozen(base), rows


def _checkpointing_train(model, ref, pairs, tcfg, sched, every, prefix, d):
    def save(done, m):
        if every and done % every == 0:
            save_checkpoint(m, d / f"{prefix}_step{done:06d}.ckpt")
    return train(model, ref, pairs, tcfg, sched, callback=save)


def stage_train(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    pairs = _load_data(out)
    sched = cfg.schedule()
    d = out / "train"
    d.mkdir(parents=True, exist_ok=True)
    ref, rows = pretrain_reference(cfg, pairs)
    save_checkpoint(ref, d / "reference.ckpt")
    write_metrics(d / "metrics_pretrain.csv", rows)

    model = ref.copy()
    model.trainable = True
    model, rows = _checkpointing_train(model, None, pairs, cfg.train_config("mcsft"), sched,
                                       cfg.checkpoint_every("mcsft"), "mcsft", d)
    save_checkpoint(model, d / "mcsft.ckpt")
    write_metrics(d / "metrics_mcsft.csv", rows)

    model, rows = _checkpointing_train(model, ref, pairs, cfg.train_config("mcdpo"), sched,
                                       cfg.checkpoint_every("mcdpo"), "mcdpo", d)
    save_checkpoint(model, d / "mcdpo.ckpt")
    write_metrics(d / "metrics_mcdpo.csv", rows)
    write_manifest(d, cfg, "train")


def _load_trained(out: Path):
    d = out / "train"
    ref = load_checkpoint(_require(d / "reference.ckpt", "train"))
    model = load_checkpoint(_require(d / "mcdpo.ckpt", "train"))
    return ref, model


def stage_sample(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    _, model = _load_trained(out)
    spec, sched, guidance = cfg.reward_spec(), cfg.schedule(), cfg.guidance()
    x, c = paired_samples(model, guidance, cfg.eval_prompts(), sched,
                          cfg.raw["eval"]["n_samples"], cfg.seed)
    r = eval_rewards(spec, x, c)
    d = out / "sample"
    d.mkdir(parents=True, exist_ok=True)
    header = {"format": "mcdpo-samples", "version": 1, "seed": cfg.seed,
              "guidance": guidance.to_dict(), "dimension_names": spec.names, "n": len(x)}
    with open(d / "samples.jsonl", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for j in range(len(x)):
            rec = {"index": j, "c": int(c[j]), "x0": x[j].tolist(), "rewards": r[j].tolist()}
            fh.write(json.dumps(rec) + "\n")
    write_manifest(d, cfg, "sample")


def steering_table(model, spec, sched, prompts, weights, n, seed):
    """Mean axis reward under multi-axis guidance on one axis at a time."""
    rows, rho = [], []
    for i, name in enumerate(spec.names):
        means = []
        for wgt in weights:
            aw = np.zeros(spec.D)
            aw[i] = wgt
            x, c = paired_samples(model, GuidanceSpec("reward_multi_axis", axis_weights=aw),
                                  prompts, sched, n, seed)
            m = float(eval_rewards(spec, x, c)[:, i].mean())
            means.append(m)
            rows.append([name, float(wgt), m])
        rho.append(float(spearmanr(weights, means).statistic))
    return rows, rho


def stage_eval(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    ref, model = _load_trained(out)
    held = _load_data(out, "heldout")
    spec, sched, ev = cfg.reward_spec(), cfg.schedule(), cfg.raw["eval"]
    d = out / "eval"
    d.mkdir(parents=True, exist_ok=True)
    rep = winrate(model, ref, spec, cfg.eval_prompts(), ev["n_samples"], cfg.seed, sched,
                  cfg.guidance())
    acc = implicit_accuracy(model, ref, held, cfg.train_config("mcdpo").beta_dpo, sched,
                            ev["n_mc"], cfg.seed)
    write_winrate_table(d / "winrate.csv", {"mcdpo": rep}, spec.names)
    write_implicit_table(d / "implicit.csv", {"mcdpo": acc}, spec.names)
    summary = summary_dict({"winrates": {"mcdpo": rep}, "implicit": {"mcdpo": acc},
                            "skipped": {}, "conflict": compute_conflict_stats(held)}, spec.names)
    if ev.get("steer_weights"):
        rows, rho = steering_table(model, spec, sched, cfg.eval_prompts(), ev["steer_weights"],
                                   ev["n_samples"], cfg.seed)
        _write_csv(d / "steering.csv", ["axis", "weight", "mean_reward"], rows)
        summary["steering_spearman"] = rho
    _write_json(d / "summary.json", summary)
    write_manifest(d, cfg, "eval")


def matrix_config(cfg: ExperimentConfig, heldout=None) -> MatrixConfig:
    mc = cfg.train_config("mcdpo")
    ev = cfg.raw["eval"]
    # every baseline shares the MCDPO optimizer, step and batch budget
    dpo = replace(mc, phase="dpo", dropout_rates=())
    return MatrixConfig(dpo=dpo, mcsft=cfg.train_config("mcsft"), mcdpo=mc,
                        mc_guidance=cfg.guidance(), n_eval=ev["n_samples"], n_mc=ev["n_mc"],
                        eval_prompts=cfg.eval_prompts(), heldout=heldout,
                        regimes=tuple(ev["regimes"]))


def stage_matrix(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    pairs = _load_data(out)
    held_path = out / "data" / "heldout.jsonl"
    held = load_pairs(held_path)[1] if held_path.exists() else None
    spec, sched = cfg.reward_spec(), cfg.schedule()
    d = out / "matrix"
    d.mkdir(parents=True, exist_ok=True)
    ref_path = out / "train" / "reference.ckpt"
    ref = load_checkpoint(ref_path) if ref_path.exists() else pretrain_reference(cfg, pairs)[0]
    result = run_baseline_matrix(ref, pairs, spec, matrix_config(cfg, held), sched, cfg.seed, jobs)
    write_winrate_table(d / "winrate.csv", result["winrates"], spec.names)
    write_implicit_table(d / "implicit.csv", result["implicit"], spec.names)
    _write_json(d / "summary.json", summary_dict(result, spec.names))
    _write_csv(d / "loss_curves.csv", ["regime", "step", "phase", "loss"],
               [[name, r["step"], r["phase"], float(r["loss"])]
                for name, rows in sorted(result["logs"].items()) for r in rows])
    write_manifest(d, cfg, "matrix")


STAGE_FUNCS = {"gen-data": stage_gen_data, "profile": stage_profile, "train": stage_train,
               "sample": stage_sample, "eval": stage_eval, "matrix": stage_matrix}


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcdpo", description=__doc__.splitlines()[0])
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", default="default",
                   help="YAML config path or bundled preset name (default: %(default)s)")
    p.add_argument("--out", help=f"output root (default: config `out`, then ${OUT_ENV}, then ./runs)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel regimes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_out(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.raw.get("out"):
        return Path(cfg.raw["out"])
    return Path(os.environ.get(OUT_ENV, "runs"))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = resolve_out(args, cfg)
    try:
        STAGE_FUNCS[args.stage](cfg, out, args.jobs)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    log.info("%s finished; artifacts in %s", args.stage, out / args.stage.replace("gen-data", "data"))
    return 0


def main() -> None:
    sys.exit(run())
