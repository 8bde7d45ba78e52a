"""Experiment configuration: a flat YAML file with one section per stage.

Unknown keys are rejected.  ``dropout_rates: standard`` expands to the
per-axis defaults of the section's phase, keyed by axis name; a bare number
applies one rate to every axis.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .losses import TrainConfig, default_dropout_rates
from .model import ToyDenoiser
from .preference import check_weights, decode_outcome
from .rewards import RewardSpec, default_spec, five_dim_spec
from .sampler import GuidanceSpec
from .schedule import NoiseSchedule, make_linear_schedule

SPECS = {"default": default_spec, "five_dim": five_dim_spec}
TRAIN_SECTIONS = ("pretrain", "mcsft", "mcdpo")
SECTION_KEYS = {
    "schedule": {"T", "beta_start", "beta_end", "omega_mode"},
    "model": {"hidden", "depth", "prompt_dim", "reward_dim", "mix_dim", "gate_lambda"},
    "rewards": {"spec", "n_pairs", "n_heldout", "conflict_knob", "label_weights", "noise"},
    "guidance": {"mode", "lambda_cfg", "gamma", "gamma_win", "gamma_lose", "axis_weights",
                 "lose_unconditional"},
    "eval": {"n_samples", "n_mc", "prompts", "steer_weights", "regimes"},
}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"phase", "seed", "specialist_dim"} \
    | {"checkpoint_every"}
TOP_KEYS = {"seed", "out"} | set(SECTION_KEYS) | set(TRAIN_SECTIONS)


class ConfigError(ValueError):
    pass


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("mcdpo.configs").iterdir()
                  if p.name.endswith(".yaml"))


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    name = p.name[:-5] if p.name.endswith(".yaml") else p.name
    if name in preset_names():
        return Path(str(resources.files("mcdpo.configs") / f"{name}.yaml"))
    raise ConfigError(f"config file {path} does not exist")


@dataclass
class ExperimentConfig:
    raw: dict

    # -- loading ----------------------------------------------------------
    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = resolve_config_path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        base = yaml.safe_load(resolve_config_path("default").read_text())
        merged = copy.deepcopy(base)
        for key, val in data.items():
            if key not in TOP_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(val, dict):
                allowed = SECTION_KEYS.get(key, TRAIN_KEYS)
                unknown = set(val) - allowed
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                merged[key] = {**merged.get(key, {}), **val}
            else:
                merged[key] = val
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return ExperimentConfig(raw)

    def validate(self) -> None:
        try:
            self.schedule()
            self.reward_spec()
            for sec in TRAIN_SECTIONS:
                self.train_config(sec)
            self.guidance()
            r = self.raw["rewards"]
            if r["n_pairs"] < 1 or r["n_heldout"] < 1:
                raise ValueError("n_pairs and n_heldout must be positive")
            if r.get("label_weights") is not None:
                check_weights(r["label_weights"])
            if self.raw["eval"]["n_samples"] < 1:
                raise ValueError("eval.n_samples must be positive")
            self.build_model()
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    # -- builders ---------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def schedule(self) -> NoiseSchedule:
        s = self.raw["schedule"]
        return make_linear_schedule(s["T"], s["beta_start"], s["beta_end"], s.get("omega_mode", "constant"))

    def reward_spec(self) -> RewardSpec:
        name = self.raw["rewards"]["spec"]
        if name not in SPECS:
            raise ValueError(f"unknown reward spec {name!r}; choose from {sorted(SPECS)}")
        return SPECS[name]()

    def build_model(self, seed: int | None = None) -> ToyDenoiser:
        spec = self.reward_spec()
        return ToyDenoiser(spec.d, spec.D, spec.n_prompts, self.raw["schedule"]["T"],
                           seed=self.seed if seed is None else seed, **self.raw["model"])

    def train_config(self, section: str, phase: str | None = None) -> TrainConfig:
        sec = dict(self.raw[section])
        sec.pop("checkpoint_every", None)
        if sec.get("dropout_rates") == "standard":
            if section not in ("mcsft", "mcdpo"):
                raise ValueError(f"[{section}] has no standard dropout rates")
            sec["dropout_rates"] = default_dropout_rates(self.reward_spec().names, section)
        elif isinstance(sec.get("dropout_rates"), (int, float)):
            sec["dropout_rates"] = (float(sec["dropout_rates"]),) * self.reward_spec().D
        sec.setdefault("dropout_rates", ())
        rates = sec["dropout_rates"]
        if rates and len(rates) != self.reward_spec().D:
            raise ValueError(f"[{section}] needs one dropout rate per reward axis")
        return TrainConfig(phase=phase or section, seed=self.seed, **sec)

    def checkpoint_every(self, section: str) -> int:
        return int(self.raw[section].get("checkpoint_every", 0) or 0)

    def guidance(self) -> GuidanceSpec:
        g = dict(self.raw["guidance"])
        for key in ("gamma", "gamma_win", "gamma_lose"):
            if isinstance(g.get(key), str):
                g[key] = decode_outcome(g[key])
        D = self.reward_spec().D
        if g.get("mode") == "reward_two_point":
            if g.get("gamma_win") is None:
                g["gamma_win"] = np.ones(D, dtype=np.int8)
            if g.get("gamma_lose") is None:
                g["gamma_lose"] = -np.ones(D, dtype=np.int8)
        for key in ("gamma", "gamma_win", "gamma_lose"):
            if g.get(key) is not None and len(g[key]) != D:
                raise ValueError(f"guidance {key} needs {D} entries")
        if g.get("axis_weights") is not None:
            g["axis_weights"] = np.asarray(g["axis_weights"], dtype=np.float64)
        return GuidanceSpec(**g)

    def eval_prompts(self) -> tuple:
        p = self.raw["eval"].get("prompts")
        return tuple(range(self.reward_spec().n_prompts)) if p is None else tuple(p)

    # -- provenance -------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]
