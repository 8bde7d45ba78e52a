"""Multi-reward conditional preference optimization for toy diffusion models."""

__version__ = "0.1.0"

from .schedule import NoiseSchedule, forward_sample, make_linear_schedule, omega
from .model import ToyDenoiser, load_checkpoint, merge_parameters, save_checkpoint
from .preference import bt_prob, compute_outcome_vector, disentangled_bt_prob
from .losses import TrainConfig, dpo_loss, mcdpo_loss, sft_loss
from .rewards import (RewardSpec, compute_conflict_stats, default_spec, five_dim_spec,
                      generate_dataset)
from .sampler import GuidanceSpec, guided_eps, sample
from .training import train
from .harness import implicit_accuracy, run_baseline_matrix, winrate

__all__ = [
    "NoiseSchedule", "forward_sample", "make_linear_schedule", "omega",
    "ToyDenoiser", "load_checkpoint", "merge_parameters", "save_checkpoint",
    "bt_prob", "compute_outcome_vector", "disentangled_bt_prob",
    "TrainConfig", "dpo_loss", "mcdpo_loss", "sft_loss",
    "RewardSpec", "compute_conflict_stats", "default_spec", "five_dim_spec", "generate_dataset",
    "GuidanceSpec", "guided_eps", "sample", "train",
    "implicit_accuracy", "run_baseline_matrix", "winrate",
]
