"""
Baseline matrix and implicit-reward accuracy
============================================

Every regime starts from the same reference and gets the same step and
batch budget: DPO on all pairs, DPO on conflict-free pairs, one specialist
per axis plus their parameter average, MCSFT and MCDPO.  The same entry
point backs the ``mcdpo matrix`` command.  Takes about ten seconds.
"""

import numpy as np

from mcdpo.cli import matrix_config, pretrain_reference
from mcdpo.config import ExperimentConfig
from mcdpo.harness import run_baseline_matrix
from mcdpo.rewards import generate_dataset

cfg = ExperimentConfig.from_dict({
    "pretrain": {"steps": 2000},
    "mcdpo": {"beta_dpo": 5.0, "learning_rate": 2e-6},
    "eval": {"n_samples": 300, "n_mc": 16},
})
spec = cfg.reward_spec()
pairs = generate_dataset(spec, 4000, seed=cfg.seed)
held = generate_dataset(spec, 500, seed=cfg.seed + 1_000_003)

ref, _ = pretrain_reference(cfg, pairs)
result = run_baseline_matrix(ref, pairs, spec, matrix_config(cfg, held), cfg.schedule(), cfg.seed)

print(f"conflict rate {result['conflict'].conflict_rate:.3f}")
print(f"{'regime':>14}  " + "  ".join(f"{n:>9}" for n in spec.names))
for name, rep in result["winrates"].items():
    print(f"{name:>14}  " + "  ".join(f"{v:9.3f}" for v in rep.per_axis))

for name, rep in result["implicit"].items():
    print(name, "implicit accuracy")
    for mode in ("win_only", "lose_only", "combined"):
        print(f"  {mode:>9}:", np.round(np.asarray(getattr(rep, f'per_axis_{mode}')), 3))
