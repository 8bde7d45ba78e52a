"""
Pretraining, MCSFT and MCDPO on the conflict dataset
====================================================

Train a reference denoiser, teach the reward pathway what each outcome
vector looks like, then fine-tune with the conditional preference loss.
Sampling uses two-point guidance from all-lose to all-win.  Runs in a few
seconds.
"""

import numpy as np

from mcdpo.harness import winrate
from mcdpo.losses import TrainConfig
from mcdpo.model import ToyDenoiser, clone_frozen
from mcdpo.rewards import default_spec, generate_dataset
from mcdpo.sampler import GuidanceSpec
from mcdpo.schedule import make_linear_schedule
from mcdpo.training import train

spec = default_spec()
sched = make_linear_schedule(50, 2e-3, 0.3)
pairs = generate_dataset(spec, 2000, seed=0)

base = ToyDenoiser(spec.d, spec.D, spec.n_prompts, sched.T, hidden=64, depth=3, seed=0)
base, _ = train(base, None, pairs, TrainConfig(phase="pretrain", learning_rate=0.02, steps=2000,
                                               batch_size=128, text_dropout=0.2, warmup_steps=100),
                sched)
ref = clone_frozen(base)

model = ref.copy()
model.trainable = True
model, _ = train(model, None, pairs, TrainConfig(phase="mcsft", learning_rate=0.01, steps=500,
                                                 batch_size=64, dropout_rates=(0.1, 0.1),
                                                 text_dropout=0.2, warmup_steps=100), sched)
model, log = train(model, ref, pairs, TrainConfig(phase="mcdpo", beta_dpo=5.0, learning_rate=2e-6,
                                                  steps=300, batch_size=64,
                                                  dropout_rates=(0.2, 0.2), warmup_steps=100),
                   sched)
print("mcdpo loss first/last:", round(log[0]["loss"], 4), round(log[-1]["loss"], 4))

guide = GuidanceSpec("reward_two_point", 1.0, gamma_win=[1, 1], gamma_lose=[-1, -1])
rep = winrate(model, ref, spec, range(spec.n_prompts), 300, 0, sched, guide)
print("win rate vs reference:", dict(zip(spec.names, np.round(rep.per_axis, 3).tolist())), "+/-", np.round(rep.ci95, 3))
