"""
Guidance modes and single-axis steering
=======================================

The four ways of assembling the noise prediction, checked on a few
identities, then a sweep of multi-axis guidance weights on one axis.
Trains a small model first (a few seconds).
"""

import numpy as np

from mcdpo.losses import TrainConfig
from mcdpo.model import ToyDenoiser, clone_frozen
from mcdpo.harness import paired_samples
from mcdpo.rewards import default_spec, eval_rewards, generate_dataset
from mcdpo.sampler import GuidanceSpec, guided_eps
from mcdpo.schedule import make_linear_schedule
from mcdpo.training import train

spec = default_spec()
sched = make_linear_schedule(50, 2e-3, 0.3)
pairs = generate_dataset(spec, 2000, seed=0)
model = ToyDenoiser(spec.d, spec.D, spec.n_prompts, sched.T, hidden=64, depth=3, seed=0)
model, _ = train(model, None, pairs, TrainConfig(phase="pretrain", learning_rate=0.02, steps=1500,
                                                 batch_size=128, text_dropout=0.2), sched)
ref = clone_frozen(model)
model, _ = train(model, None, pairs, TrainConfig(phase="mcsft", learning_rate=0.01, steps=400,
                                                 batch_size=64, dropout_rates=(0.1, 0.1),
                                                 text_dropout=0.2), sched)

x = np.random.default_rng(1).normal(size=(5, 2))
c = np.arange(5) % spec.n_prompts
win, lose = np.array([1, 1]), np.array([-1, -1])

# unit scale telescopes to the all-win prediction
two = guided_eps(model, x, 10, GuidanceSpec("reward_two_point", 1.0, gamma_win=win, gamma_lose=lose), c)
print("lambda=1 equals eps(x | W):", np.array_equal(two, model.predict_eps(x, 10, c, win)))
# zero scale leaves the unconditional branch
cfg0 = guided_eps(model, x, 10, GuidanceSpec("prompt_cfg", lambda_cfg=0.0), c)
print("lambda=0 equals eps(x | null prompt):",
      np.array_equal(cfg0, model.predict_eps(x, 10, np.full(5, -1))))

# steer each axis on its own
for i, name in enumerate(spec.names):
    means = []
    for weight in (0.0, 0.5, 1.0, 2.0):
        aw = np.zeros(spec.D)
        aw[i] = weight
        xs, cs = paired_samples(model, GuidanceSpec("reward_multi_axis", axis_weights=aw),
                                range(spec.n_prompts), sched, 300, 0)
        means.append(eval_rewards(spec, xs, cs)[:, i].mean())
    print(f"{name:>10}: mean reward by weight {np.round(means, 3)}")
