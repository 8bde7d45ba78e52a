import numpy as np
import pytest
from hypothesis import settings

from mcdpo.model import ToyDenoiser
from mcdpo.rewards import PairBatch
from mcdpo.schedule import make_linear_schedule

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def small_model(seed=0, d=2, D=2, n_prompts=3, T=10, **kw):
    arch = dict(hidden=6, depth=2, prompt_dim=3, reward_dim=4, mix_dim=5)
    arch.update(kw)
    return ToyDenoiser(d, D, n_prompts, T, seed=seed, **arch)


def perturb(model, scale, seed):
    """Copy with every parameter (including the zero-init projection) jittered."""
    rng = np.random.default_rng(seed)
    out = model.copy()
    for k, v in out.params.items():
        out.params[k] = v + scale * rng.normal(size=v.shape)
    return out


def random_batch(rng, n, d=2, D=2, n_prompts=3, conflicts=True):
    g = rng.integers(-1, 2, size=(n, D)).astype(np.int8)
    if not conflicts:
        g = np.abs(g).astype(np.int8)
    return PairBatch(rng.normal(size=(n, d)), rng.normal(size=(n, d)),
                     rng.integers(0, n_prompts, size=n), g)


@pytest.fixture
def sched():
    return make_linear_schedule(10, 0.01, 0.3)
