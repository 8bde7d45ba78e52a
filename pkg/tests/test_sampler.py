import numpy as np
import pytest

from mcdpo.model import NULL_PROMPT, clone_frozen
from mcdpo.sampler import (GuidanceSpec, draw_sampling_noise, guided_eps, implicit_reward_diff,
                           reverse_step, sample)
from mcdpo.schedule import make_linear_schedule
from conftest import perturb, small_model

W2, L2 = np.array([1, 1]), np.array([-1, -1])


@pytest.fixture
def trained():
    return perturb(small_model(), 0.4, 11)


def inputs(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2)), rng.integers(0, 3, n)


def test_lambda_zero_collapses_to_base_terms(trained):
    x, c = inputs()
    cfg = guided_eps(trained, x, 3, GuidanceSpec("prompt_cfg", lambda_cfg=0.0), c)
    np.testing.assert_array_equal(cfg, trained.predict_eps(x, 3, np.full(6, NULL_PROMPT)))
    two = guided_eps(trained, x, 3, GuidanceSpec("reward_two_point", 0.0, gamma_win=W2, gamma_lose=L2), c)
    np.testing.assert_array_equal(two, trained.predict_eps(x, 3, c, L2))
    multi = guided_eps(trained, x, 3, GuidanceSpec("reward_multi_axis", axis_weights=[0.0, 0.0]), c)
    np.testing.assert_array_equal(multi, trained.predict_eps(x, 3, c, [0, 0]))


def test_unit_lambda_telescopes(trained):
    x, c = inputs()
    out = guided_eps(trained, x, 5, GuidanceSpec("reward_two_point", 1.0, gamma_win=W2, gamma_lose=L2), c)
    np.testing.assert_array_equal(out, trained.predict_eps(x, 5, c, W2))


@pytest.mark.parametrize("lam", [0.3, 1.0, 2.5, 7.0])
def test_equal_conditions_cancel(trained, lam):
    x, c = inputs()
    g = np.array([1, -1])
    out = guided_eps(trained, x, 2, GuidanceSpec("reward_two_point", lam, gamma_win=g, gamma_lose=g), c)
    np.testing.assert_array_equal(out, trained.predict_eps(x, 2, c, g))


def test_zero_init_model_ignores_reward_guidance():
    m = small_model()
    x, c = inputs()
    base = m.predict_eps(x, 4, c)
    specs = [GuidanceSpec("none", gamma=W2),
             GuidanceSpec("prompt_cfg", lambda_cfg=1.0, gamma=L2),
             GuidanceSpec("reward_two_point", 3.0, gamma_win=W2, gamma_lose=L2),
             GuidanceSpec("reward_multi_axis", axis_weights=[2.0, -1.0])]
    for s in specs:
        np.testing.assert_array_equal(guided_eps(m, x, 4, s, c), base)


def test_multi_axis_single_axis_matches_two_point_around_neutral(trained):
    x, c = inputs()
    multi = guided_eps(trained, x, 1, GuidanceSpec("reward_multi_axis", axis_weights=[1.5, 0.0]), c)
    e0 = trained.predict_eps(x, 1, c, [0, 0])
    expect = e0 + 1.5 * (trained.predict_eps(x, 1, c, [1, 0]) - trained.predict_eps(x, 1, c, [-1, 0]))
    np.testing.assert_allclose(multi, expect, atol=1e-14)


def test_lose_term_prompt_flag(trained):
    x, c = inputs()
    a = GuidanceSpec("reward_two_point", 2.0, gamma_win=W2, gamma_lose=L2)
    b = GuidanceSpec("reward_two_point", 2.0, gamma_win=W2, gamma_lose=L2, lose_unconditional=True)
    lose_u = trained.predict_eps(x, 1, np.full(6, NULL_PROMPT), L2)
    np.testing.assert_allclose(guided_eps(trained, x, 1, b, c),
                               lose_u + 2.0 * (trained.predict_eps(x, 1, c, W2) - lose_u), atol=1e-14)
    assert not np.allclose(guided_eps(trained, x, 1, a, c), guided_eps(trained, x, 1, b, c))


def test_guidance_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        GuidanceSpec("nope")
    with pytest.raises(ValueError):
        GuidanceSpec("reward_two_point", gamma_win=W2)
    with pytest.raises(ValueError):
        GuidanceSpec("reward_multi_axis")
    with pytest.raises(ValueError):
        GuidanceSpec("prompt_cfg", lambda_cfg=float("inf"))
    s = GuidanceSpec("reward_two_point", 1.5, gamma_win=[1, 0], gamma_lose=[-1, 0])
    back = GuidanceSpec.from_dict(s.to_dict())
    assert back.to_dict() == s.to_dict() == {"mode": "reward_two_point", "lambda_cfg": 1.5,
                                             "lose_unconditional": False, "gamma_win": "WT",
                                             "gamma_lose": "LT"}


class PerfectDenoiser:
    """Returns the exact noise for a point-mass data distribution at ``x0``."""

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched

    def predict_eps(self, x_t, t, c=None, gamma=None):
        ab = self.sched.alpha_bars[np.asarray(t)][:, None]
        return (x_t - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)


def test_single_step_inversion_recovers_data():
    sched = make_linear_schedule(1, 0.4, 0.4)
    x0 = np.array([0.7, -1.2])
    x1 = np.random.default_rng(0).normal(size=(5, 2))
    out = reverse_step(PerfectDenoiser(x0, sched), x1, 1, GuidanceSpec(), np.zeros(5, int), sched)
    np.testing.assert_allclose(out, np.tile(x0, (5, 1)), atol=1e-6)


def test_reverse_step_range_and_determinism(trained, sched):
    x, c = inputs()
    with pytest.raises(IndexError):
        reverse_step(trained, x, 0, GuidanceSpec(), c, sched)
    a = reverse_step(trained, x, 5, GuidanceSpec(), c, sched, rng=np.random.default_rng(3))
    b = reverse_step(trained, x, 5, GuidanceSpec(), c, sched, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        reverse_step(small_model(d=3), x, 5, GuidanceSpec(), c, sched, rng=np.random.default_rng(0))


def test_last_step_adds_no_noise(trained, sched):
    x, c = inputs()
    a = reverse_step(trained, x, 1, GuidanceSpec(), c, sched, z=np.zeros_like(x))
    b = reverse_step(trained, x, 1, GuidanceSpec(), c, sched, z=np.full_like(x, 5.0))
    np.testing.assert_array_equal(a, b)


def test_sampling_noise_streams_per_trajectory():
    x_T, zs = draw_sampling_noise(6, 2, 10, seed=4)
    x_sub, zs_sub = draw_sampling_noise(2, 2, 10, seed=4, offset=3)
    np.testing.assert_array_equal(x_sub, x_T[3:5])
    np.testing.assert_array_equal(zs_sub, zs[:, 3:5])


def test_shared_noise_sampling(trained, sched):
    noise = draw_sampling_noise(6, 2, sched.T, seed=1)
    c = np.arange(6) % 3
    s1 = sample(trained, GuidanceSpec("none", gamma=W2), c, sched, noise)
    np.testing.assert_array_equal(s1, sample(trained, GuidanceSpec("none", gamma=W2), c, sched, noise))
    zero = small_model()
    np.testing.assert_array_equal(
        sample(zero, GuidanceSpec(), c, sched, noise),
        sample(zero, GuidanceSpec("reward_two_point", 4.0, gamma_win=W2, gamma_lose=L2), c, sched, noise))


def test_implicit_reward_diff_identities(trained, sched):
    ref = clone_frozen(perturb(trained, 0.1, 1))
    x, c = inputs()
    g1, g2 = np.array([1, 0]), np.array([-1, 0])
    assert np.all(implicit_reward_diff(trained, ref, x, c, g1, g1, sched, 5.0, 8) == 0)
    d12 = implicit_reward_diff(trained, ref, x, c, g1, g2, sched, 5.0, 8, seed=2)
    d21 = implicit_reward_diff(trained, ref, x, c, g2, g1, sched, 5.0, 8, seed=2)
    np.testing.assert_array_equal(d12, -d21)
    fresh = small_model()
    assert np.all(implicit_reward_diff(fresh, clone_frozen(fresh), x, c, g1, g2, sched, 5.0, 8) == 0)
    with pytest.raises(ValueError):
        implicit_reward_diff(trained, ref, x, c, g1, g2, sched, 5.0, 0)
