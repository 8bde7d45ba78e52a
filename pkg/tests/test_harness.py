import numpy as np
import pytest

from mcdpo.harness import (MatrixConfig, implicit_accuracy, pairwise_accuracy,
                           run_baseline_matrix, winrate, write_implicit_table, write_summary,
                           write_winrate_table)
from mcdpo.losses import TrainConfig
from mcdpo.model import clone_frozen
from mcdpo.rewards import PreferencePair, default_spec, eval_rewards, generate_dataset, stack_pairs
from mcdpo.sampler import GuidanceSpec, implicit_reward_diff
from mcdpo.schedule import make_linear_schedule
from conftest import perturb, small_model

SPEC = default_spec()


def model4(seed=0):
    return small_model(seed, n_prompts=4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_self_comparison_is_exactly_half(seed, sched):
    m = perturb(model4(), 0.3, seed)
    rep = winrate(m, m, SPEC, range(4), 64, seed, sched)
    np.testing.assert_array_equal(rep.per_axis, [0.5, 0.5])
    np.testing.assert_allclose(rep.ci95, 1.96 * np.sqrt(0.25 / 64))


class PointMass:
    """Sampler that denoises exactly onto a single point."""

    def __init__(self, x0, sched):
        self.x0, self.sched, self.d = np.asarray(x0), sched, 2

    def predict_eps(self, x_t, t, c=None, gamma=None):
        ab = self.sched.alpha_bars[np.asarray(t)][:, None]
        return (x_t - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)


def test_axis_optimum_oracle_wins(sched):
    # the first default axis peaks at the origin
    rep = winrate(PointMass(np.zeros(2), sched), model4(), SPEC, range(4), 300, 0, sched)
    assert rep.per_axis[0] > 0.99


def test_winrate_needs_samples(sched):
    with pytest.raises(ValueError):
        winrate(model4(), model4(), SPEC, range(4), 0, 0, sched)


@pytest.fixture(scope="module")
def heldout():
    return generate_dataset(SPEC, 300, seed=5)


def test_zero_init_model_scores_chance(heldout, sched):
    m = model4()
    rep = implicit_accuracy(m, clone_frozen(m), heldout, 5.0, sched, n_mc=4)
    for mode in ("win_only", "lose_only", "combined"):
        np.testing.assert_array_equal(getattr(rep, f"per_axis_{mode}"), [0.5, 0.5])
    assert np.all(rep.n_pairs == 300)


def test_perfect_judge_is_fully_accurate(heldout):
    b = stack_pairs(heldout)
    for i in range(SPEC.D):
        acc = pairwise_accuracy(lambda x, c: eval_rewards(SPEC, x, c)[:, i], b.x_w, b.x_l, b.c,
                                b.gamma_wl[:, i])
        assert acc == 1.0


def test_self_consistent_labels_are_fully_accurate(heldout, sched):
    m = perturb(model4(), 0.3, 1)
    ref = clone_frozen(perturb(m, 0.1, 2))
    b = stack_pairs(heldout[:100])
    plus, minus = np.array([1, 0]), np.array([-1, 0])
    s_w = implicit_reward_diff(m, ref, b.x_w, b.c, plus, minus, sched, 5.0, 8, seed=0)
    s_l = implicit_reward_diff(m, ref, b.x_l, b.c, plus, minus, sched, 5.0, 8, seed=0)
    truth = np.sign(s_w - s_l).astype(np.int8)
    pairs = [PreferencePair(b.x_w[k], b.x_l[k], int(b.c[k]), np.zeros(2), np.zeros(2),
                            np.array([truth[k], 0], dtype=np.int8),
                            -np.array([truth[k], 0], dtype=np.int8), "injected-human")
             for k in range(100)]
    rep = implicit_accuracy(m, ref, pairs, 5.0, sched, n_mc=8, seed=0, modes=("combined",))
    assert rep.per_axis_combined[0] == 1.0
    assert rep.per_axis_combined.mask[1]
    assert rep.n_pairs[1] == 0


def matrix_cfg(steps, heldout=None, regimes=("dpo", "dpo_filtered", "specialists", "merged",
                                                "mcsft", "mcdpo")):
    tc = TrainConfig(steps=steps, batch_size=16, beta_dpo=1.0, learning_rate=1e-3, warmup_steps=2,
                     log_every=0)
    return MatrixConfig(dpo=tc, mcsft=TrainConfig(phase="mcsft", steps=steps, batch_size=16,
                                                  learning_rate=1e-2, log_every=0),
                        mcdpo=tc, mc_guidance=GuidanceSpec("reward_two_point", 1.0,
                                                           gamma_win=[1, 1], gamma_lose=[-1, -1]),
                        n_eval=40, n_mc=4, heldout=heldout, regimes=regimes)


def test_matrix_without_training_ties_everywhere(heldout, sched):
    ref = clone_frozen(model4())
    out = run_baseline_matrix(ref, heldout, SPEC, matrix_cfg(0), sched, seed=0, jobs=2)
    assert set(out["winrates"]) == {"dpo", "dpo_filtered", "specialist_0", "specialist_1",
                                    "merged", "mcsft", "mcdpo"}
    for rep in out["winrates"].values():
        np.testing.assert_array_equal(rep.per_axis, [0.5, 0.5])


def test_matrix_merged_is_mean_of_specialists(heldout, sched):
    ref = clone_frozen(model4())
    out = run_baseline_matrix(ref, heldout, SPEC, matrix_cfg(3, regimes=("specialists", "merged")),
                              sched, seed=0)
    sp = [out["models"][f"specialist_{i}"].get_flat() for i in range(2)]
    np.testing.assert_allclose(out["models"]["merged"].get_flat(), (sp[0] + sp[1]) / 2, atol=1e-15)


def test_matrix_skips_empty_filtered_regime(heldout, sched):
    conflicts = [p for p in heldout if p.is_conflict()]
    out = run_baseline_matrix(clone_frozen(model4()), conflicts, SPEC,
                              matrix_cfg(2, regimes=("dpo", "dpo_filtered")), sched)
    assert "dpo_filtered" in out["skipped"]
    assert "dpo_filtered" not in out["winrates"]


def test_matrix_reports_are_reproducible(heldout, sched, tmp_path):
    blobs = []
    for k in range(2):
        out = run_baseline_matrix(clone_frozen(model4()), heldout, SPEC,
                                  matrix_cfg(4, heldout=heldout[:60]), sched, seed=1, jobs=3)
        d = tmp_path / str(k)
        d.mkdir()
        write_winrate_table(d / "w.csv", out["winrates"], SPEC.names)
        write_implicit_table(d / "i.csv", out["implicit"], SPEC.names)
        write_summary(d / "s.json", out, SPEC.names)
        blobs.append(b"".join((d / f).read_bytes() for f in ("w.csv", "i.csv", "s.json")))
    assert blobs[0] == blobs[1]
    assert b"pooled" in blobs[0]
