import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcdpo.model import (NULL_PROMPT, ToyDenoiser, clone_frozen, load_checkpoint,
                         merge_parameters, save_checkpoint)
from conftest import perturb, small_model
from oracles import fd_check


def probe_inputs(rng, n=7, d=2, T=10, n_prompts=3):
    return rng.normal(size=(n, d)), rng.integers(0, T, n), rng.integers(0, n_prompts, n)


def test_zero_init_neutrality():
    m = ToyDenoiser(2, 3, 4, 50, seed=1)
    rng = np.random.default_rng(0)
    x, t, c = probe_inputs(rng, T=50, n_prompts=4)
    outs = [m.predict_eps(x, t, c, g) for g in ([1, 1, 1], [-1, 0, 1], [0, 0, 0], None)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])
    assert m.gate_lambda == 1.0


def test_tie_vector_equals_no_condition_after_training_like_perturbation():
    m = perturb(small_model(), 0.5, 3)
    rng = np.random.default_rng(1)
    x, t, c = probe_inputs(rng)
    np.testing.assert_array_equal(m.predict_eps(x, t, c, [0, 0]), m.predict_eps(x, t, c, None))
    assert not np.array_equal(m.predict_eps(x, t, c, [1, 1]), m.predict_eps(x, t, c, [-1, -1]))


def test_null_prompt_spellings_agree():
    m = perturb(small_model(), 0.5, 4)
    x = np.ones((3, 2))
    np.testing.assert_array_equal(m.predict_eps(x, 2, None), m.predict_eps(x, 2, [NULL_PROMPT] * 3))


def test_input_validation():
    m = small_model()
    with pytest.raises(ValueError):
        m.predict_eps(np.zeros(3), 0, 0)
    with pytest.raises(ValueError):
        m.predict_eps(np.zeros(2), 0, 0, [1, 0, 1])
    with pytest.raises(ValueError):
        m.predict_eps(np.zeros(2), 0, 0, [2, 0])
    with pytest.raises(ValueError):
        m.predict_eps(np.zeros(2), 0, 3)
    with pytest.raises(IndexError):
        m.predict_eps(np.zeros(2), 10, 0)


@pytest.mark.parametrize("seed", range(20))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = perturb(small_model(seed), 0.3, seed + 50)
    x, t, c = probe_inputs(rng, n=4)
    g = rng.integers(-1, 2, size=(4, 2))
    weights = rng.normal(size=(4, 2))

    def loss(model):
        out, tape = model.forward(x, t, c, g)
        return float(np.sum(weights * np.sin(out))), model.backward(tape, weights * np.cos(out))

    assert fd_check(m, loss) < 1e-4


def test_gradient_zero_without_downstream_influence():
    m = perturb(small_model(n_prompts=3), 0.3, 0)
    x = np.ones((2, 2))
    out, tape = m.forward(x, [1, 2], [0, 0], [[1, 1], [1, 0]])
    grads = m.backward(tape, np.ones_like(out))
    # unused prompt rows and the never-selected lose embedding
    assert np.all(grads["base.prompt_emb"][1:3] == 0)
    assert np.all(grads["reward.emb_lose"] == 0)
    assert np.all(grads["reward.emb_win"][1] != 0)


def test_gradient_scales_with_loss():
    m = perturb(small_model(), 0.3, 1)
    out, tape = m.forward(np.ones((3, 2)), [0, 1, 2], [0, 1, 2], [[1, -1]] * 3)
    g1 = m.backward(tape, np.ones_like(out)).flat()
    g3 = m.backward(tape, 3.0 * np.ones_like(out)).flat()
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-13)


def test_backward_requires_matching_tape():
    m, other = small_model(0), small_model(1)
    _, tape = other.forward(np.ones(2), 0, 0)
    with pytest.raises(RuntimeError):
        m.backward(tape, np.ones(2))
    with pytest.raises(RuntimeError):
        m.backward(None, np.ones(2))


def test_frozen_clone_is_immutable_and_idempotent():
    m = perturb(small_model(), 0.3, 2)
    ref = clone_frozen(m)
    rng = np.random.default_rng(0)
    x, t, c = probe_inputs(rng)
    before = ref.predict_eps(x, t, c)
    for _ in range(100):
        m.apply_update(_random_step(m, rng))
    np.testing.assert_array_equal(ref.predict_eps(x, t, c), before)
    with pytest.raises(RuntimeError):
        ref.apply_update(ref.zero_grad())
    twice = clone_frozen(ref)
    np.testing.assert_array_equal(twice.get_flat(), ref.get_flat())
    assert not twice.trainable


def _random_step(m, rng):
    g = m.zero_grad()
    for k in g:
        g[k] = 1e-2 * rng.normal(size=g[k].shape)
    return g


def test_merge_examples():
    m = perturb(small_model(), 0.3, 5)
    np.testing.assert_array_equal(merge_parameters([m]).get_flat(), m.get_flat())
    np.testing.assert_array_equal(merge_parameters([m, m]).get_flat(), m.get_flat())
    neg = m.copy()
    neg.set_flat(-m.get_flat())
    assert np.all(merge_parameters([m, neg]).get_flat() == 0)
    with pytest.raises(ValueError):
        merge_parameters([])
    with pytest.raises(ValueError):
        merge_parameters([m, small_model(hidden=7)])


@given(st.integers(0, 2**32 - 1))
def test_gate_lambda_linearity(seed):
    m = perturb(small_model(), 0.3, seed)
    x, t, c = probe_inputs(np.random.default_rng(seed))
    g = [1, -1]
    outs = {}
    for lam in (0.0, 1.0, 2.0):
        m.gate_lambda = lam
        outs[lam] = m.predict_eps(x, t, c, g)
    np.testing.assert_allclose(outs[2.0] - outs[0.0], 2 * (outs[1.0] - outs[0.0]), atol=1e-12)


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    m = perturb(small_model(), 0.3, 6)
    m.gate_lambda = 0.75
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    x, t, c = probe_inputs(np.random.default_rng(3))
    for g in ([1, -1], [0, 0], None):
        np.testing.assert_array_equal(back.predict_eps(x, t, c, g), m.predict_eps(x, t, c, g))
    assert list(back.params) == list(m.params)
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_set_flat_size_check():
    m = small_model()
    with pytest.raises(ValueError):
        m.set_flat(np.zeros(3))
