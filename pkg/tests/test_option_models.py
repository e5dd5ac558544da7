import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import flat_gradient, numeric_gradient, random_batch, random_learned
from oracles import enumerate_paths, option_model_dense
from partial_options import taxi
from partial_options.mdp_core import TabularMDP, random_mdp
from partial_options.option_models import (DivergenceError, LearnedModel, OptionModel, empirical_from_samples,
                                           empirical_option_model, enumerate_trajectories, exact_option_model,
                                           masked_loss, sample_option_outcomes, train_partial_model)
from partial_options.options import Dataset, Option, OptionTransition, primitive_options, random_options


def chain_mdp(gamma=0.5):
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 2] = 1.0
    return TabularMDP(P, np.ones((3, 1)), gamma)


# --- exact models -----------------------------------------------------------------

def test_primitive_wrapper_model(rng):
    mdp = random_mdp(5, 3, 0.8, rng)
    model = exact_option_model(mdp, primitive_options(mdp))
    dense = model.dense()
    for a in range(3):
        np.testing.assert_allclose(dense[:, a, :], 0.8 * mdp.transition[:, a, :], atol=1e-12)
        np.testing.assert_allclose(model.R[:, a], mdp.reward[:, a], atol=1e-12)
        np.testing.assert_allclose(model.L[:, a], 1.0, atol=1e-12)


def test_three_state_chain():
    mdp = chain_mdp()
    opt = Option(0, np.ones(3, bool), np.zeros(3, int), np.array([0.0, 0.0, 1.0]))
    model = exact_option_model(mdp, opt)
    assert model.dense()[0, 0, 2] == pytest.approx(0.25)
    assert model.R[0, 0] == pytest.approx(1.5)
    assert model.L[0, 0] == pytest.approx(2.0)


def test_matches_dense_solve(rng):
    for _ in range(10):
        mdp = random_mdp(7, 3, 0.9, rng)
        opts = random_options(mdp, 3, rng)
        model = exact_option_model(mdp, opts)
        for o, opt in enumerate(opts):
            prob, ret = option_model_dense(mdp.transition, mdp.reward, 0.9, opt.policy, opt.termination)
            np.testing.assert_allclose(model.dense()[:, o, :], prob, atol=1e-10)
            np.testing.assert_allclose(model.R[:, o], ret, atol=1e-10)


def test_matches_trajectory_enumeration(rng):
    for _ in range(5):
        mdp = random_mdp(6, 3, 0.7, rng)
        opts = random_options(mdp, 3, rng, (0.3, 1.0))
        model = exact_option_model(mdp, opts)
        for o, opt in enumerate(opts):
            for s in range(6):
                traj = enumerate_trajectories(mdp, opt, s, 64)
                np.testing.assert_allclose(traj.discounted_distribution(), model.dense()[s, o], atol=1e-6)
                assert traj.expected_return() == pytest.approx(model.R[s, o], abs=1e-6)


def test_never_stopping_option_has_infinite_duration():
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    mdp = TabularMDP(P, np.zeros((2, 1)), 0.9)
    opt = Option(0, np.ones(2, bool), np.zeros(2, int), np.array([0.0, 1.0]))
    model = exact_option_model(mdp, opt)
    assert math.isinf(model.L[0, 0]) and model.mass()[0, 0] == 0.0
    assert model.L[1, 0] == 1.0


def test_taxi_exact_model_is_sub_stochastic(taxi_model, taxi_mdp):
    mass = taxi_model.mass()
    assert np.all(mass >= 0) and np.all(mass <= taxi_mdp.gamma + 1e-12)
    assert taxi_model.residual < 1e-8
    # terminal states take no decisions
    assert not taxi_model.defined[taxi_mdp.terminal_mask].any()
    assert taxi_model.defined[~taxi_mdp.terminal_mask].all()


def test_model_save_load(tmp_path, rng):
    mdp = random_mdp(4, 2, 0.9, rng)
    model = exact_option_model(mdp, random_options(mdp, 2, rng))
    model.save(tmp_path / "m.txt")
    back = OptionModel.load(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.dense(), model.dense())
    np.testing.assert_array_equal(back.R, model.R)


# --- trajectory enumeration ----------------------------------------------------------

def test_enumeration_matches_path_by_path_oracle(rng):
    for _ in range(5):
        mdp = random_mdp(3, 2, 0.8, rng, sparsity=0.4)
        opt = random_options(mdp, 1, rng, (0.2, 0.9))[0]
        traj = enumerate_trajectories(mdp, opt, 0, 7)
        paths, running = enumerate_paths(mdp.transition, mdp.reward, 0.8, opt.policy, opt.termination, 0, 7)
        expected_mass = np.zeros_like(traj.mass)
        expected_ret = np.zeros_like(traj.returns)
        for (s2, t), (p, g) in paths.items():
            expected_mass[s2, t] = p
            expected_ret[s2, t] = g
        np.testing.assert_allclose(traj.mass, expected_mass, atol=1e-14)
        np.testing.assert_allclose(traj.returns, expected_ret, atol=1e-12)
        assert traj.residual == pytest.approx(running, abs=1e-14)


def test_horizon_one_primitive(rng):
    mdp = random_mdp(4, 2, 0.9, rng)
    opt = primitive_options(mdp)[1]
    traj = enumerate_trajectories(mdp, opt, 2, 1)
    np.testing.assert_allclose(traj.mass[:, 1], mdp.transition[2, 1], atol=1e-15)
    assert traj.residual == 0.0


def test_total_probability_and_discounting(rng):
    mdp = random_mdp(5, 2, 0.9, rng)
    opt = random_options(mdp, 1, rng, (0.1, 0.5))[0]
    model = exact_option_model(mdp, opt)
    for h in (3, 10, 40):
        traj = enumerate_trajectories(mdp, opt, 0, h)
        assert traj.mass.sum() + traj.residual == pytest.approx(1.0, abs=1e-12)
        gap = np.abs(traj.discounted_distribution() - model.dense()[0, 0]).sum()
        assert gap <= 1e-6 + traj.residual * 0.9 ** h


def test_enumeration_guards(rng):
    mdp = random_mdp(3, 1, 0.9, rng)
    opt = primitive_options(mdp)[0]
    with pytest.raises(ValueError):
        enumerate_trajectories(mdp, opt, 0, 65)
    with pytest.raises(ValueError):
        enumerate_trajectories(mdp, opt, 0, 0)


# --- empirical models --------------------------------------------------------------

def test_two_sample_estimate():
    m = empirical_from_samples(2, 1, 0.9, [0, 0], [0, 0], [1, 1], [1, 1], [0.0, 0.0])
    assert m.dense()[0, 0, 1] == pytest.approx(0.9)


def test_empty_dataset_leaves_everything_undefined():
    m = empirical_option_model(Dataset(3, 2), 0.9)
    assert not m.defined.any()


def test_truncated_samples_add_no_mass():
    m = empirical_from_samples(2, 1, 0.5, [0, 0], [0, 0], [1, 1], [1, 3], [1.0, 3.0], truncated=[False, True])
    assert m.dense()[0, 0, 1] == pytest.approx(0.25)
    assert m.R[0, 0] == pytest.approx(2.0)


def test_empirical_converges_on_taxi(taxi_mdp, taxi_options, taxi_model, rng):
    starts = np.flatnonzero(~taxi_mdp.terminal_mask)
    n = 10_000
    for o in (0, 27, 52, 70):
        picks = rng.choice(starts, size=3, replace=False)
        for s in picks:
            end, dur, disc, _, trunc = sample_option_outcomes(taxi_mdp, taxi_options[o], np.full(n, s), rng)
            m = empirical_from_samples(500, 75, taxi_mdp.gamma, np.full(n, s), np.full(n, o), end, dur, disc, trunc)
            assert np.abs(m.dense()[s, o] - taxi_model.dense()[s, o]).max() <= 1e-2


def test_empirical_stochastic_estimate_is_close(rng):
    mdp = random_mdp(4, 2, 0.8, rng)
    opt = random_options(mdp, 1, rng, (0.3, 1.0))[0]
    exact = exact_option_model(mdp, opt).dense()[1, 0]
    n = 40_000
    end, dur, disc, _, trunc = sample_option_outcomes(mdp, opt, np.full(n, 1), rng, t_max=200)
    est = empirical_from_samples(4, 1, 0.8, np.full(n, 1), np.zeros(n, int), end, dur, disc, trunc)
    assert np.abs(est.dense()[1, 0] - exact).max() < 0.02


# --- learned models ----------------------------------------------------------------

def tr(s, o, e, t=1, r=0.0, truncated=False):
    return OptionTransition(s, o, t, e, r, r, truncated)


def test_masked_loss_examples():
    model = LearnedModel(2, 1, 0.9)
    t = tr(0, 0, 1, t=3, r=1.0)
    assert masked_loss(model, [t], [0.0]) == 0.0
    model.L_hat[0] = 4.0
    model.r_hat[0] = 3.0
    assert masked_loss(model, [t], [1.0]) == pytest.approx(-math.log(0.5) + 1 + 4, abs=1e-4)
    assert masked_loss(model, [t], [1.0]) == pytest.approx(5.6931, abs=1e-4)

    single = LearnedModel(1, 1, 0.9)
    single.L_hat[0], single.r_hat[0] = 3.0, 1.0
    assert masked_loss(single, [tr(0, 0, 0, t=3, r=1.0)], [1.0]) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("full", [True, False])
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_gradient_matches_finite_differences(seed, full):
    rng = np.random.default_rng(seed)
    model = random_learned(rng, full=full)
    batch = random_batch(model, rng)
    mask = rng.choice([0.0, 1.0], size=len(batch), p=[0.3, 0.7])
    analytic = flat_gradient(model, model.gradient(batch, mask))
    numeric = numeric_gradient(model, batch, mask)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.integers(0, 2), st.booleans()),
                min_size=1, max_size=12),
       st.integers(1, 4))
def test_sparse_logits_match_dense_softmax_regression(rows, steps):
    """Every update equals plain gradient descent on a full logit vector per pair."""
    S, O, lr = 3, 2, 0.3
    model = LearnedModel(S, O, 0.9, lr=lr)
    dense = np.zeros((S * O, S))
    batch = [tr(s, o, e) for s, o, e, _ in rows]
    mask = [float(m) for *_, m in rows]
    for _ in range(steps):
        grad = np.zeros_like(dense)
        for t, a in zip(batch, mask):
            if a:
                pair = t.start * O + t.option
                g = _softmax(dense[pair])
                g[t.end] -= 1.0
                grad[pair] += a * g
        dense -= lr * grad
        model.apply(model.gradient(batch, mask))
    for pair in range(S * O):
        s, o = divmod(pair, O)
        np.testing.assert_allclose(model.next_state_distribution(s, o), _softmax(dense[pair]), atol=1e-12)


def test_zero_mask_has_zero_gradient_and_no_effect(rng):
    model = random_learned(rng)
    batch = [tr(1, 0, 2, t=3, r=1.0), tr(0, 1, 1)]
    assert all(not g for g in model.gradient(batch, [0.0, 0.0]))
    ds = Dataset(4, 2)
    ds.extend(batch * 10)
    before = model.parameters().copy()
    train_partial_model(model, ds, np.zeros((4, 2)), 50, rng)
    np.testing.assert_array_equal(model.parameters(), before)
    assert not model.defined.any()


def test_training_fits_a_deterministic_option(rng):
    ds = Dataset(3, 1)
    ds.extend([tr(0, 0, 2, t=2, r=1.5)] * 8)
    model = LearnedModel(3, 1, 0.5, lr=0.05)
    train_partial_model(model, ds, None, 300, rng, batch_size=4)
    assert model.prob(0, 0, 2) > 0.95
    assert model.L_hat[0] == pytest.approx(2.0, abs=1e-3)
    assert model.r_hat[0] == pytest.approx(1.5, abs=1e-3)
    snap = model.snapshot()
    V = np.array([0.0, 0.0, 1.0])
    expected = (model.next_state_distribution(0, 0) @ V) * 0.5 ** 2.0
    assert snap.expected_next(V)[0, 0] == pytest.approx(expected, rel=1e-6)
    assert snap.argmax_end()[0, 0] == 2


def test_divergence_is_detected(rng):
    ds = Dataset(2, 1)
    ds.extend([tr(0, 0, 1, t=100, r=-500.0)] * 64)
    model = LearnedModel(2, 1, 0.9, lr=1.0)
    with pytest.raises(DivergenceError):
        train_partial_model(model, ds, None, 100, rng)


def test_learned_checkpoint_round_trip(tmp_path, rng):
    ds = Dataset(4, 2)
    ds.extend([tr(1, 0, 2, t=3, r=1.0), tr(0, 1, 3, t=1, r=-1.0)] * 5)
    model = train_partial_model(LearnedModel(4, 2, 0.9, lr=0.01), ds, None, 20, rng)
    model.save(tmp_path / "lm.txt")
    back = LearnedModel.load(tmp_path / "lm.txt")
    np.testing.assert_array_equal(back.parameters(), model.parameters())
    np.testing.assert_array_equal(back.defined, model.defined)
    assert back.steps == model.steps
