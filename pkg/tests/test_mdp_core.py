import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import policy_value_dense
from partial_options import taxi
from partial_options.mdp_core import (ConvergenceError, TabularMDP, dumps_mdp, greedy_policy, loads_mdp,
                                      policy_value, random_mdp, read_mdp, save_mdp, value_iteration)


def self_loop(reward, gamma):
    return TabularMDP(np.ones((1, 1, 1)), np.array([[reward]]), gamma)


def test_zero_reward_single_state_converges_immediately():
    res = value_iteration(self_loop(0.0, 0.9))
    assert res.values.tolist() == [0.0]
    assert res.iterations == 1


def test_geometric_series():
    res = value_iteration(self_loop(1.0, 0.5))
    assert res.values[0] == pytest.approx(2.0, abs=1e-10)


def test_policy_value_self_loop():
    assert policy_value(self_loop(1.0, 0.9), np.array([0]))[0] == pytest.approx(10.0, abs=1e-9)


def test_policy_value_matches_dense_solve(rng):
    for _ in range(10):
        mdp = random_mdp(6, 3, 0.9, rng)
        pi = rng.integers(3, size=6)
        np.testing.assert_allclose(policy_value(mdp, pi, tol=1e-12),
                                   policy_value_dense(mdp.transition, mdp.reward, 0.9, pi), atol=1e-10)


def test_greedy_policy_of_value_iteration_is_optimal(rng):
    tol = 1e-10
    for _ in range(10):
        mdp = random_mdp(6, 3, 0.8, rng)
        res = value_iteration(mdp, tol=tol)
        v = policy_value(mdp, greedy_policy(res.q_values), tol=tol)
        assert np.max(np.abs(v - res.values)) <= 2 * tol


def test_greedy_tie_break_and_argmax():
    assert greedy_policy(np.array([[1.0, 1.0, 1.0]]))[0] == 0
    assert greedy_policy(np.array([[1.0, 3.0, 2.0]]))[0] == 1


@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=6),
       st.floats(0.01, 100))
def test_greedy_invariant_to_positive_scaling(rows, c):
    q = np.array(rows)
    assert np.array_equal(greedy_policy(q), greedy_policy(q * c))


def test_taxi_greedy_policy_succeeds_from_every_state(taxi_mdp):
    res = value_iteration(taxi_mdp, tol=1e-10)
    pi = greedy_policy(res.q_values)
    nxt = taxi_mdp.next_state_table
    for s0 in np.flatnonzero(~taxi_mdp.terminal_mask):
        s = s0
        for _ in range(200):
            s = nxt[s, pi[s]]
            if taxi_mdp.terminal_mask[s]:
                break
        assert taxi_mdp.terminal_mask[s], f"greedy policy fails from state {s0}"


def test_rejects_malformed_mdps():
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError):
        TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0)
    with pytest.raises(ValueError):
        TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9, frozenset({0}))


def test_convergence_error():
    with pytest.raises(ConvergenceError):
        value_iteration(self_loop(1.0, 0.99), tol=1e-12, max_iter=5)


def test_text_round_trip(tmp_path, rng):
    mdp = random_mdp(4, 2, 0.7, rng)
    back = loads_mdp(dumps_mdp(mdp))
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.gamma == mdp.gamma
    t = taxi.build_taxi_mdp()
    save_mdp(t, tmp_path / "taxi.txt")
    assert read_mdp(tmp_path / "taxi.txt").terminal_states == t.terminal_states


def test_sample_next_follows_transition(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    draws = mdp.sample_next_many(np.zeros(20000, int), np.ones(20000, int), rng)
    freq = np.bincount(draws, minlength=3) / 20000
    np.testing.assert_allclose(freq, mdp.transition[0, 1], atol=0.02)
