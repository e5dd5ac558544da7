"""Module invariants, each checked under four independent seeds."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import flat_gradient, numeric_gradient, random_batch, random_learned
from partial_options.affordances import (AffordanceClassifier, Intent, classifier_affordance_set,
                                         derive_affordances, taxi_heuristic_affordances)
from partial_options.bounds import random_smdp
from partial_options.mdp_core import greedy_policy, random_mdp
from partial_options.option_models import (empirical_from_samples, exact_option_model,
                                           sample_option_outcomes, train_partial_model)
from partial_options.options import Dataset, primitive_options
from partial_options.planner import OptionQFunction, policy_over_options, smdp_qvi

SEEDS = (0, 1, 2, 3)
seeded = pytest.mark.parametrize("seed", SEEDS)


def instances(seed, n=8, **kw):
    rng = np.random.default_rng(seed)
    return rng, [random_smdp(rng, **kw) for _ in range(n)]


# --- sub-probability mass ---------------------------------------------------------------

@seeded
def test_exact_models_are_sub_stochastic(seed):
    _, insts = instances(seed, beta_range=(0.05, 1.0))
    for inst in insts:
        mass = inst.model.mass()
        assert np.all(mass > 0) and np.all(mass <= inst.mdp.gamma + 1e-12)
        assert np.all(inst.model.dense() >= 0)


@seeded
def test_empirical_models_are_sub_stochastic(seed):
    rng, insts = instances(seed, n=3)
    for inst in insts:
        starts = rng.integers(6, size=500)
        for o, opt in enumerate(inst.options):
            end, dur, disc, _, trunc = sample_option_outcomes(inst.mdp, opt, starts, rng, t_max=5)
            m = empirical_from_samples(6, 3, inst.mdp.gamma, starts, np.full(500, o), end, dur, disc, trunc)
            assert np.all(m.mass() <= inst.mdp.gamma + 1e-12)


@seeded
def test_learned_models_are_sub_stochastic(seed):
    rng = np.random.default_rng(seed)
    model = random_learned(rng, S=5, O=3, full=False)
    for s in range(5):
        for o in range(3):
            p = model.next_state_distribution(s, o)
            assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
    snap = model.snapshot()
    ones = np.ones(5)
    assert np.all(snap.expected_next(ones) <= 1.0 + 1e-12)


# --- planner ---------------------------------------------------------------------------

@seeded
def test_contraction_factor(seed):
    rng, insts = instances(seed)
    for inst in insts:
        mask = rng.random((6, 3)) < 0.7
        mask[np.arange(6), rng.integers(3, size=6)] = True
        q = smdp_qvi(inst.model, mask, tol=1e-5)
        assert q.contraction <= inst.model.mass().max() + 1e-9


@seeded
def test_backups_are_monotone_for_non_negative_rewards(seed):
    _, insts = instances(seed, n=4)
    for inst in insts:
        mask = np.ones((6, 3), bool)
        prev = np.zeros(6)
        for k in range(1, 25):
            v = smdp_qvi(inst.model, mask, epochs=k, tol=0.0).state_values
            assert np.all(v >= prev - 1e-12)
            prev = v


@seeded
def test_restricting_affordances_never_helps(seed):
    rng, insts = instances(seed)
    for inst in insts:
        big = rng.random((6, 3)) < 0.8
        big[:, 0] = True
        small = big & (rng.random((6, 3)) < 0.6)
        small[:, 0] = True
        v_big = smdp_qvi(inst.model, big, tol=1e-12).state_values
        v_small = smdp_qvi(inst.model, small, tol=1e-12).state_values
        assert np.all(v_small <= v_big + 1e-9)


@seeded
def test_pruning_to_optimal_pairs_is_sound(seed):
    rng, insts = instances(seed, n=4)
    for inst in insts:
        full = smdp_qvi(inst.model, np.ones((6, 3), bool), tol=1e-13, epochs=1_000_000)
        optimal = np.isclose(full.values, full.state_values[:, None], atol=1e-9)
        for _ in range(5):
            superset = optimal | (rng.random((6, 3)) < 0.5)
            q = smdp_qvi(inst.model, superset, tol=1e-13, epochs=1_000_000)
            np.testing.assert_allclose(q.state_values, full.state_values, atol=1e-9)


@seeded
@given(st.data())
def test_argmax_ties_go_to_the_lowest_index(seed, data):
    rng = np.random.default_rng(seed + data.draw(st.integers(0, 10 ** 6)))
    q = rng.integers(0, 3, size=(5, 4)).astype(float)
    expected = [int(np.flatnonzero(row == row.max())[0]) for row in q]
    assert greedy_policy(q).tolist() == expected
    mask = np.ones_like(q, bool)
    qf = OptionQFunction(q, mask, q.max(axis=1), 1, 0.0, 0.0)
    assert policy_over_options(qf).tolist() == expected


@seeded
def test_primitive_wrapping_folds_gamma_into_transitions(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(5, 3, 0.8, rng)
    dense = exact_option_model(mdp, primitive_options(mdp)).dense()
    np.testing.assert_allclose(dense, 0.8 * mdp.transition, atol=1e-12)


# --- learned-model gradients -----------------------------------------------------------

@seeded
def test_masked_out_transitions_contribute_nothing(seed):
    rng = np.random.default_rng(seed)
    model = random_learned(rng, S=5, O=3, full=False)
    batch = random_batch(model, rng, 20)
    mask = rng.random(20) < 0.5
    full = model.gradient(batch, mask.astype(float))
    kept = model.gradient([t for t, m in zip(batch, mask) if m], np.ones(mask.sum()))
    for a, b in zip(full, kept):
        assert a.keys() == b.keys()
        for key in a:
            if isinstance(a[key], dict):
                assert a[key].keys() == b[key].keys()
                np.testing.assert_allclose(list(a[key].values()), list(b[key].values()), atol=1e-12)
            else:
                assert a[key] == pytest.approx(b[key], abs=1e-12)
    assert all(not g for g in model.gradient(batch, np.zeros(20)))


@seeded
def test_zero_mask_training_is_a_no_op(seed):
    rng = np.random.default_rng(seed)
    model = random_learned(rng, S=5, O=3, full=False)
    ds = Dataset(5, 3)
    ds.extend(random_batch(model, rng, 40))
    before = model.parameters().copy()
    train_partial_model(model, ds, np.zeros((5, 3)), 30, rng)
    np.testing.assert_array_equal(model.parameters(), before)


@seeded
@pytest.mark.parametrize("full", [True, False])
def test_learned_model_gradient(seed, full):
    rng = np.random.default_rng(100 + seed)
    model = random_learned(rng, S=5, O=2, full=full)
    batch = random_batch(model, rng, 15)
    mask = rng.random(15) * (rng.random(15) < 0.8)
    np.testing.assert_allclose(flat_gradient(model, model.gradient(batch, mask)),
                               numeric_gradient(model, batch, mask), rtol=1e-5, atol=1e-7)


@seeded
def test_classifier_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    clf = AffordanceClassifier(5, 3, 3)
    theta = rng.normal(size=clf.parameters().size)
    clf.set_parameters(theta)
    start, option, end = rng.integers(5, size=12), rng.integers(3, size=12), rng.integers(-1, 5, size=12)
    labels = (rng.random((12, 3)) < 0.5).astype(float)
    analytic = np.concatenate([g.ravel() for g in clf.gradient(start, option, end, labels)])
    numeric = np.zeros_like(theta)
    h = 1e-6
    for i in range(len(theta)):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        clf.set_parameters(up)
        f_up = clf.loss(start, option, end, labels)
        clf.set_parameters(down)
        numeric[i] = (f_up - clf.loss(start, option, end, labels)) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


# --- affordance nesting ----------------------------------------------------------------

@seeded
def test_zeta_threshold_nesting(seed):
    rng, insts = instances(seed, n=4)
    for inst in insts:
        intents = [Intent(option=o, distribution=rng.dirichlet(np.ones(6), size=6) * inst.mdp.gamma)
                   for o in range(3)]
        sets = [derive_affordances(intents, inst.model, t) for t in np.linspace(0, 2, 11)]
        for lo, hi in zip(sets, sets[1:]):
            assert lo.issubset(hi)
        assert sets[-1].size == 18


@seeded
def test_classifier_threshold_nesting(seed, taxi_model, taxi_mdp):
    rng = np.random.default_rng(seed)
    clf = AffordanceClassifier(500, 75, 8)
    clf.set_parameters(rng.normal(scale=3.0, size=clf.parameters().size))
    sizes = []
    prev = None
    for k in np.linspace(0, 0.9, 10):
        aff = classifier_affordance_set(clf, taxi_model, k)
        if prev is not None and not aff.repaired:
            assert aff.issubset(prev)
        sizes.append(aff.size)
        prev = aff
    assert sizes == sorted(sizes, reverse=True)


def test_heuristic_sets_nest():
    e, pd, pdg = (taxi_heuristic_affordances(k) for k in ("everything", "pickup_drop", "pickup_drop_at_goal"))
    assert pdg.issubset(pd) and pd.issubset(e)
