import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundsim.mdp import (MarginalTransitionDistribution, TabularMDP, TabularPolicy, expected_return_from_marginal,
                           greedy_action_sets, js_divergence, marginal_transition_distribution, optimal_policy,
                           policy_evaluation, policy_return, random_mdp, random_policy, recover_transition,
                           sample_marginal, tv_distance, value_iteration)


def series_marginal(mdp, pi, tol=1e-15):
    """Truncated (1 - g) sum_t g^t p_t(s) pi(a|s) T(s'|s,a), by forward iteration."""
    p = mdp.initial_dist.copy()
    rho = np.zeros_like(mdp.transition)
    w = 1.0 - mdp.discount
    while w > tol:
        rho += w * p[:, None, None] * pi.probs[:, :, None] * mdp.transition
        p = np.einsum("s,sa,sap->p", p, pi.probs, mdp.transition)
        w *= mdp.discount
    return rho


def iterate_values(mdp, pi, n_iter=10_000):
    V = np.zeros(mdp.n_states)
    for _ in range(n_iter):
        V = np.einsum("sa,sap,sap->s", pi.probs, mdp.transition, mdp.reward + mdp.discount * V[None, None, :])
    return V


instances = st.tuples(st.integers(1, 6), st.integers(1, 4), st.floats(0.0, 0.95), st.integers(0, 2 ** 32 - 1))


# ---------------------------------------------------------------- construction

def test_rejects_non_stochastic_rows():
    with pytest.raises(ValueError):
        TabularMDP([[[0.5, 0.4]], [[1.0, 0.0]]], np.zeros((2, 1, 2)), 0.9, [1.0, 0.0])


def test_rejects_bad_discount_and_shapes():
    T = np.ones((1, 1, 1))
    with pytest.raises(ValueError):
        TabularMDP(T, np.zeros((1, 1, 1)), 1.0, [1.0])
    with pytest.raises(ValueError):
        TabularMDP(T, np.zeros((1, 2, 1)), 0.5, [1.0])
    with pytest.raises(ValueError):
        TabularMDP(T, np.zeros((1, 1, 1)), 0.5, [0.5, 0.5])


def test_policy_shape_mismatch():
    mdp = random_mdp(3, 2, 0.9, np.random.default_rng(0))
    with pytest.raises(ValueError):
        marginal_transition_distribution(mdp, TabularPolicy.uniform(3, 3))


def test_json_round_trip():
    mdp = random_mdp(3, 2, 0.9, np.random.default_rng(1))
    back = TabularMDP.from_json(mdp.to_json())
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.discount == mdp.discount


# ---------------------------------------------------------------- marginals

def test_single_state_marginal():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), 0.7, [1.0])
    rho = marginal_transition_distribution(mdp, TabularPolicy.uniform(1, 1)).rho
    assert rho.tolist() == [[[1.0]]]


def test_two_state_chain_marginal():
    T = np.zeros((2, 1, 2))
    T[:, 0, 1] = 1.0
    mdp = TabularMDP(T, np.zeros_like(T), 0.5, [1.0, 0.0])
    rho = marginal_transition_distribution(mdp, TabularPolicy.uniform(2, 1)).rho
    assert rho[0, 0, 1] == pytest.approx(0.5, abs=1e-15)
    assert rho[1, 0, 1] == pytest.approx(0.5, abs=1e-15)
    assert rho.sum() == pytest.approx(1.0, abs=1e-15)


def test_marginal_matches_power_series():
    rng = np.random.default_rng(2)
    for _ in range(20):
        mdp = random_mdp(5, 3, 0.9, rng)
        pi = random_policy(5, 3, rng)
        assert np.max(np.abs(marginal_transition_distribution(mdp, pi).rho - series_marginal(mdp, pi))) < 1e-12


def test_marginal_matches_monte_carlo():
    rng = np.random.default_rng(3)
    mdp = random_mdp(4, 2, 0.9, rng)
    pi = random_policy(4, 2, rng)
    est = sample_marginal(mdp, pi, 100_000, rng)
    assert tv_distance(est, marginal_transition_distribution(mdp, pi).rho) < 0.01


def test_monte_carlo_error_shrinks_with_samples():
    rng = np.random.default_rng(4)
    mdp = random_mdp(4, 2, 0.9, rng)
    pi = random_policy(4, 2, rng)
    exact = marginal_transition_distribution(mdp, pi).rho
    small = np.mean([tv_distance(sample_marginal(mdp, pi, 1_000, rng), exact) for _ in range(5)])
    large = tv_distance(sample_marginal(mdp, pi, 100_000, rng), exact)
    assert large < small / 3


@settings(max_examples=60, deadline=None)
@given(instances)
def test_marginal_normalised_and_nonnegative(inst):
    S, A, gamma, seed = inst
    rng = np.random.default_rng(seed)
    rho = marginal_transition_distribution(random_mdp(S, A, gamma, rng), random_policy(S, A, rng))
    assert abs(rho.total - 1.0) <= 1e-9
    assert np.all(rho.rho >= 0.0)


def test_marginal_type_rejects_negative_mass():
    with pytest.raises(ValueError):
        MarginalTransitionDistribution(-np.ones((1, 1, 1)), 0.9)


# ---------------------------------------------------------------- returns and values

def test_constant_reward_return():
    rng = np.random.default_rng(5)
    mdp = random_mdp(3, 2, 0.9, rng)
    rho = marginal_transition_distribution(mdp, random_policy(3, 2, rng))
    assert expected_return_from_marginal(rho, np.ones((3, 2, 3)), 0.9) == pytest.approx(10.0, abs=1e-12)
    assert expected_return_from_marginal(rho, np.zeros((3, 2, 3)), 0.9) == 0.0


def test_return_shape_mismatch():
    rho = marginal_transition_distribution(random_mdp(2, 2, 0.5, np.random.default_rng(0)), TabularPolicy.uniform(2, 2))
    with pytest.raises(ValueError):
        expected_return_from_marginal(rho, np.zeros((2, 2, 3)), 0.5)


@settings(max_examples=60, deadline=None)
@given(instances)
def test_return_from_marginal_equals_policy_evaluation(inst):
    S, A, gamma, seed = inst
    rng = np.random.default_rng(seed)
    mdp = random_mdp(S, A, gamma, rng)
    pi = random_policy(S, A, rng)
    rho = marginal_transition_distribution(mdp, pi)
    assert abs(expected_return_from_marginal(rho, mdp.reward, gamma) - policy_return(mdp, pi)) <= 1e-9


def test_policy_evaluation_closed_forms():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.full((1, 1, 1), 2.5), 0.8, [1.0])
    assert policy_evaluation(mdp, TabularPolicy.uniform(1, 1))[0] == pytest.approx(2.5 / 0.2, abs=1e-12)
    zero = random_mdp(3, 2, 0.9, np.random.default_rng(0))
    zero = TabularMDP(zero.transition, np.zeros((3, 2, 3)), 0.9, zero.initial_dist)
    assert np.all(policy_evaluation(zero, TabularPolicy.uniform(3, 2)) == 0.0)


def test_policy_evaluation_matches_iteration():
    rng = np.random.default_rng(6)
    for _ in range(5):
        mdp = random_mdp(4, 3, 0.9, rng)
        pi = random_policy(4, 3, rng)
        V = policy_evaluation(mdp, pi)
        assert np.max(np.abs(V - iterate_values(mdp, pi))) < 1e-8
        residual = V - np.einsum("sa,sap,sap->s", pi.probs, mdp.transition, mdp.reward + 0.9 * V[None, None, :])
        assert np.max(np.abs(residual)) < 1e-10


# ---------------------------------------------------------------- control

def test_dominant_action_chosen():
    rng = np.random.default_rng(7)
    mdp = random_mdp(4, 3, 0.9, rng)
    R = np.zeros((4, 3, 4))
    R[:, 1, :] = 1.0
    mdp = TabularMDP(mdp.transition, R, 0.9, mdp.initial_dist)
    assert np.all(np.argmax(optimal_policy(mdp).probs, axis=1) == 1)


def test_identical_mdps_identical_greedy_sets():
    rng = np.random.default_rng(8)
    mdp = random_mdp(5, 3, 0.9, rng)
    twin = TabularMDP.from_dict(mdp.to_dict())
    assert greedy_action_sets(mdp) == greedy_action_sets(twin)


def test_optimal_policy_beats_random_policies():
    rng = np.random.default_rng(9)
    mdp = random_mdp(5, 3, 0.9, rng)
    V_star = policy_evaluation(mdp, optimal_policy(mdp))
    for _ in range(100):
        assert np.all(V_star >= policy_evaluation(mdp, random_policy(5, 3, rng)) - 1e-10)


def test_value_iteration_fixed_point():
    mdp = random_mdp(4, 2, 0.95, np.random.default_rng(10))
    Q, V = value_iteration(mdp)
    assert np.allclose(Q.max(axis=1), V, atol=1e-9)


# ---------------------------------------------------------------- recovery

def test_recover_single_state():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), 0.5, [1.0])
    rec = recover_transition(marginal_transition_distribution(mdp, TabularPolicy.uniform(1, 1)),
                             TabularPolicy.uniform(1, 1))
    assert rec.transition.tolist() == [[[1.0]]]


def test_recover_marks_unvisited_pairs():
    T = np.zeros((2, 2, 2))
    T[:, :, 0] = 1.0  # state 1 is never reached from state 0
    mdp = TabularMDP(T, np.zeros_like(T), 0.9, [1.0, 0.0])
    rec = recover_transition(marginal_transition_distribution(mdp, TabularPolicy.uniform(2, 2)),
                             TabularPolicy.uniform(2, 2))
    assert rec.visited[0].all() and not rec.visited[1].any()
    assert np.allclose(rec.transition.sum(axis=2), 1.0)


def test_recover_requires_full_support_on_visited_states():
    mdp = random_mdp(2, 2, 0.9, np.random.default_rng(0))
    pi = TabularPolicy.deterministic([0, 0], 2)
    with pytest.raises(ValueError):
        recover_transition(marginal_transition_distribution(mdp, pi), pi)


@settings(max_examples=60, deadline=None)
@given(instances)
def test_round_trip_recovers_transition(inst):
    S, A, gamma, seed = inst
    rng = np.random.default_rng(seed)
    mdp = random_mdp(S, A, gamma, rng)
    pi = random_policy(S, A, rng, floor=0.05)
    rec = recover_transition(marginal_transition_distribution(mdp, pi), pi)
    assert np.max(np.abs(rec.transition - mdp.transition)[rec.visited], initial=0.0) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(instances)
def test_equal_transitions_give_equal_greedy_sets(inst):
    S, A, gamma, seed = inst
    rng = np.random.default_rng(seed)
    mdp = random_mdp(S, A, gamma, rng)
    other = TabularMDP(np.array(mdp.transition), mdp.reward, gamma, rng.dirichlet(np.ones(S)))
    assert greedy_action_sets(mdp) == greedy_action_sets(other)


# ---------------------------------------------------------------- divergences

def test_js_bounds_and_symmetry():
    rng = np.random.default_rng(11)
    p, q = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
    assert js_divergence(p, p) == 0.0
    assert js_divergence(p, q) == pytest.approx(js_divergence(q, p), abs=1e-15)
    assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(np.log(2.0), abs=1e-15)
    assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
