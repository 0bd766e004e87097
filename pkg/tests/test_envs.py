import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundsim.envs import (GridworldEnv, ModificationRecord, PendulumEnv, count_transitions, empirical_transition_counts,
                            evaluate_policy, gridworld_transition, load_pair_config, make_gridworld_pair,
                            make_pair_from_config, make_pendulum_pair, read_trajectories_csv, rollout,
                            stack_transitions, write_trajectories_csv)
from groundsim.mdp import TabularPolicy, marginal_transition_distribution, tv_distance


def pd_controller(s):
    return np.array([-(2.0 * s[0] + 0.3 * s[1])])


def zero_torque(s):
    return np.zeros(1)


# ---------------------------------------------------------------- gridworld

def test_equal_slip_gives_identical_views():
    pair = make_gridworld_pair(4, 0.2, 0.2)
    assert np.array_equal(pair.sim.tabular_view().transition, pair.real.tabular_view().transition)
    assert pair.modification is None


def test_slip_difference_is_hand_computable():
    pair = make_gridworld_pair(4, 0.0, 0.3)
    diff = np.abs(pair.sim.tabular_view().transition - pair.real.tabular_view().transition)
    assert diff.max() == pytest.approx(0.3 * 3 / 4, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.floats(0.0, 1.0))
def test_gridworld_rows_are_distributions(size, slip):
    T = gridworld_transition(size, slip)
    assert np.all(T >= 0.0)
    assert np.allclose(T.sum(axis=2), 1.0, atol=1e-12)


def test_invalid_slip_rejected():
    with pytest.raises(ValueError):
        gridworld_transition(3, 1.5)
    with pytest.raises(ValueError):
        ModificationRecord("slip", 0.1, 0.1)


def test_gridworld_rollout_frequencies_match_tensor():
    env = GridworldEnv(size=2, slip=0.3, terminate_at_goal=False, horizon=5)
    pi = TabularPolicy.uniform(4, 4)
    trajs = rollout(env, pi, 10_000, seed=0)
    counts = empirical_transition_counts(trajs, 4, 4)
    T = env.tabular_view().transition
    for s in range(4):
        for a in range(4):
            n = counts[s, a].sum()
            assert n > 100
            assert tv_distance(counts[s, a] / n, T[s, a]) < 0.02


def test_gridworld_horizon_and_termination():
    env = GridworldEnv(size=3, slip=0.0, terminate_at_goal=False, horizon=7)
    traj = rollout(env, TabularPolicy.uniform(9, 4), 1, seed=1)[0]
    assert len(traj) == 7
    assert traj.is_chain_consistent()


# ---------------------------------------------------------------- pendulum

def test_matched_pendulum_pair_identical_trajectories():
    pair = make_pendulum_pair(4.89, 4.89, seed=3)
    a = rollout(pair.sim, pd_controller, 3, seed=5)
    b = rollout(pair.real, pd_controller, 3, seed=5)
    for ta, tb in zip(a, b):
        assert np.array_equal(np.array(ta.states), np.array(tb.states))
        assert np.array_equal(np.array(ta.next_states), np.array(tb.next_states))


def test_upright_equilibrium_is_fixed_point():
    env = PendulumEnv()
    env.reset(seed=0)
    env.set_state(np.zeros(2))
    for _ in range(env.horizon):
        s, r, done, _ = env.step(np.zeros(1))
        assert s[0] == 0.0 and s[1] == 0.0 and r == 1.0
    assert done


def one_step_oracle(mass, theta, theta_dot, u, dt=0.02, g=9.81, l=1.0, inertia0=50.0, tau=254.0):
    acc = (mass * g * l * math.sin(theta) + u * tau) / (inertia0 + mass * l * l)
    theta_dot = theta_dot + dt * acc
    return np.array([theta + dt * theta_dot, theta_dot])


def test_mass_mismatch_changes_first_step():
    pair = make_pendulum_pair(4.89, 100.0)
    s0, u = np.array([0.05, 0.0]), np.array([0.3])
    nxt = []
    for env, mass in ((pair.sim, 4.89), (pair.real, 100.0)):
        env.reset(seed=0)
        env.set_state(s0)
        sp = env.step(u)[0]
        assert np.allclose(sp, one_step_oracle(mass, 0.05, 0.0, 0.3), atol=1e-15)
        nxt.append(sp)
    assert np.linalg.norm(nxt[0] - nxt[1]) > 0.0


def test_actions_are_clipped():
    env = PendulumEnv()
    env.reset(seed=0)
    env.set_state(np.array([0.01, 0.0]))
    big = env.step(np.array([7.0]))[0]
    env.set_state(np.array([0.01, 0.0]))
    one = env.step(np.array([1.0]))[0]
    assert np.array_equal(big, one)


def test_set_state_round_trip_and_determinism():
    env = PendulumEnv(seed=0)
    env.reset()
    s = np.array([0.1, -0.4])
    env.set_state(s)
    assert np.array_equal(env.get_state(), s)
    first = env.step(np.array([0.2]))[0]
    env.set_state(s)
    assert np.array_equal(env.step(np.array([0.2]))[0], first)


def test_set_state_out_of_bounds():
    env = PendulumEnv()
    with pytest.raises(ValueError):
        env.set_state(np.array([4.0, 0.0]))
    with pytest.raises(ValueError):
        env.set_state(np.array([0.0, np.nan]))
    grid = GridworldEnv(size=2)
    with pytest.raises(ValueError):
        grid.set_state(9)


def mean_energy_drift(dt, duration=0.5):
    env = PendulumEnv(dt=dt, threshold=100.0, max_speed=1e6, horizon=10 ** 6)
    env.reset(seed=0)
    env.set_state(np.array([0.3, 0.0]))
    drifts = []
    e = env.energy(env.get_state())
    for _ in range(int(round(duration / dt))):
        s = env.step(np.zeros(1))[0]
        e_new = env.energy(s)
        drifts.append(abs(e_new - e))
        e = e_new
    return float(np.mean(drifts))


def test_energy_drift_shrinks_quadratically_with_dt():
    coarse, fine = mean_energy_drift(0.02), mean_energy_drift(0.01)
    assert fine < coarse
    assert coarse / fine > 3.0


def test_pd_controller_balances_sim_pendulum():
    pair = make_pendulum_pair(seed=0)
    mean, _ = evaluate_policy(pair.sim, pd_controller, 5, seed=0)
    assert mean == pair.sim.horizon


def test_invalid_pendulum_parameters():
    with pytest.raises(ValueError):
        make_pendulum_pair(-1.0, 100.0)
    with pytest.raises(ValueError):
        PendulumEnv(dt=0.0)


# ---------------------------------------------------------------- rollouts

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rollouts_are_determined_by_seed(seed):
    env = make_pendulum_pair().sim
    pi = lambda s: np.array([-2.0 * s[0]])
    a = rollout(env, pi, 2, seed=seed)
    b = rollout(env, pi, 2, seed=seed)
    assert [t.total_reward for t in a] == [t.total_reward for t in b]
    for ta, tb in zip(a, b):
        assert np.array_equal(np.array(ta.states), np.array(tb.states))
        assert ta.is_chain_consistent()


def test_horizon_episode_length():
    env = PendulumEnv(horizon=37)
    assert len(rollout(env, pd_controller, 1, seed=0)[0]) == 37


def test_max_transitions_caps_total():
    env = PendulumEnv(horizon=50)
    trajs = rollout(env, pd_controller, 10, seed=0, max_transitions=120)
    assert count_transitions(trajs) == 120
    assert trajs[-1].dones[-1]


def test_shared_space_descriptors():
    for pair in (make_pendulum_pair(), make_gridworld_pair()):
        assert pair.sim.space_descriptor() == pair.real.space_descriptor()


def test_pair_from_config(tmp_path):
    path = tmp_path / "pair.toml"
    path.write_text('env = "gridworld"\nproperty = "slip"\ndefault = 0.0\nmodified = 0.3\nsize = 3\n')
    pair = make_pair_from_config(load_pair_config(str(path)), seed=0)
    assert pair.modification.modified_value == 0.3 and pair.sim.n_states == 9
    with pytest.raises(ValueError):
        make_pair_from_config({"env": "pendulum", "property": "length"})
    with pytest.raises(ValueError):
        make_pair_from_config({"env": "cartpole"})


def test_trajectory_csv_round_trip(tmp_path):
    env = make_pendulum_pair().real
    trajs = rollout(env, pd_controller, 2, seed=4)
    path = tmp_path / "real.csv"
    write_trajectories_csv(trajs, path)
    back = read_trajectories_csv(path)
    for x, y in zip(stack_transitions(trajs), stack_transitions(back)):
        assert np.array_equal(np.asarray(x, dtype=float).reshape(len(x), -1), np.asarray(y).reshape(len(y), -1))

    grid = GridworldEnv(size=2)
    gtrajs = rollout(grid, TabularPolicy.uniform(4, 4), 3, seed=0)
    write_trajectories_csv(gtrajs, tmp_path / "grid.csv")
    gback = read_trajectories_csv(tmp_path / "grid.csv", discrete=True)
    assert [t.states for t in gback] == [t.states for t in gtrajs]


def test_gridworld_view_matches_marginal_samples():
    env = GridworldEnv(size=2, slip=0.2)
    rho = marginal_transition_distribution(env.tabular_view(), TabularPolicy.uniform(4, 4))
    assert rho.total == pytest.approx(1.0, abs=1e-12)
