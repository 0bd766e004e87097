import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundsim.envs import GridworldEnv, TabularEnv, gridworld_mdp, make_gridworld_pair, make_pendulum_pair, rollout
from groundsim.garat import (EPS, Discriminator, GaratConfig, GaratTransfer, TransitionFeatures, data_loss_from_probs,
                             discriminator_loss, exact_divergence_minimizer, ground, optimal_discriminator,
                             transformer_reward, write_diagnostics_csv)
from groundsim.grounding import (GroundedEnvironment, ResidualGaussianTransformer, TabularActionTransformer,
                                 grounded_marginal, grounded_transition)
from groundsim.harness import pendulum_garat_config, per_step_transition_error, tabular_garat_config, tabular_suite
from groundsim.mdp import (TabularPolicy, js_divergence, marginal_transition_distribution, random_mdp,
                           random_policy)
from groundsim.nn import CategoricalPolicy

LN2 = math.log(2.0)


# ---------------------------------------------------------------- losses and rewards

def test_constant_half_classifier_data_loss():
    d = np.full(5, 0.5)
    assert data_loss_from_probs(d, d) == pytest.approx(2.0 * LN2, abs=1e-15)


def test_perfect_discrimination_limit():
    loss = data_loss_from_probs(np.ones(4), np.zeros(4))
    assert loss == pytest.approx(-2.0 * math.log(1.0 - EPS), rel=1e-6)
    assert loss < 1e-6


def test_reward_examples():
    assert transformer_reward(0.5) == pytest.approx(LN2, abs=1e-15)
    assert transformer_reward(1.0 - EPS) == pytest.approx(1e-7, rel=1e-6)
    assert transformer_reward(1.0) == pytest.approx(1e-7, rel=1e-6)
    assert transformer_reward(EPS) == pytest.approx(16.118, abs=1e-3)
    assert transformer_reward(0.0) == pytest.approx(-math.log(EPS), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
def test_rewards_are_bounded(ds):
    r = transformer_reward(np.array(ds))
    assert np.all(np.isfinite(r))
    assert np.all(r >= -math.log(1.0 - EPS) - 1e-15) and np.all(r <= -math.log(EPS) + 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 32 - 1))
def test_closed_form_optimum_loss_equals_js_identity(n, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    d = optimal_discriminator(p, q)
    assert abs(data_loss_from_probs(d, d, p, q) - (2.0 * LN2 - 2.0 * js_divergence(p, q))) < 1e-9


def test_optimal_discriminator_undefined_off_support():
    d = optimal_discriminator([0.5, 0.5, 0.0], [0.0, 0.5, 0.5])
    assert d[0] == 1.0 and d[1] == 0.5 and d[2] == 0.0
    assert np.isnan(optimal_discriminator([0.0], [0.0]))[0]


def small_discriminator(**kw):
    D = Discriminator(hidden=(8,), seed=0, **kw)
    D.initialize(3)
    return D


def test_discriminator_outputs_strictly_inside_unit_interval():
    D = small_discriminator()
    D.net_.biases[-1][:] = 1e3
    assert np.all(D.predict_proba(np.zeros((2, 3))) == 1.0 - EPS)
    D.net_.biases[-1][:] = -1e3
    assert np.all(D.predict_proba(np.zeros((2, 3))) == EPS)


def test_discriminator_loss_includes_regularisers():
    X = np.random.default_rng(0).standard_normal((6, 3))
    plain = small_discriminator(gp_coef=0.0, l2_coef=0.0)
    total, data, _ = discriminator_loss(plain, X, X + 1.0)
    assert total == data
    reg = small_discriminator(gp_coef=0.0, l2_coef=0.1)
    total, data, _ = discriminator_loss(reg, X, X + 1.0)
    assert total == pytest.approx(data + 0.1 * sum(float(np.sum(W * W)) for W in reg.net_.weights), abs=1e-12)


def test_discriminator_rejects_empty_or_non_finite_batches():
    D = small_discriminator()
    with pytest.raises(ValueError):
        discriminator_loss(D, np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        D.partial_fit(np.ones((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        discriminator_loss(D, np.full((2, 3), np.nan), np.zeros((2, 3)))


def test_discriminator_separates_disjoint_sources():
    rng = np.random.default_rng(1)
    Xg = rng.normal(-2.0, 0.3, (200, 2))
    Xr = rng.normal(2.0, 0.3, (200, 2))
    D = Discriminator(hidden=(16,), learning_rate=1e-2, gp_coef=0.0, seed=0).fit(Xg, Xr, n_updates=300)
    assert np.mean(D.predict_proba(Xg)) > 0.9 and np.mean(D.predict_proba(Xr)) < 0.1
    assert np.all(D.reward(Xr) > D.reward(Xg).max())


def test_tabular_features_are_one_hot():
    feats = TransitionFeatures(GridworldEnv(size=2))
    X = feats([0, 3], [1, 2], [1, 3])
    assert X.shape == (2, 4 + 4 + 4)
    assert np.array_equal(X.sum(axis=1), [3.0, 3.0])
    assert X[0, 0] == 1 and X[0, 4 + 1] == 1 and X[0, 8 + 1] == 1


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        GaratConfig(n_transformer_updates=0)
    with pytest.raises(ValueError):
        GaratConfig(gp_coef=-1.0)
    with pytest.raises(ValueError):
        GaratConfig.from_dict({"n_updates": 5})
    cfg = GaratConfig.from_dict({"transformer": {"gamma": 0.5}, "disc_hidden": [32, 32]})
    assert cfg.transformer.gamma == 0.5 and cfg.disc_hidden == (32, 32)
    assert GaratConfig().gp_coef == 10.0 and GaratConfig().discriminator_updates_per_policy_update == 1


# ---------------------------------------------------------------- exact oracle

def test_exact_minimizer_matched_pair():
    rng = np.random.default_rng(2)
    sim = random_mdp(3, 2, 0.9, rng)
    pi = random_policy(3, 2, rng, floor=0.1)
    tr, js = exact_divergence_minimizer(sim, pi, marginal_transition_distribution(sim, pi).rho)
    assert js < 1e-6
    assert np.max(np.abs(tr.probs - np.eye(2)[None])) < 1e-3


def test_exact_minimizer_realizable_gridworld():
    sim, real = gridworld_mdp(2, 0.0, 0.9), gridworld_mdp(2, 0.3, 0.9)
    pi = random_policy(4, 4, np.random.default_rng(3), floor=0.1)
    tr, js = exact_divergence_minimizer(sim, pi, marginal_transition_distribution(real, pi).rho)
    assert js < 1e-6
    assert np.max(np.abs(grounded_transition(sim.transition, tr) - real.transition)) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_exact_minimizer_beats_random_search(seed):
    rng = np.random.default_rng(10 + seed)
    sim, real = random_mdp(2, 2, 0.9, rng), random_mdp(2, 2, 0.9, rng)
    pi = random_policy(2, 2, rng, floor=0.1)
    rho_real = marginal_transition_distribution(real, pi).rho
    _, js = exact_divergence_minimizer(sim, pi, rho_real, seed=seed)
    draws = rng.dirichlet(np.ones(2), size=(10_000, 2, 2))
    best_random = min(js_divergence(grounded_marginal(sim, pi, TabularActionTransformer(W)).rho, rho_real)
                      for W in draws)
    assert js <= best_random + 1e-12


def test_exact_minimizer_size_limit():
    sim = random_mdp(13, 5, 0.9, np.random.default_rng(0))
    pi = TabularPolicy.uniform(13, 5)
    with pytest.raises(ValueError):
        exact_divergence_minimizer(sim, pi, marginal_transition_distribution(sim, pi).rho)


# ---------------------------------------------------------------- ground

def tabular_run(instance, seed=0, n_updates=None, episodes=2000):
    cfg = tabular_garat_config(instance.sim.discount)
    if n_updates is not None:
        cfg.n_transformer_updates = n_updates
    trajs = rollout(TabularEnv(instance.real, horizon=80), instance.agent_policy, episodes, seed=[seed, 1])
    return ground(TabularEnv(instance.sim, horizon=80), trajs, instance.agent_policy, cfg, seed=seed,
                  real_mdp=instance.real)


@pytest.mark.slow
def test_two_by_two_ground_matches_exact_minimum():
    inst = tabular_suite()[0]
    rho_real = marginal_transition_distribution(inst.real, inst.agent_policy).rho
    _, js_exact = exact_divergence_minimizer(inst.sim, inst.agent_policy, rho_real)
    tr, diag = tabular_run(inst)
    js = js_divergence(grounded_marginal(inst.sim, inst.agent_policy, tr.table()).rho, rho_real)
    assert js - js_exact <= max(0.01, 0.2 * js_exact)
    assert diag[-1]["js_divergence"] == pytest.approx(js, abs=1e-12)


@pytest.mark.slow
def test_js_moving_median_is_non_increasing():
    inst = tabular_suite()[2]
    _, diag = tabular_run(inst)
    js = np.array([r["js_divergence"] for r in diag])
    med = np.array([np.median(js[i:i + 10]) for i in range(len(js) - 9)])
    assert np.all(np.diff(med) <= 1e-3), med
    assert med[-1] < med[0]


def test_matched_pendulum_pulls_transformer_back_to_identity():
    pair = make_pendulum_pair(4.89, 4.89, seed=0)
    pd = lambda s: np.array([-(2.0 * s[0] + 0.3 * s[1])])
    train, test = rollout(pair.real, pd, 10, seed=[0, 1]), rollout(pair.real, pd, 10, seed=[0, 2])
    cfg = pendulum_garat_config()
    start = ResidualGaussianTransformer(2, 1, obs_scale=pair.sim.obs_scale, log_std_init=cfg.transformer_log_std_init,
                                        rng=0)
    start.policy.mean_net.biases[-1][:] = 0.2
    tr, _ = ground(pair.sim, train, pd, cfg, seed=0, initial_transformer=start)
    S = np.array([s for t in test for s in t.states])
    A = np.array([a for t in test for a in t.actions]).reshape(-1, 1)
    assert np.mean(np.abs(tr.transform(S, A) - A)) < np.mean(np.abs(start.transform(S, A) - A))
    err = lambda t: per_step_transition_error(GroundedEnvironment(pair.sim, t, deterministic=True), test)[0]
    assert err(tr) < err(start)
    assert per_step_transition_error(pair.sim, test)[0] == 0.0


def test_warm_start_leaves_initial_transformer_untouched():
    inst = tabular_suite()[0]
    start = tabular_run(inst, n_updates=1, episodes=20)[0]
    before = [p.copy() for p in start.policy.params]
    cfg = tabular_garat_config()
    cfg.n_transformer_updates = 2
    trajs = rollout(TabularEnv(inst.real, horizon=80), inst.agent_policy, 20, seed=0)
    tr, _ = ground(TabularEnv(inst.sim, horizon=80), trajs, inst.agent_policy, cfg, initial_transformer=start)
    assert all(np.array_equal(a, b) for a, b in zip(before, start.policy.params))
    assert tr is not start


def test_ground_rejects_bad_data():
    env = GridworldEnv(size=2)
    pi = TabularPolicy.uniform(4, 4)
    with pytest.raises(ValueError):
        ground(env, [], pi, GaratConfig(n_transformer_updates=1))
    big = rollout(GridworldEnv(size=3), TabularPolicy.uniform(9, 4), 2, seed=0)
    with pytest.raises(ValueError):
        ground(env, big, pi, GaratConfig(n_transformer_updates=1))


def test_ground_is_seed_deterministic(tmp_path):
    inst = tabular_suite()[0]
    a, da = tabular_run(inst, seed=3, n_updates=3, episodes=50)
    b, db = tabular_run(inst, seed=3, n_updates=3, episodes=50)
    assert np.array_equal(a.table().probs, b.table().probs)
    write_diagnostics_csv(da, tmp_path / "a.csv")
    write_diagnostics_csv(db, tmp_path / "b.csv")
    strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]
    assert strip(tmp_path / "a.csv") == strip(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iteration,disc_loss,mean_reward,js_divergence,wall_ms"


# ---------------------------------------------------------------- outer loop

def test_zero_outer_iterations_returns_input_policy():
    pair = make_gridworld_pair(2, 0.0, 0.3)
    pi = TabularPolicy.uniform(4, 4)
    est = GaratTransfer(GaratConfig(), seed=0).fit(pair.sim, pair.real, pi, outer_iterations=0)
    assert est.policy_ is pi
    assert est.real_transitions_used_ == 0 and est.history_ == []


def test_zero_budget_rejected():
    pair = make_gridworld_pair(2, 0.0, 0.3)
    with pytest.raises(ValueError):
        GaratTransfer(GaratConfig(real_budget=0)).fit(pair.sim, pair.real, TabularPolicy.uniform(4, 4), 1)


def test_budget_is_respected():
    pair = make_gridworld_pair(2, 0.0, 0.3)
    cfg = GaratConfig(n_transformer_updates=2, real_budget=30, real_episodes=50, retrain_timesteps=200)
    cfg.transformer.batch_timesteps = 64
    agent = CategoricalPolicy(4, 4, rng=0)
    est = GaratTransfer(cfg, seed=0, eval_episodes=2).fit(pair.sim, pair.real, agent, 3)
    assert est.real_transitions_used_ == 30
    assert len(est.history_) == 1
