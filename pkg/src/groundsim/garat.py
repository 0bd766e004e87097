"""Adversarial grounding: discriminator, transformer reward and the ground/retrain loop.

The discriminator labels grounded-simulator transitions 1 and real
transitions 0; the transformer is trained by PPO on the reward
``-log D(s, a, s')``, so it gains reward by producing transitions the
discriminator takes for real ones.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .envs import Environment, _act, as_seed_sequence, count_transitions, evaluate_policy, rollout
from .grounding import (CategoricalActionTransformer, GroundedEnvironment, ResidualGaussianTransformer,
                        TabularActionTransformer, grounded_marginal)
from .mdp import TabularMDP, TabularPolicy, discounted_state_occupancy, js_divergence
from .nn import Adam, Mlp
from .ppo import PPO, AgentTrainConfig, PpoConfig, make_value_function, train_agent

log = logging.getLogger(__name__)

EPS = 1e-7


# ---------------------------------------------------------------- features

class TransitionFeatures:
    """Encodes ``(s, a, s')`` for the discriminator.

    Tabular: one-hot ``s``, ``a`` and ``s'``.  Continuous: ``(s, a, s' - s)``;
    the state change carries the dynamics signal more directly than ``s'``.
    """

    def __init__(self, env: Environment):
        self.discrete = env.discrete
        if self.discrete:
            self.n_states, self.n_actions = env.n_states, env.n_actions
            self.dim = 2 * self.n_states + self.n_actions
        else:
            self.obs_dim, self.act_dim = env.observation_dim, env.action_dim
            self.dim = 2 * self.obs_dim + self.act_dim

    def __call__(self, states, actions, next_states) -> np.ndarray:
        if self.discrete:
            s = np.asarray(states, dtype=int).ravel()
            a = np.asarray(actions, dtype=int).ravel()
            sp = np.asarray(next_states, dtype=int).ravel()
            X = np.zeros((s.size, self.dim))
            rows = np.arange(s.size)
            X[rows, s] = 1.0
            X[rows, self.n_states + a] = 1.0
            X[rows, self.n_states + self.n_actions + sp] = 1.0
            return X
        s = np.asarray(states, dtype=np.float64).reshape(-1, self.obs_dim)
        a = np.asarray(actions, dtype=np.float64).reshape(-1, self.act_dim)
        sp = np.asarray(next_states, dtype=np.float64).reshape(-1, self.obs_dim)
        return np.concatenate([s, a, sp - s], axis=1)


# ---------------------------------------------------------------- discriminator

def _normalise_weights(w, n):
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample weights must be non-negative with positive sum")
    return w / w.sum()


class Discriminator(BaseEstimator):
    """Sigmoid classifier ``D(x) in [eps, 1 - eps]``; label 1 = grounded sim.

    Loss: ``-(E_gsim log D + E_real log(1 - D))`` plus a one-sided gradient
    penalty ``gp_coef * E max(0, |grad_x D| - 1)^2`` on random interpolates
    and ``l2_coef * sum W^2``.  Inputs are standardised with statistics of
    the real batch passed to ``set_scaler``.
    """

    def __init__(self, hidden=(64, 64), learning_rate: float = 3e-4, gp_coef: float = 10.0,
                 l2_coef: float = 1e-4, minibatches: int = 1, epochs: int = 1, standardize: bool = True,
                 eps: float = EPS, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.gp_coef = gp_coef
        self.l2_coef = l2_coef
        self.minibatches = minibatches
        self.epochs = epochs
        self.standardize = standardize
        self.eps = eps
        self.seed = seed

    def initialize(self, n_features: int) -> "Discriminator":
        if self.gp_coef < 0 or self.l2_coef < 0:
            raise ValueError("regulariser coefficients must be non-negative")
        ss = np.random.SeedSequence(self.seed)
        init_ss, rng_ss = ss.spawn(2)
        self.net_ = Mlp([n_features, *self.hidden, 1], rng=np.random.default_rng(init_ss))
        self.opt_ = Adam(self.net_.params, lr=self.learning_rate)
        self.rng_ = np.random.default_rng(rng_ss)
        self.mean_ = np.zeros(n_features)
        self.scale_ = np.ones(n_features)
        self.n_features_in_ = n_features
        return self

    def set_scaler(self, X_real) -> None:
        if not self.standardize:
            return
        X = np.asarray(X_real, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-8, std, 1.0)

    def _z(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected (n, {self.n_features_in_}) features, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite discriminator input")
        return (X - self.mean_) / self.scale_

    def decision_function(self, X) -> np.ndarray:
        return self.net_.predict(self._z(X))[:, 0]

    def predict_proba(self, X) -> np.ndarray:
        """Clamped D(x); the probability of the grounded-sim label."""
        return np.clip(expit(self.decision_function(X)), self.eps, 1.0 - self.eps)

    def reward(self, X) -> np.ndarray:
        return -np.log(self.predict_proba(X))

    def loss_and_grad(self, X_gsim, X_real, w_gsim=None, w_real=None, rng=None):
        """Returns ``(data_loss, total_loss, grads)`` for one pair of batches."""
        ng, nr = len(X_gsim), len(X_real)
        if ng == 0 or nr == 0:
            raise ValueError("discriminator update needs both grounded-sim and real samples")
        wg, wr = _normalise_weights(w_gsim, ng), _normalise_weights(w_real, nr)
        net = self.net_
        Z = np.concatenate([self._z(X_gsim), self._z(X_real)])
        o = net.forward(Z)[:, 0]
        d = np.clip(expit(o), self.eps, 1.0 - self.eps)
        data = -(wg @ np.log(d[:ng]) + wr @ np.log(1.0 - d[ng:]))
        # logit-space derivative of the unclamped log-likelihood
        sig = expit(o)
        g_o = np.concatenate([wg * (sig[:ng] - 1.0), wr * sig[ng:]])
        grads = net.backward(g_o[:, None])
        total = data

        if self.gp_coef > 0:
            rng = self.rng_ if rng is None else rng
            m = max(ng, nr)
            ig = rng.choice(ng, size=m, p=wg)
            ir = rng.choice(nr, size=m, p=wr)
            u = rng.random((m, 1))
            Zi = u * Z[:ng][ig] + (1.0 - u) * Z[ng:][ir]
            pen, pgrads = self._gradient_penalty(Zi)
            total += pen
            grads = [g + p for g, p in zip(grads, pgrads)]

        if self.l2_coef > 0:
            for i, W in enumerate(net.weights):
                total += self.l2_coef * float(np.sum(W * W))
                grads[2 * i] = grads[2 * i] + 2.0 * self.l2_coef * W
        return float(data), float(total), grads

    def _gradient_penalty(self, Z):
        net = self.net_
        n = Z.shape[0]
        g, hs, us, vs = net.scalar_input_gradient(Z)
        o = hs[-1][:, 0]
        D = expit(o)
        dd = D * (1.0 - D)
        G = dd[:, None] * g
        norm = np.sqrt(np.sum(G * G, axis=1))
        excess = np.maximum(norm - 1.0, 0.0)
        pen = self.gp_coef * float(np.mean(excess ** 2))
        if not np.any(excess > 0):
            return pen, [np.zeros_like(p) for p in net.params]
        G_bar = (2.0 * self.gp_coef / n) * (excess / np.where(norm > 0, norm, 1.0))[:, None] * G
        g_bar = dd[:, None] * G_bar
        D_bar = (1.0 - 2.0 * D) * np.sum(G_bar * g, axis=1)
        o_bar = D_bar * dd
        grads = net.input_gradient_backward(hs, us, vs, g_bar)
        grads_o, _ = net._backward(hs, o_bar[:, None])
        return pen, [a + b for a, b in zip(grads, grads_o)]

    def partial_fit(self, X_gsim, X_real, w_gsim=None, w_real=None) -> float:
        """One discriminator update: ``epochs`` passes in ``minibatches`` chunks."""
        if not hasattr(self, "net_"):
            self.initialize(np.asarray(X_gsim).shape[1])
        ng, nr = len(X_gsim), len(X_real)
        if ng == 0 or nr == 0:
            raise ValueError("discriminator update needs both grounded-sim and real samples")
        wg, wr = _normalise_weights(w_gsim, ng), _normalise_weights(w_real, nr)
        X_gsim, X_real = np.asarray(X_gsim, dtype=np.float64), np.asarray(X_real, dtype=np.float64)
        losses = []
        for _ in range(self.epochs):
            # each grounded-sim chunk is paired with an equally sized real chunk
            cg = np.array_split(self.rng_.permutation(ng), min(self.minibatches, ng))
            for ig in cg:
                # real samples are drawn in proportion to their weights
                ir = self.rng_.choice(nr, size=ig.size, p=wr)
                data, _, grads = self.loss_and_grad(X_gsim[ig], X_real[ir], wg[ig], None)
                self.opt_.step(grads)
                losses.append(data)
        return float(np.mean(losses))

    def fit(self, X_gsim, X_real, w_gsim=None, w_real=None, n_updates: int = 1000):
        self.initialize(np.asarray(X_gsim).shape[1])
        self.set_scaler(X_real)
        for _ in range(n_updates):
            self.partial_fit(X_gsim, X_real, w_gsim, w_real)
        return self


def discriminator_loss(D: Discriminator, batch_gsim, batch_real, w_gsim=None, w_real=None):
    """``(total_loss, data_loss, grads)`` on feature batches."""
    data, total, grads = D.loss_and_grad(batch_gsim, batch_real, w_gsim, w_real)
    return total, data, grads


def data_loss_from_probs(d_gsim, d_real, w_gsim=None, w_real=None, eps: float = EPS) -> float:
    """Data term of the discriminator loss given D values."""
    dg = np.clip(np.asarray(d_gsim, dtype=np.float64), eps, 1.0 - eps)
    dr = np.clip(np.asarray(d_real, dtype=np.float64), eps, 1.0 - eps)
    wg, wr = _normalise_weights(w_gsim, dg.size), _normalise_weights(w_real, dr.size)
    return float(-(wg @ np.log(dg) + wr @ np.log(1.0 - dr)))


def transformer_reward(d, eps: float = EPS):
    """``-log D`` with D clamped to ``[eps, 1 - eps]``."""
    return -np.log(np.clip(d, eps, 1.0 - eps))


def optimal_discriminator(rho_g, rho_real) -> np.ndarray:
    """``rho_g / (rho_g + rho_real)``; NaN where both vanish."""
    p = np.asarray(rho_g, dtype=np.float64)
    q = np.asarray(rho_real, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(p + q > 0, p / (p + q), np.nan)


# ---------------------------------------------------------------- config

@dataclass
class GaratConfig:
    n_transformer_updates: int = 50
    discriminator_updates_per_policy_update: int = 1
    real_episodes: int = 10
    transformer: PpoConfig = field(default_factory=PpoConfig)
    gp_coef: float = 10.0
    l2_coef: float = 1e-4
    disc_hidden: tuple = (64, 64)
    disc_learning_rate: float = 3e-4
    disc_minibatches: int = 2
    disc_epochs: int = 1
    transformer_hidden: tuple = (64, 64)
    transformer_log_std_init: float = float(np.log(0.05))
    discount_weighting: bool = False
    stochastic_agent: bool = True
    outer_iterations: int = 1
    real_budget: int = 2000
    retrain_timesteps: int = 100_000
    agent: AgentTrainConfig = field(default_factory=AgentTrainConfig)

    def __post_init__(self):
        if isinstance(self.transformer, dict):
            self.transformer = PpoConfig(**self.transformer)
        if isinstance(self.agent, dict):
            self.agent = AgentTrainConfig(**_tuples(self.agent))
        self.disc_hidden = tuple(self.disc_hidden)
        self.transformer_hidden = tuple(self.transformer_hidden)
        if self.n_transformer_updates < 1:
            raise ValueError("n_transformer_updates must be >= 1")
        if self.discriminator_updates_per_policy_update < 0:
            raise ValueError("discriminator_updates_per_policy_update must be >= 0")
        if self.gp_coef < 0 or self.l2_coef < 0:
            raise ValueError("regulariser coefficients must be non-negative")
        if self.real_episodes < 1:
            raise ValueError("real_episodes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "GaratConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown GaratConfig fields: {sorted(unknown)}")
        return cls(**doc)


def _tuples(doc: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}


# ---------------------------------------------------------------- rollouts

def policy_table(policy, n_states: int) -> TabularPolicy:
    """Tabular view of a discrete agent policy."""
    if isinstance(policy, TabularPolicy):
        return policy
    return TabularPolicy(policy.probs(np.eye(n_states)))


class GroundedCollector:
    """Rolls the frozen agent through sim + transformer, gathering both the
    transformer's PPO batch (joint state ``(s, a)``) and the ``(s, a, s')``
    triples the discriminator sees."""

    def __init__(self, sim: Environment, agent, transformer, seed, stochastic_agent: bool = True):
        env_ss, agent_ss, tr_ss = as_seed_sequence(seed).spawn(3)
        self.sim = sim
        sim.seed(np.random.default_rng(env_ss))
        self.agent = agent
        self.transformer = transformer
        self.agent_rng = np.random.default_rng(agent_ss)
        self.tr_rng = np.random.default_rng(tr_ss)
        self.deterministic = not stochastic_agent
        self.s = None

    def _agent(self, s):
        return _act(self.agent, self.sim, s, self.agent_rng, self.deterministic)[0]

    def collect(self, n_steps: int):
        if self.sim.discrete and hasattr(self.transformer, "table"):
            return self._collect_tabular(n_steps)
        sim, tr = self.sim, self.transformer
        S, A, SP, T = [], [], [], []
        xs, raws, logps, dones, terms, next_xs = [], [], [], [], [], []
        for i in range(n_steps):
            if self.s is None:
                self.s = sim.reset()
                self.a = self._agent(self.s)
                self.t = 0
            s, a = self.s, self.a
            b, raw, logp = tr.sample(s, a, self.tr_rng)
            sp, _, done, info = sim.step(b)
            x = np.asarray(tr.features(s, a), dtype=np.float64).reshape(-1)
            if info["terminal"]:
                ap = a
            else:
                ap = self._agent(sp)
            S.append(s)
            A.append(a)
            SP.append(sp)
            T.append(self.t)
            xs.append(x)
            raws.append(raw)
            logps.append(logp)
            dones.append(done or i == n_steps - 1)
            terms.append(info["terminal"])
            next_xs.append(np.asarray(tr.features(sp, ap), dtype=np.float64).reshape(-1))
            if done:
                self.s = None
            else:
                self.s, self.a, self.t = sp, ap, self.t + 1
        batch = {"obs": np.array(xs), "actions": np.array(raws), "logp": np.array(logps),
                 "dones": np.array(dones), "terminals": np.array(terms), "next_obs": np.array(next_xs)}
        return batch, (np.array(S), np.array(A), np.array(SP), np.array(T))

    def _collect_tabular(self, n_steps: int):
        # same process as the generic path, sampling from the transformer's table
        sim = self.sim
        S_n = sim.n_states
        probs = self.transformer.table().probs
        cum = np.cumsum(probs, axis=2)
        pi = policy_table(self.agent, S_n).probs
        cum_pi = np.cumsum(pi, axis=1)
        draw = lambda c, rng: int(min(np.searchsorted(c, rng.random(), side="right"), c.size - 1))
        agent = (lambda s: int(np.argmax(pi[s]))) if self.deterministic else (lambda s: draw(cum_pi[s], self.agent_rng))
        S, A, SP, T, B, AP, dones, terms = ([] for _ in range(8))
        for i in range(n_steps):
            if self.s is None:
                self.s = sim.reset()
                self.a = agent(self.s)
                self.t = 0
            s, a = self.s, self.a
            b = draw(cum[s, a], self.tr_rng)
            sp, _, done, info = sim.step(b)
            ap = a if info["terminal"] else agent(sp)
            S.append(s)
            A.append(a)
            SP.append(sp)
            T.append(self.t)
            B.append(b)
            AP.append(ap)
            dones.append(done or i == n_steps - 1)
            terms.append(info["terminal"])
            if done:
                self.s = None
            else:
                self.s, self.a, self.t = sp, ap, self.t + 1
        S, A, SP, B, AP = map(np.array, (S, A, SP, B, AP))
        f = self.transformer.features
        batch = {"obs": f(S, A), "actions": B, "logp": np.log(probs[S, A, B]),
                 "dones": np.array(dones), "terminals": np.array(terms), "next_obs": f(SP, AP)}
        return batch, (S, A, SP, np.array(T))


def _stack_with_time(trajectories):
    S, A, SP, T = [], [], [], []
    for traj in trajectories:
        for t in range(len(traj)):
            S.append(traj.states[t])
            A.append(traj.actions[t])
            SP.append(traj.next_states[t])
            T.append(t)
    return np.array(S), np.array(A), np.array(SP), np.array(T)


def make_transformer(sim: Environment, config: GaratConfig, rng):
    if sim.discrete:
        return CategoricalActionTransformer(sim.n_states, sim.n_actions, hidden=config.transformer_hidden, rng=rng)
    return ResidualGaussianTransformer(sim.observation_dim, sim.action_dim, obs_scale=getattr(sim, "obs_scale", None),
                                       low=sim.action_low, high=sim.action_high, hidden=config.transformer_hidden,
                                       log_std_init=config.transformer_log_std_init, rng=rng)


# ---------------------------------------------------------------- grounding loop

DIAGNOSTIC_COLUMNS = ("iteration", "disc_loss", "mean_reward", "js_divergence", "wall_ms")


class GaratGrounder(BaseEstimator):
    """Learns an action transformer from real trajectories of ``agent_policy``.

    ``real_mdp`` / ``sim_mdp`` are optional exact models used only to report
    the exact JS divergence per iteration; they never influence training.
    After ``fit``: ``transformer_``, ``discriminator_``, ``diagnostics_``.
    """

    def __init__(self, config: GaratConfig | None = None, seed: int = 0):
        self.config = config
        self.seed = seed

    def fit(self, sim: Environment, real_trajectories, agent_policy, real_mdp: TabularMDP | None = None,
            initial_transformer=None):
        cfg = self.config or GaratConfig()
        if count_transitions(real_trajectories) == 0:
            raise ValueError("ground() needs at least one real transition")
        feats = TransitionFeatures(sim)
        S, A, SP, T = _stack_with_time(real_trajectories)
        if sim.discrete:
            if np.max(S) >= sim.n_states or np.max(A) >= sim.n_actions:
                raise ValueError("real trajectories do not match the simulator's spaces")
        elif S.shape[1:] != (sim.observation_dim,):
            raise ValueError("real trajectories do not match the simulator's spaces")
        gamma = cfg.transformer.gamma
        X_real = feats(S, A, SP)
        w_real = gamma ** T if cfg.discount_weighting else None

        ss = np.random.SeedSequence(self.seed)
        tr_ss, vf_ss, d_ss, ppo_ss, col_ss = ss.spawn(5)
        transformer = make_transformer(sim, cfg, np.random.default_rng(tr_ss))
        if initial_transformer is not None:
            # warm start; the caller's object is left untouched
            for dst, src in zip(transformer.policy.params, initial_transformer.policy.params):
                dst[...] = src
        value_fn = make_value_function(transformer.policy.obs_dim, cfg.transformer_hidden,
                                       rng=np.random.default_rng(vf_ss))
        learner = PPO(transformer.policy, value_fn, cfg.transformer, rng=np.random.default_rng(ppo_ss),
                      total_updates=cfg.n_transformer_updates)
        D = Discriminator(cfg.disc_hidden, cfg.disc_learning_rate, cfg.gp_coef, cfg.l2_coef,
                          cfg.disc_minibatches, cfg.disc_epochs, seed=int(d_ss.generate_state(1)[0]))
        D.initialize(feats.dim)
        D.set_scaler(X_real)
        collector = GroundedCollector(sim, agent_policy, transformer, col_ss, cfg.stochastic_agent)

        exact = None
        if real_mdp is not None and sim.discrete:
            pi_tab = policy_table(agent_policy, sim.n_states)
            rho_real = grounded_marginal(real_mdp, pi_tab, TabularActionTransformer.identity(
                real_mdp.n_states, real_mdp.n_actions)).rho
            exact = (sim.tabular_view(), pi_tab, rho_real)

        rows = []
        for it in range(cfg.n_transformer_updates):
            t0 = time.perf_counter()
            batch, (s, a, sp, t) = collector.collect(cfg.transformer.batch_timesteps)
            X_g = feats(s, a, sp)
            w_g = gamma ** t if cfg.discount_weighting else None
            d_loss = float("nan")
            for _ in range(cfg.discriminator_updates_per_policy_update):
                d_loss = D.partial_fit(X_g, X_real, w_g, w_real)
            batch["rewards"] = D.reward(X_g)
            learner.update(batch)
            js = ""
            if exact is not None:
                js = js_divergence(grounded_marginal(exact[0], exact[1], transformer.table()).rho, exact[2])
            rows.append({"iteration": it, "disc_loss": d_loss, "mean_reward": float(np.mean(batch["rewards"])),
                         "js_divergence": js, "wall_ms": 1000.0 * (time.perf_counter() - t0)})
            log.debug("ground iter %d disc_loss %.4f reward %.4f js %s", it, d_loss, rows[-1]["mean_reward"], js)
        self.transformer_ = transformer
        self.discriminator_ = D
        self.value_fn_ = value_fn
        self.diagnostics_ = rows
        return self


def ground(sim: Environment, real_trajectories, agent_policy, config: GaratConfig | None = None, seed: int = 0,
           real_mdp: TabularMDP | None = None, initial_transformer=None):
    """Returns ``(transformer, diagnostics)``."""
    g = GaratGrounder(config, seed).fit(sim, real_trajectories, agent_policy, real_mdp, initial_transformer)
    return g.transformer_, g.diagnostics_


def write_diagnostics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAGNOSTIC_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"], repr(float(r["disc_loss"])), repr(float(r["mean_reward"])),
                        "" if r["js_divergence"] == "" else repr(float(r["js_divergence"])), f"{r['wall_ms']:.3f}"])


# ---------------------------------------------------------------- outer loop

class GaratTransfer(BaseEstimator):
    """Collect real data, ground, retrain; repeated ``outer_iterations`` times.

    ``policy_`` is the candidate with the best real evaluation (the input
    policy included); ``real_transitions_used_`` counts training data only.
    """

    def __init__(self, config: GaratConfig | None = None, seed: int = 0, eval_episodes: int = 10,
                 grounder=None):
        self.config = config
        self.seed = seed
        self.eval_episodes = eval_episodes
        self.grounder = grounder

    def fit(self, sim: Environment, real: Environment, agent_policy, outer_iterations: int | None = None):
        cfg = self.config or GaratConfig()
        n_outer = cfg.outer_iterations if outer_iterations is None else outer_iterations
        if n_outer > 0 and cfg.real_budget <= 0:
            raise ValueError("real-transition budget must be positive")
        ss = np.random.SeedSequence(self.seed)
        eval_seed = int(ss.spawn(1)[0].generate_state(1)[0])
        best = agent_policy
        best_ret = evaluate_policy(real, agent_policy, self.eval_episodes, seed=eval_seed)[0] if n_outer else None
        policy = agent_policy
        used = 0
        self.history_ = []
        self.transformers_ = []
        for k, child in enumerate(ss.spawn(n_outer)):
            remaining = cfg.real_budget - used
            if remaining <= 0:
                log.warning("real-transition budget exhausted after %d outer iterations", k)
                break
            real_ss, g_ss, a_ss = child.spawn(3)
            trajs = rollout(real, policy, cfg.real_episodes, seed=real_ss, deterministic=not cfg.stochastic_agent,
                            max_transitions=remaining)
            used += count_transitions(trajs)
            grounder = self.grounder or _default_grounder(cfg)
            transformer = grounder(sim, trajs, policy, cfg, g_ss)
            self.transformers_.append(transformer)
            gsim = GroundedEnvironment(sim, transformer, deterministic=not sim.discrete)
            policy = train_agent(gsim, cfg.agent, cfg.retrain_timesteps, seed=int(a_ss.generate_state(1)[0]),
                                 policy=policy)
            ret = evaluate_policy(real, policy, self.eval_episodes, seed=eval_seed)[0]
            self.history_.append({"outer_iteration": k, "real_transitions_used": used, "real_return": ret})
            if ret >= best_ret:
                best, best_ret = policy, ret
        self.policy_ = best
        self.real_transitions_used_ = used
        return self


def _default_grounder(cfg):
    def run(sim, trajs, policy, config, seed_seq):
        return ground(sim, trajs, policy, config, seed=int(seed_seq.generate_state(1)[0]))[0]
    return run


def garat_outer_loop(sim: Environment, real: Environment, agent_policy, config: GaratConfig | None = None,
                     outer_iterations: int | None = None, seed: int = 0):
    """Returns ``(policy, real_transitions_used)``."""
    est = GaratTransfer(config, seed).fit(sim, real, agent_policy, outer_iterations)
    return est.policy_, est.real_transitions_used_


# ---------------------------------------------------------------- exact oracle

def _project_rows(W):
    """Euclidean projection of each last-axis row onto the simplex."""
    shape = W.shape
    V = W.reshape(-1, shape[-1])
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    k = np.arange(1, V.shape[1] + 1)
    cond = U - css / k > 0
    r = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(V.shape[0]), r] / (r + 1)
    return np.maximum(V - tau[:, None], 0.0).reshape(shape)


def _js_and_grad(W, T_sim, pi, rho0, gamma, rho_real):
    """JS(rho_g(W), rho_real) and its gradient w.r.t. the transformer table W."""
    Tg = np.einsum("sbp,sab->sap", T_sim, W)
    P = np.einsum("sa,sap->sp", pi, Tg)
    n = P.shape[0]
    d = discounted_state_occupancy(Tg, pi, rho0, gamma)
    base = d[:, None, None] * pi[:, :, None]
    rho = base * Tg
    m = 0.5 * (rho + rho_real)
    tiny = 1e-300
    js = 0.5 * (np.sum(np.where(rho > 0, rho * np.log(np.maximum(rho, tiny) / np.maximum(m, tiny)), 0.0))
                + np.sum(np.where(rho_real > 0, rho_real * np.log(np.maximum(rho_real, tiny) / np.maximum(m, tiny)), 0.0)))
    G = 0.5 * np.log((rho + 1e-30) / (m + 1e-30))
    gT = G * base
    g_d = np.sum(G * pi[:, :, None] * Tg, axis=(1, 2))
    u = np.linalg.solve(np.eye(n) - gamma * P, g_d)
    gT = gT + gamma * pi[:, :, None] * (d[:, None] * u[None, :])[:, None, :]
    gW = np.einsum("sap,sbp->sab", gT, T_sim)
    return max(float(js), 0.0), gW, d[:, None] * pi


def exact_divergence_minimizer(sim: TabularMDP, agent_policy: TabularPolicy, rho_real, restarts: int = 20,
                               max_iter: int = 3000, seed: int = 0, tol: float = 1e-15):
    """Minimises JS(rho_g, rho_real) over tabular transformers.

    Projected gradient descent on the simplex rows with Armijo backtracking,
    from the identity and ``restarts`` random Dirichlet starts.  Returns
    ``(TabularActionTransformer, js)``.
    """
    S, A = sim.n_states, sim.n_actions
    if S * A > 64:
        raise ValueError(f"instance too large for the exact oracle (|S||A| = {S * A} > 64)")
    rho_real = np.asarray(getattr(rho_real, "rho", rho_real), dtype=np.float64)
    pi = agent_policy.probs
    args = (sim.transition, pi, sim.initial_dist, sim.discount, rho_real)
    rng = np.random.default_rng(seed)
    starts = [np.broadcast_to(np.eye(A), (S, A, A)).copy()]
    starts += [rng.dirichlet(np.ones(A), size=(S, A)) for _ in range(restarts)]
    best_W, best_js = None, math.inf
    for W in starts:
        W, js = _pgd(W, args, max_iter, tol)
        if js < best_js:
            best_W, best_js = W, js
        if best_js <= tol:
            break
    return TabularActionTransformer(best_W), best_js


def _pgd(W, args, max_iter, tol):
    # rows are scaled by their visitation mass so rarely visited (s, a)
    # pairs move as fast as frequent ones
    js, g, mass = _js_and_grad(W, *args)
    step = 1.0
    for _ in range(max_iter):
        if js <= tol:
            break
        direction = g / np.maximum(mass, 1e-12)[:, :, None]
        while True:
            W_new = _project_rows(W - step * direction)
            js_new, g_new, mass_new = _js_and_grad(W_new, *args)
            decrease = np.sum(g * (W - W_new))
            if js_new <= js - 1e-4 * decrease or step < 1e-14:
                break
            step *= 0.5
        if js_new >= js:
            break
        W, js, g, mass = W_new, js_new, g_new, mass_new
        step = min(step * 2.0, 1e3)
    return W, js
