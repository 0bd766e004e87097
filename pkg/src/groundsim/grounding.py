"""Action transformers, grounded simulators and the action-transformation MDP.

A transformer maps the agent's ``(s, a)`` to a distribution over the action
actually sent to the simulator.  Composing it with the simulator gives the
grounded transition ``T_g(s'|s,a) = sum_b T_sim(s'|s,b) pi_g(b|s,a)``.

Grounded trajectories always record the agent's action ``a``; the
transformed action only appears in ``info["transformed_action"]``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import nnls

from .envs import Environment
from .mdp import (MarginalTransitionDistribution, TabularMDP, TabularPolicy,
                  marginal_transition_distribution)
from .nn import CategoricalPolicy, GaussianPolicy


class TabularActionTransformer:
    """Explicit table ``probs[s, a, b] = pi_g(b | s, a)``."""

    def __init__(self, probs):
        p = np.array(probs, dtype=np.float64)
        if p.ndim != 3 or p.shape[1] != p.shape[2]:
            raise ValueError(f"transformer table must be (S, A, A), got {p.shape}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > 1e-9):
            raise ValueError("transformer rows must be probability vectors")
        p = p / p.sum(axis=2, keepdims=True)
        p.setflags(write=False)
        self.probs = p

    @classmethod
    def identity(cls, n_states: int, n_actions: int) -> "TabularActionTransformer":
        return cls(np.broadcast_to(np.eye(n_actions), (n_states, n_actions, n_actions)))

    @classmethod
    def constant(cls, n_states: int, n_actions: int, action: int) -> "TabularActionTransformer":
        p = np.zeros((n_states, n_actions, n_actions))
        p[:, :, action] = 1.0
        return cls(p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularActionTransformer":
        return cls(np.full((n_states, n_actions, n_actions), 1.0 / n_actions))

    def table(self) -> "TabularActionTransformer":
        return self

    def sample(self, s, a, rng, deterministic: bool = False):
        p = self.probs[int(s), int(a)]
        if deterministic:
            b = int(np.argmax(p))
        else:
            b = int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))
        return b, b, math.log(p[b]) if p[b] > 0 else -math.inf

    def to_dict(self) -> dict:
        return {"kind": "action_transformer", "tabular": True, "residual": False,
                "probs": self.probs.tolist()}


class CategoricalActionTransformer:
    """Learned tabular transformer: softmax MLP on one-hot ``(s, a)``."""

    def __init__(self, n_states: int, n_actions: int, hidden=(64, 64), rng=None, head_gain: float = 0.01,
                 policy: CategoricalPolicy | None = None):
        self.n_states = n_states
        self.n_actions = n_actions
        self.policy = policy or CategoricalPolicy(n_states + n_actions, n_actions, hidden=hidden, rng=rng,
                                                  head_gain=head_gain)

    def features(self, s, a) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=int))
        a = np.atleast_1d(np.asarray(a, dtype=int))
        f = np.zeros((s.size, self.n_states + self.n_actions))
        f[np.arange(s.size), s] = 1.0
        f[np.arange(s.size), self.n_states + a] = 1.0
        return f

    def sample(self, s, a, rng, deterministic: bool = False):
        b, logp = self.policy.act(self.features(s, a)[0], rng, deterministic)
        return int(b), int(b), float(logp)

    def table(self) -> TabularActionTransformer:
        S, A = self.n_states, self.n_actions
        ss, aa = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
        probs = self.policy.probs(self.features(ss.ravel(), aa.ravel())).reshape(S, A, A)
        return TabularActionTransformer(probs)

    def to_dict(self) -> dict:
        doc = {"kind": "action_transformer", "tabular": True, "residual": False,
               "n_states": self.n_states, "n_actions": self.n_actions}
        doc["policy"] = self.policy.to_dict()
        return doc


class ResidualGaussianTransformer:
    """Continuous transformer: ``a_sim = clip(a + delta)``, ``delta ~ N(mu(s, a), sigma)``.

    With a near-zero output head the initial transformer is the identity.
    Deployment uses the mean residual.
    """

    def __init__(self, obs_dim: int, act_dim: int, obs_scale=None, low=-1.0, high=1.0, hidden=(64, 64),
                 log_std_init: float = math.log(0.05), rng=None, policy: GaussianPolicy | None = None):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=np.float64)
        self.low = low
        self.high = high
        self.policy = policy or GaussianPolicy(obs_dim + act_dim, act_dim, hidden=hidden,
                                               log_std_init=log_std_init, rng=rng)

    def features(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64) * self.obs_scale
        a = np.asarray(a, dtype=np.float64).reshape(s.shape[:-1] + (self.act_dim,))
        return np.concatenate([s, a], axis=-1)

    def sample(self, s, a, rng, deterministic: bool = False):
        a = np.asarray(a, dtype=np.float64).reshape(self.act_dim)
        delta, logp = self.policy.act(self.features(s, a), rng, deterministic)
        return np.clip(a + delta, self.low, self.high), delta, float(logp)

    def transform(self, states, actions) -> np.ndarray:
        """Deterministic (mean) transformation, batched."""
        actions = np.asarray(actions, dtype=np.float64).reshape(len(states), self.act_dim)
        delta = self.policy.mean(self.features(np.asarray(states, dtype=np.float64), actions))
        return np.clip(actions + delta, self.low, self.high)

    def to_dict(self) -> dict:
        return {"kind": "action_transformer", "residual": True, "tabular": False,
                "obs_dim": self.obs_dim, "act_dim": self.act_dim, "obs_scale": self.obs_scale.tolist(),
                "low": self.low, "high": self.high, "policy": self.policy.to_dict()}


def transformer_from_dict(doc: dict):
    if doc.get("kind") != "action_transformer":
        raise ValueError("not an action transformer checkpoint")
    if doc.get("residual"):
        pol = GaussianPolicy.from_dict(doc["policy"])
        return ResidualGaussianTransformer(doc["obs_dim"], doc["act_dim"], doc["obs_scale"], doc["low"],
                                           doc["high"], policy=pol)
    if "probs" in doc:
        return TabularActionTransformer(doc["probs"])
    if "policy" in doc and doc["policy"].get("kind") == "categorical_policy":
        return CategoricalActionTransformer(doc["n_states"], doc["n_actions"],
                                            policy=CategoricalPolicy.from_dict(doc["policy"]))
    from .baselines import GatTransformer
    return GatTransformer.from_dict(doc)


class GroundedEnvironment(Environment):
    """Simulator whose actions pass through an action transformer first."""

    def __init__(self, sim: Environment, transformer, deterministic: bool = False, seed=None):
        super().__init__(seed)
        self.sim = sim
        self.transformer = transformer
        self.deterministic = deterministic
        self.discrete = sim.discrete
        self.horizon = sim.horizon
        self.last_transformed_action = None
        for attr in ("observation_dim", "action_dim", "action_low", "action_high", "n_states", "n_actions", "obs_scale"):
            if hasattr(sim, attr):
                setattr(self, attr, getattr(sim, attr))

    def seed(self, seed) -> None:
        ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.Generator) else None
        if ss is None:
            child = seed.integers(2 ** 63)
            ss = np.random.SeedSequence(int(child))
        sim_ss, tr_ss = ss.spawn(2)
        self.sim.seed(np.random.default_rng(sim_ss))
        self.rng = np.random.default_rng(tr_ss)

    def reset(self, seed=None):
        if seed is not None:
            self.seed(seed)
        return self.sim.reset()

    @property
    def state(self):
        return self.sim.state

    @state.setter
    def state(self, value):
        if hasattr(self, "sim"):
            self.sim.state = value

    def get_state(self):
        return self.sim.get_state()

    def set_state(self, state) -> None:
        self.sim.set_state(state)

    def step(self, action):
        s = self.sim.get_state()
        if not self.discrete:
            action = self.sim.clip_action(action)
        b, _, _ = self.transformer.sample(s, action, self.rng, self.deterministic)
        self.last_transformed_action = b
        sp, r, done, info = self.sim.step(b)
        info = dict(info, transformed_action=b)
        return sp, r, done, info

    def clip_action(self, action):
        return self.sim.clip_action(action)

    def space_descriptor(self) -> dict:
        return self.sim.space_descriptor()

    def features(self, obs):
        return self.sim.features(obs)


def grounded_transition(T_sim, transformer) -> np.ndarray:
    """``T_g[s, a, s'] = sum_b T_sim[s, b, s'] * pi_g[s, a, b]``."""
    T_sim = np.asarray(T_sim, dtype=np.float64)
    probs = transformer.table().probs if hasattr(transformer, "table") else np.asarray(transformer)
    if probs.shape != (T_sim.shape[0], T_sim.shape[1], T_sim.shape[1]):
        raise ValueError(f"transformer shape {probs.shape} incompatible with T_sim {T_sim.shape}")
    return np.einsum("sbp,sab->sap", T_sim, probs)


def grounded_mdp(sim: TabularMDP, transformer) -> TabularMDP:
    return sim.with_transition(grounded_transition(sim.transition, transformer))


def grounded_marginal(sim: TabularMDP, agent_policy: TabularPolicy, transformer) -> MarginalTransitionDistribution:
    return marginal_transition_distribution(grounded_mdp(sim, transformer), agent_policy)


class AtMdp:
    """Action-transformation MDP over joint states ``x = (s, a)``.

    ``x`` is indexed as ``s * n_actions + a``.  The reward and discount of
    this MDP play no role in grounding; they are kept as zero reward and the
    simulator's discount so that ``as_tabular_mdp`` yields a valid MDP.
    """

    def __init__(self, sim: TabularMDP, agent_policy: TabularPolicy):
        if agent_policy.probs.shape != (sim.n_states, sim.n_actions):
            raise ValueError("agent policy does not match the simulator")
        self.sim = sim
        self.agent_policy = agent_policy
        S, A = sim.n_states, sim.n_actions
        self.n_states = S * A
        self.n_actions = A
        # Tx[(s,a), b, (s',a')] = T_sim[s, b, s'] * pi(a'|s')
        Tx = sim.transition[:, None, :, :, None] * agent_policy.probs[None, None, None, :, :]
        Tx = np.broadcast_to(Tx, (S, A, A, S, A)).reshape(S * A, A, S * A)
        self.transition = Tx
        self.initial_dist = (sim.initial_dist[:, None] * agent_policy.probs).ravel()
        self.reward = np.zeros_like(Tx)
        self.discount = sim.discount

    def index(self, s: int, a: int) -> int:
        return int(s) * self.sim.n_actions + int(a)

    def split(self, x: int) -> tuple[int, int]:
        return divmod(int(x), self.sim.n_actions)

    def as_tabular_mdp(self) -> TabularMDP:
        return TabularMDP(self.transition, self.reward, self.discount, self.initial_dist)

    def transformer_as_policy(self, transformer) -> TabularPolicy:
        return TabularPolicy(transformer.table().probs.reshape(self.n_states, self.n_actions))

    def rollout(self, transformer, n_steps: int, env_rng, agent_rng, transformer_rng):
        """Sample ``n_steps`` (s, a, s') triples, drawing s' then a' hierarchically."""
        sim, pi = self.sim, self.agent_policy.probs
        cum_T = np.cumsum(sim.transition, axis=2)
        cum_pi = np.cumsum(pi, axis=1)
        draw = lambda cum, rng: int(min(np.searchsorted(cum, rng.random(), side="right"), cum.size - 1))
        s = draw(np.cumsum(sim.initial_dist), env_rng)
        a = draw(cum_pi[s], agent_rng)
        out = []
        for _ in range(n_steps):
            b, _, _ = transformer.sample(s, a, transformer_rng)
            sp = draw(cum_T[s, b], env_rng)
            out.append((s, a, sp))
            s, a = sp, draw(cum_pi[sp], agent_rng)
        return out


def build_at_mdp(sim: TabularMDP, agent_policy: TabularPolicy) -> AtMdp:
    return AtMdp(sim, agent_policy)


def grounded_stream(sim: TabularMDP, agent_policy: TabularPolicy, transformer, n_steps: int,
                    env_rng, agent_rng, transformer_rng):
    """(s, a, s') stream of the grounded simulator, same draw order as ``AtMdp.rollout``."""
    from .envs import TabularEnv

    env = GroundedEnvironment(TabularEnv(sim, horizon=n_steps + 1), transformer)
    env.sim.rng = env_rng
    env.rng = transformer_rng
    cum_pi = np.cumsum(agent_policy.probs, axis=1)
    draw = lambda cum: int(min(np.searchsorted(cum, agent_rng.random(), side="right"), cum.size - 1))
    s = env.sim._initial_state()
    env.sim.state = s
    a = draw(cum_pi[s])
    out = []
    for _ in range(n_steps):
        sp, _, _, _ = env.step(a)
        out.append((s, a, sp))
        s, a = sp, draw(cum_pi[sp])
    return out


def realizing_transformer(T_sim, T_real, tol: float = 1e-9):
    """Per-(s, a) simplex weights w with sum_b w_b T_sim[s, b] = T_real[s, a].

    Solved by non-negative least squares with a heavily weighted sum-to-one
    row.  Returns ``(transformer, max_residual)``; a residual above ``tol``
    means the real dynamics are not expressible as an action mixture.
    """
    T_sim = np.asarray(T_sim, dtype=np.float64)
    T_real = np.asarray(T_real, dtype=np.float64)
    S, A, _ = T_sim.shape
    probs = np.zeros((S, A, A))
    worst = 0.0
    big = 1e3
    for s in range(S):
        M = np.vstack([T_sim[s].T, big * np.ones((1, A))])
        for a in range(A):
            w, _ = nnls(M, np.concatenate([T_real[s, a], [big]]))
            w = np.clip(w, 0.0, None)
            w /= w.sum()
            probs[s, a] = w
            worst = max(worst, float(np.max(np.abs(T_sim[s].T @ w - T_real[s, a]))))
    return TabularActionTransformer(probs), worst
