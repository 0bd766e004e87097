"""Clipped-surrogate policy optimisation with GAE(lambda) advantages.

The same optimizer trains the agent policy and the action transformer.  The
agent-side defaults keep the discount/lambda/batch values of the TRPO setup
used for agents in the original experiments; the trust-region step itself is
replaced by PPO clipping.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .envs import Environment, evaluate_policy
from .nn import Adam, CategoricalPolicy, GaussianPolicy, Mlp

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    minibatches: int = 2
    epochs: int = 1
    lam: float = 0.95
    gamma: float = 0.99
    clip_ratio: float = 0.1
    batch_timesteps: int = 5000
    learning_rate: float = 3e-4
    vf_learning_rate: float = 1e-3
    vf_epochs: int = 5
    entropy_coef: float = 0.0
    max_grad_norm: float | None = 0.5
    anneal_lr: bool = False

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not (0.0 <= self.gamma < 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma must lie in [0, 1) and lam in [0, 1]")
        if self.minibatches < 1 or self.epochs < 1 or self.batch_timesteps < 1:
            raise ValueError("minibatches, epochs and batch_timesteps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AgentTrainConfig(PpoConfig):
    """Agent-side settings: discount, lambda, batch and value-function values
    follow the agent table; clip/epochs/minibatches are PPO-lite choices."""

    gamma: float = 0.995
    lam: float = 0.97
    batch_timesteps: int = 5000
    learning_rate: float = 4e-4
    vf_learning_rate: float = 1e-3
    vf_epochs: int = 5
    clip_ratio: float = 0.2
    epochs: int = 10
    minibatches: int = 8
    hidden: tuple = (64, 64)
    log_std_init: float = float(np.log(0.5))
    eval_episodes: int = 5
    action_noise_std: float = 0.0


def gae(rewards, values, next_values, dones, terminals, gamma: float, lam: float):
    """Generalized advantage estimates and lambda-returns.

    ``dones`` marks any episode boundary (including batch cut-offs and time
    limits); ``terminals`` marks true termination, where no bootstrap is used.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n = rewards.size
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        bootstrap = 0.0 if terminals[t] else gamma * next_values[t]
        delta = rewards[t] + bootstrap - values[t]
        last = delta + (0.0 if dones[t] else gamma * lam * last)
        adv[t] = last
    return adv, adv + np.asarray(values)


def clipped_surrogate(ratio, advantages, clip_ratio: float):
    """Per-sample ``min(r A, clip(r, 1 - c, 1 + c) A)`` and its derivative w.r.t. log-prob.

    The derivative is ``r A`` where the unclipped term is active and 0 where
    the clipped term wins.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * a
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * a
    active = unclipped <= clipped
    return np.minimum(unclipped, clipped), np.where(active, unclipped, 0.0)


def make_value_function(obs_dim: int, hidden=(64, 64), rng=None) -> Mlp:
    return Mlp([obs_dim, *hidden, 1], rng=rng, output_gain=1.0)


class PPO:
    """Holds optimizer state for one (policy, value function) pair."""

    def __init__(self, policy, value_fn: Mlp, config: PpoConfig, rng=None, total_updates: int | None = None):
        self.policy = policy
        self.value_fn = value_fn
        self.config = config
        self.rng = np.random.default_rng(rng)
        self.total_updates = total_updates
        self.n_updates = 0
        self.pi_opt = Adam(policy.params, lr=config.learning_rate, max_grad_norm=config.max_grad_norm)
        self.vf_opt = Adam(value_fn.params, lr=config.vf_learning_rate, max_grad_norm=config.max_grad_norm)

    def update(self, batch: dict) -> dict:
        cfg = self.config
        obs = np.asarray(batch["obs"], dtype=np.float64)
        n = obs.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        for key in ("obs", "actions", "rewards", "logp", "next_obs"):
            if not np.all(np.isfinite(np.asarray(batch[key], dtype=np.float64))):
                raise ValueError(f"non-finite values in batch[{key!r}]")
        actions = np.asarray(batch["actions"])
        old_logp = np.asarray(batch["logp"], dtype=np.float64)
        values = self.value_fn.predict(obs)[:, 0]
        next_values = self.value_fn.predict(np.asarray(batch["next_obs"], dtype=np.float64))[:, 0]
        adv, returns = gae(batch["rewards"], values, next_values, batch["dones"], batch["terminals"],
                           cfg.gamma, cfg.lam)
        if "advantages" in batch:
            adv = np.asarray(batch["advantages"], dtype=np.float64)
        if n > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        if cfg.anneal_lr and self.total_updates:
            # linear decay to zero over the planned number of updates
            frac = max(0.0, 1.0 - self.n_updates / self.total_updates)
            self.pi_opt.lr = cfg.learning_rate * frac
            self.vf_opt.lr = cfg.vf_learning_rate * frac
        self.n_updates += 1
        ratio0 = np.exp(self.policy.log_prob(obs, actions) - old_logp)
        clipped = []
        for _ in range(cfg.epochs):
            for idx in self._minibatches(n):
                m = idx.size
                lp = self.policy.log_prob(obs[idx], actions[idx])
                ratio = np.exp(lp - old_logp[idx])
                _, d_obj = clipped_surrogate(ratio, adv[idx], cfg.clip_ratio)
                clipped.append(np.mean(np.abs(ratio - 1.0) > cfg.clip_ratio))
                coef = -d_obj / m
                _, grads = self.policy.log_prob_and_grad(obs[idx], actions[idx], coef)
                if cfg.entropy_coef and isinstance(self.policy, GaussianPolicy):
                    grads[-1] = grads[-1] - cfg.entropy_coef * np.ones_like(self.policy.log_std)
                self.pi_opt.step(grads)

        vf_loss = 0.0
        for _ in range(cfg.vf_epochs):
            for idx in self._minibatches(n):
                pred = self.value_fn.forward(obs[idx])[:, 0]
                err = pred - returns[idx]
                vf_loss = 0.5 * float(np.mean(err ** 2))
                self.vf_opt.step(self.value_fn.backward((err / idx.size)[:, None]))

        new_logp = self.policy.log_prob(obs, actions)
        return {
            "approx_kl": float(np.mean(old_logp - new_logp)),
            "clip_fraction": float(np.mean(clipped)) if clipped else 0.0,
            "initial_ratio_dev": float(np.max(np.abs(ratio0 - 1.0))),
            "value_loss": vf_loss,
            "mean_reward": float(np.mean(batch["rewards"])),
        }

    def _minibatches(self, n: int):
        perm = self.rng.permutation(n)
        return [chunk for chunk in np.array_split(perm, min(self.config.minibatches, n)) if chunk.size]


def ppo_update(policy, value_fn, batch: dict, config: PpoConfig, learner: PPO | None = None, rng=None) -> dict:
    """One PPO update in place; pass ``learner`` to keep Adam state across calls."""
    if learner is None:
        learner = PPO(policy, value_fn, config, rng=rng)
    return learner.update(batch)


class Collector:
    """Steps one environment with a policy, carrying episodes across batches."""

    def __init__(self, env: Environment, policy, rng, action_noise_std: float = 0.0):
        self.env = env
        self.policy = policy
        self.rng = rng
        self.action_noise_std = action_noise_std
        self.obs = None
        self.ep_return = 0.0
        self.ep_len = 0

    def collect(self, n_steps: int) -> tuple[dict, list]:
        env, rng = self.env, self.rng
        feats, acts, logps, rews, dones, terms, next_feats = [], [], [], [], [], [], []
        finished = []
        if self.obs is None:
            self.obs = env.reset()
        for t in range(n_steps):
            f = env.features(self.obs)
            raw, logp = self.policy.act(f, rng)
            if env.discrete:
                env_action = int(raw)
            else:
                executed = raw
                if self.action_noise_std > 0.0:
                    executed = raw + self.action_noise_std * rng.standard_normal(np.shape(raw))
                env_action = env.clip_action(executed)
            nxt, r, done, info = env.step(env_action)
            self.ep_return += r
            self.ep_len += 1
            feats.append(f)
            acts.append(raw)
            logps.append(logp)
            rews.append(r)
            terms.append(info["terminal"])
            next_feats.append(env.features(nxt))
            cut = done or t == n_steps - 1
            dones.append(cut)
            if done:
                finished.append((self.ep_return, self.ep_len))
                self.ep_return, self.ep_len = 0.0, 0
                self.obs = env.reset()
            else:
                self.obs = nxt
        batch = {
            "obs": np.array(feats), "actions": np.array(acts), "logp": np.array(logps),
            "rewards": np.array(rews), "dones": np.array(dones), "terminals": np.array(terms),
            "next_obs": np.array(next_feats),
        }
        return batch, finished


def make_policy(env: Environment, hidden=(64, 64), log_std_init: float = float(np.log(0.5)), rng=None):
    if env.discrete:
        return CategoricalPolicy(env.n_states, env.n_actions, hidden=hidden, rng=rng)
    return GaussianPolicy(env.observation_dim, env.action_dim, hidden=hidden, log_std_init=log_std_init, rng=rng)


class AgentTrainer(BaseEstimator):
    """Trains an agent policy in ``env``; keeps the best policy seen in evaluation.

    After ``fit``: ``policy_`` (best-so-far), ``learning_curve_`` rows of
    ``(timestep, mean_return, std_return)`` and ``best_return_``.
    """

    def __init__(self, config: AgentTrainConfig | None = None, total_timesteps: int = 200_000,
                 seed: int = 0, eval_env: Environment | None = None):
        self.config = config
        self.total_timesteps = total_timesteps
        self.seed = seed
        self.eval_env = eval_env

    def fit(self, env: Environment, policy=None):
        cfg = self.config or AgentTrainConfig()
        ss = np.random.SeedSequence(self.seed)
        init_ss, env_ss, col_ss, ppo_ss, eval_ss = ss.spawn(5)
        if policy is None:
            policy = make_policy(env, cfg.hidden, cfg.log_std_init, rng=np.random.default_rng(init_ss))
        else:
            policy = policy.copy()
        obs_dim = env.n_states if env.discrete else env.observation_dim
        value_fn = make_value_function(obs_dim, cfg.hidden, rng=np.random.default_rng(init_ss.spawn(1)[0]))
        learner = PPO(policy, value_fn, cfg, rng=np.random.default_rng(ppo_ss))
        env.seed(np.random.default_rng(env_ss))
        collector = Collector(env, policy, np.random.default_rng(col_ss), cfg.action_noise_std)
        eval_env = self.eval_env if self.eval_env is not None else env
        eval_seed = int(np.random.default_rng(eval_ss).integers(2 ** 31))

        def evaluate():
            return evaluate_policy(eval_env, policy, cfg.eval_episodes, seed=eval_seed)

        best_mean, best_std = evaluate()
        best = policy.copy()
        curve = [(0, best_mean, best_std)]
        steps = 0
        self.diagnostics_ = []
        while steps < self.total_timesteps:
            n = min(cfg.batch_timesteps, self.total_timesteps - steps)
            batch, _ = collector.collect(n)
            steps += n
            self.diagnostics_.append(learner.update(batch))
            mean, std = evaluate()
            curve.append((steps, mean, std))
            log.debug("step %d eval return %.2f", steps, mean)
            if mean >= best_mean:
                best_mean, best = mean, policy.copy()
        self.policy_ = best
        self.value_fn_ = value_fn
        self.learning_curve_ = curve
        self.best_return_ = best_mean
        return self


def train_agent(env: Environment, config: AgentTrainConfig | None = None, total_timesteps: int = 200_000,
                seed: int = 0, policy=None, eval_env: Environment | None = None):
    """Train an agent policy; returns the best-so-far policy."""
    trainer = AgentTrainer(config, total_timesteps, seed, eval_env).fit(env, policy)
    return trainer.policy_
