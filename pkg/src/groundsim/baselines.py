"""Comparison methods: grounded action transformation (GAT) and action-noise envelope (ANE).

GAT composes a forward model of the real dynamics with an inverse model of
the simulator: ``a_sim = inverse_sim(s, forward_real(s, a))``.  The smoothing
parameter ``alpha`` is read as a convex combination toward the agent's own
action (continuous) or a mixture with it (tabular).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .envs import Environment, count_transitions, evaluate_policy, rollout, stack_transitions
from .grounding import TabularActionTransformer
from .nn import Adam, Mlp
from .ppo import AgentTrainConfig, AgentTrainer

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- regressors

class MlpRegressor(BaseEstimator, RegressorMixin):
    """Standardised-input, standardised-target tanh MLP trained on squared error."""

    def __init__(self, hidden=(64, 64), learning_rate: float = 1e-3, epochs: int = 200, batch_size: int = 256,
                 seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if len(X) < 1 or len(X) != len(y):
            raise ValueError("need at least one (input, target) pair with matching lengths")
        init_ss, perm_ss = np.random.SeedSequence(self.seed).spawn(2)
        self.x_mean_, self.x_scale_ = X.mean(0), np.where(X.std(0) > 1e-8, X.std(0), 1.0)
        self.y_mean_, self.y_scale_ = y.mean(0), np.where(y.std(0) > 1e-8, y.std(0), 1.0)
        Z, Y = (X - self.x_mean_) / self.x_scale_, (y - self.y_mean_) / self.y_scale_
        net = Mlp([X.shape[1], *self.hidden, y.shape[1]], rng=np.random.default_rng(init_ss))
        opt = Adam(net.params, lr=self.learning_rate)
        rng = np.random.default_rng(perm_ss)
        n = len(Z)
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            for i in range(0, n, self.batch_size):
                idx = perm[i:i + self.batch_size]
                err = net.forward(Z[idx]) - Y[idx]
                opt.step(net.backward(err / idx.size))
        self.net_ = net
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        Z = (np.asarray(X, dtype=np.float64) - self.x_mean_) / self.x_scale_
        return self.net_.predict(Z) * self.y_scale_ + self.y_mean_

    def to_dict(self) -> dict:
        return {"net": self.net_.to_dict(), "x_mean": self.x_mean_.tolist(), "x_scale": self.x_scale_.tolist(),
                "y_mean": self.y_mean_.tolist(), "y_scale": self.y_scale_.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpRegressor":
        reg = cls()
        reg.net_ = Mlp.from_dict(doc["net"])
        for k in ("x_mean", "x_scale", "y_mean", "y_scale"):
            setattr(reg, k + "_", np.asarray(doc[k], dtype=np.float64))
        reg.n_features_in_ = reg.net_.sizes[0]
        return reg


def _require(n: int, what: str):
    if n < 1:
        raise ValueError(f"{what} needs at least one transition")


class ForwardModel(BaseEstimator):
    """Predicts ``s'`` from ``(s, a)``.

    Tabular: Laplace-smoothed counts, ``predict_proba`` gives ``T(.|s, a)``.
    Continuous: MLP on ``(s, a)`` regressing ``s' - s``.
    """

    def __init__(self, n_states: int | None = None, n_actions: int | None = None, pseudocount: float = 1e-9,
                 regressor: MlpRegressor | None = None):
        self.n_states = n_states
        self.n_actions = n_actions
        self.pseudocount = pseudocount
        self.regressor = regressor

    @property
    def tabular(self) -> bool:
        return self.n_states is not None

    def fit(self, states, actions, next_states):
        _require(len(states), "forward model")
        if self.tabular:
            counts = np.full((self.n_states, self.n_actions, self.n_states), self.pseudocount)
            np.add.at(counts, (np.asarray(states, int), np.asarray(actions, int), np.asarray(next_states, int)), 1.0)
            self.visited_ = counts.sum(axis=2) > self.n_states * self.pseudocount
            self.table_ = counts / counts.sum(axis=2, keepdims=True)
        else:
            s = np.asarray(states, dtype=np.float64)
            X = np.concatenate([s, np.asarray(actions, dtype=np.float64).reshape(len(s), -1)], axis=1)
            self.regressor_ = (self.regressor or MlpRegressor()).fit(X, np.asarray(next_states) - s)
        return self

    def predict_proba(self, states, actions) -> np.ndarray:
        check_is_fitted(self, "table_")
        return self.table_[np.asarray(states, int), np.asarray(actions, int)]

    def predict(self, states, actions) -> np.ndarray:
        if self.tabular:
            return np.argmax(self.predict_proba(states, actions), axis=-1)
        check_is_fitted(self, "regressor_")
        s = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions, dtype=np.float64).reshape(len(s), -1)
        return s + self.regressor_.predict(np.concatenate([s, a], axis=1))


class InverseModel(BaseEstimator):
    """Predicts the action that takes ``s`` to ``s'``.

    Tabular: Laplace-smoothed conditional ``p(a | s, s')`` (uniform where
    unvisited).  Continuous: deterministic MLP regression on ``(s, s' - s)``.
    """

    def __init__(self, n_states: int | None = None, n_actions: int | None = None, pseudocount: float = 1e-9,
                 regressor: MlpRegressor | None = None, action_low=-1.0, action_high=1.0):
        self.n_states = n_states
        self.n_actions = n_actions
        self.pseudocount = pseudocount
        self.regressor = regressor
        self.action_low = action_low
        self.action_high = action_high

    @property
    def tabular(self) -> bool:
        return self.n_states is not None

    def fit(self, states, actions, next_states):
        _require(len(states), "inverse model")
        if self.tabular:
            counts = np.full((self.n_states, self.n_states, self.n_actions), self.pseudocount)
            np.add.at(counts, (np.asarray(states, int), np.asarray(next_states, int), np.asarray(actions, int)), 1.0)
            self.table_ = counts / counts.sum(axis=2, keepdims=True)
        else:
            s = np.asarray(states, dtype=np.float64)
            X = np.concatenate([s, np.asarray(next_states) - s], axis=1)
            self.regressor_ = (self.regressor or MlpRegressor()).fit(X, np.asarray(actions, dtype=np.float64))
        return self

    def predict_proba(self, states, next_states) -> np.ndarray:
        check_is_fitted(self, "table_")
        return self.table_[np.asarray(states, int), np.asarray(next_states, int)]

    def predict(self, states, next_states) -> np.ndarray:
        if self.tabular:
            return np.argmax(self.predict_proba(states, next_states), axis=-1)
        check_is_fitted(self, "regressor_")
        s = np.asarray(states, dtype=np.float64)
        X = np.concatenate([s, np.asarray(next_states) - s], axis=1)
        return np.clip(self.regressor_.predict(X), self.action_low, self.action_high)


# ---------------------------------------------------------------- GAT

@dataclass
class GatConfig:
    alpha: float = 0.95
    hidden: tuple = (64, 64)
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 256
    pseudocount: float = 1e-9
    sim_episodes: int = 50

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)


class GatTransformer:
    """Deterministic continuous GAT transformer ``alpha * a_inv + (1 - alpha) * a``."""

    def __init__(self, forward: ForwardModel, inverse: InverseModel, alpha: float, low=-1.0, high=1.0):
        self.forward = forward
        self.inverse = inverse
        self.alpha = alpha
        self.low = low
        self.high = high

    def transform(self, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64).reshape(len(states), -1)
        target = self.forward.predict(states, actions)
        a_inv = self.inverse.predict(states, target)
        return np.clip(self.alpha * a_inv + (1.0 - self.alpha) * actions, self.low, self.high)

    def sample(self, s, a, rng=None, deterministic: bool = True):
        b = self.transform(np.asarray(s, dtype=np.float64)[None], np.asarray(a, dtype=np.float64)[None])[0]
        return b, b, 0.0

    def to_dict(self) -> dict:
        return {"kind": "action_transformer", "residual": False, "tabular": False, "method": "gat",
                "alpha": self.alpha, "low": self.low, "high": self.high,
                "forward": self.forward.regressor_.to_dict(), "inverse": self.inverse.regressor_.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "GatTransformer":
        fwd, inv = ForwardModel(), InverseModel(action_low=doc["low"], action_high=doc["high"])
        fwd.regressor_ = MlpRegressor.from_dict(doc["forward"])
        inv.regressor_ = MlpRegressor.from_dict(doc["inverse"])
        return cls(fwd, inv, doc["alpha"], doc["low"], doc["high"])


def gat_ground(sim: Environment, real_trajectories, sim_trajectories, config: GatConfig | None = None, seed: int = 0):
    """Fits the forward (real) and inverse (sim) models and composes them."""
    cfg = config or GatConfig()
    _require(count_transitions(real_trajectories), "GAT real data")
    _require(count_transitions(sim_trajectories), "GAT sim data")
    rs, ra, rsp = stack_transitions(real_trajectories)
    ss_, sa, ssp = stack_transitions(sim_trajectories)
    f_seed, i_seed = np.random.SeedSequence(seed).generate_state(2)
    if sim.discrete:
        S, A = sim.n_states, sim.n_actions
        fwd = ForwardModel(S, A, cfg.pseudocount).fit(rs, ra, rsp)
        inv = InverseModel(S, A, cfg.pseudocount).fit(ss_, sa, ssp)
        # pi_g(b | s, a) = sum_s' T_real(s'|s,a) p_sim(b | s, s')
        composed = np.einsum("sap,spb->sab", fwd.table_, inv.table_)
        probs = cfg.alpha * composed + (1.0 - cfg.alpha) * np.eye(A)[None]
        return TabularActionTransformer(probs)

    def reg(s):
        return MlpRegressor(cfg.hidden, cfg.learning_rate, cfg.epochs, cfg.batch_size, seed=int(s))

    fwd = ForwardModel(regressor=reg(f_seed)).fit(rs, ra, rsp)
    inv = InverseModel(regressor=reg(i_seed), action_low=sim.action_low, action_high=sim.action_high).fit(ss_, sa, ssp)
    return GatTransformer(fwd, inv, cfg.alpha, sim.action_low, sim.action_high)


class GatGrounder(BaseEstimator):
    """Estimator wrapper: collects sim data with the agent, then fits GAT."""

    def __init__(self, config: GatConfig | None = None, seed: int = 0):
        self.config = config
        self.seed = seed

    def fit(self, sim: Environment, real_trajectories, agent_policy, sim_trajectories=None):
        cfg = self.config or GatConfig()
        if sim_trajectories is None:
            sim_trajectories = rollout(sim, agent_policy, cfg.sim_episodes, seed=[self.seed, 1])
        self.sim_transitions_ = count_transitions(sim_trajectories)
        self.transformer_ = gat_ground(sim, real_trajectories, sim_trajectories, cfg, seed=self.seed)
        return self


# ---------------------------------------------------------------- ANE

@dataclass
class AneConfig:
    stds: list = field(default_factory=lambda: [0.1, 0.3, 0.5])
    eval_episodes: int = 50

    def __post_init__(self):
        if not self.stds:
            raise ValueError("ANE needs at least one noise level")
        if any(s < 0 for s in self.stds):
            raise ValueError("noise standard deviations must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


SWEEP_COLUMNS = ("method", "hyperparam", "seed", "real_return", "sim_return", "real_transitions_used")


def ane_train(sim: Environment, real: Environment, std_list, agent_config: AgentTrainConfig | None = None,
              total_timesteps: int = 100_000, seeds=(0,), eval_episodes: int = 50, initial_policies=None):
    """Sweeps action-noise levels; returns ``(best_policy, best_std, table)``.

    Each (std, seed) cell trains in ``sim`` with N(0, std^2) noise on the
    executed action and is evaluated in ``real``.  The best std is the one
    with the highest seed-mean real return; the returned policy is that
    std's best seed.  ANE uses no real training data.
    """
    if not std_list:
        raise ValueError("ANE needs at least one noise level")
    base = agent_config or AgentTrainConfig()
    rows, policies = [], {}
    for std in std_list:
        if std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        cfg = AgentTrainConfig(**{**base.to_dict(), "action_noise_std": float(std)})
        for i, seed in enumerate(seeds):
            init = None if initial_policies is None else initial_policies[i]
            policy = AgentTrainer(cfg, total_timesteps, seed).fit(sim, init).policy_
            real_ret = evaluate_policy(real, policy, eval_episodes, seed=[seed, 99])[0]
            sim_ret = evaluate_policy(sim, policy, eval_episodes, seed=[seed, 99])[0]
            rows.append({"method": "ane", "hyperparam": float(std), "seed": seed, "real_return": real_ret,
                         "sim_return": sim_ret, "real_transitions_used": 0})
            policies[(float(std), seed)] = policy
    means = {}
    for r in rows:
        means.setdefault(r["hyperparam"], []).append(r["real_return"])
    best_std = max(means, key=lambda k: (np.mean(means[k]), -k))
    best_row = max((r for r in rows if r["hyperparam"] == best_std), key=lambda r: r["real_return"])
    return policies[(best_std, best_row["seed"])], best_std, rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["method"], repr(r["hyperparam"]), r["seed"], repr(float(r["real_return"])),
                        repr(float(r["sim_return"])), r["real_transitions_used"]])
