"""Sim / "real" environment pairs with controlled dynamics mismatch.

Two families ship with the package: a slippery gridworld whose dynamics are
available as an exact :class:`~groundsim.mdp.TabularMDP`, and a torque-driven
inverted pendulum integrated with semi-implicit Euler.  The "real" member of a
pair is the same simulator with one physical property changed.

All environments support ``set_state``, which the per-step transition error
metric needs.  Physical robots do not offer this; it is a simulator-only
capability.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMDP


@dataclass(frozen=True)
class ModificationRecord:
    property_name: str
    default_value: float
    modified_value: float

    def __post_init__(self):
        if self.default_value == self.modified_value:
            raise ValueError("modified value must differ from the default")


# Values from the InvertedPendulumHeavy row of the modified-environment table;
# the remaining rows need physics this package does not model.
PENDULUM_MASS_DEFAULT = 4.89
PENDULUM_MASS_MODIFIED = 100.0


class Environment:
    """Minimal stepping interface shared by every environment.

    ``step`` returns ``(next_state, reward, done, info)`` where
    ``info["terminal"]`` separates true termination from the time limit.
    """

    discrete = False
    horizon: int

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self._t = 0
        self.state = None

    def seed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def reset(self, seed=None):
        if seed is not None:
            self.seed(seed)
        self._t = 0
        self.state = self._initial_state()
        return self.get_state()

    def get_state(self):
        return np.array(self.state, copy=True) if not self.discrete else int(self.state)

    def set_state(self, state) -> None:
        """Place the environment in ``state``; the episode clock restarts."""
        self._check_state(state)
        self.state = np.array(state, dtype=np.float64) if not self.discrete else int(state)
        self._t = 0

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        next_state, reward, terminal = self._transition(self.state, action)
        self.state = next_state
        self._t += 1
        truncated = self._t >= self.horizon
        return self.get_state(), reward, bool(terminal or truncated), {"terminal": bool(terminal)}

    def space_descriptor(self) -> dict:
        raise NotImplementedError

    def features(self, obs) -> np.ndarray:
        """Float encoding of observations fed to networks."""
        raise NotImplementedError


class TabularEnv(Environment):
    """Samples transitions from an explicit transition tensor."""

    discrete = True

    def __init__(self, mdp: TabularMDP, horizon: int = 100, terminal_states=(), seed=None):
        super().__init__(seed)
        self.mdp = mdp
        self.horizon = int(horizon)
        self.terminal_states = frozenset(int(s) for s in terminal_states)
        self._cum_T = np.cumsum(mdp.transition, axis=2)
        self._cum_rho0 = np.cumsum(mdp.initial_dist)

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def tabular_view(self) -> TabularMDP:
        return self.mdp

    def _draw(self, cum):
        return int(min(np.searchsorted(cum, self.rng.random(), side="right"), cum.size - 1))

    def _initial_state(self):
        return self._draw(self._cum_rho0)

    def _check_state(self, state):
        if not (isinstance(state, (int, np.integer)) and 0 <= state < self.n_states):
            raise ValueError(f"state {state!r} outside 0..{self.n_states - 1}")

    def _transition(self, s, a):
        a = int(a)
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {a} outside 0..{self.n_actions - 1}")
        sp = self._draw(self._cum_T[s, a])
        return sp, float(self.mdp.reward[s, a, sp]), sp in self.terminal_states

    def space_descriptor(self) -> dict:
        return {"type": "discrete", "n_states": self.n_states, "n_actions": self.n_actions}

    def features(self, obs) -> np.ndarray:
        return np.eye(self.n_states)[np.asarray(obs, dtype=int)]


GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


def gridworld_transition(size: int, slip: float) -> np.ndarray:
    """Grid moves; with probability ``slip`` the move is replaced by a uniform one.

    The bottom-right goal cell is absorbing.  Moves into walls stay put.
    """
    if not 0.0 <= slip <= 1.0:
        raise ValueError(f"slip must be a probability, got {slip}")
    n = size * size
    base = np.zeros((n, 4, n))
    for s in range(n):
        r, c = divmod(s, size)
        for a, (dr, dc) in enumerate(GRID_MOVES):
            rr = min(max(r + dr, 0), size - 1)
            cc = min(max(c + dc, 0), size - 1)
            base[s, a, rr * size + cc] = 1.0
    uniform = base.mean(axis=1, keepdims=True)
    T = (1.0 - slip) * base + slip * uniform
    goal = n - 1
    T[goal] = 0.0
    T[goal, :, goal] = 1.0
    return T


def gridworld_mdp(size: int, slip: float, discount: float = 0.95) -> TabularMDP:
    if size < 2:
        raise ValueError("gridworld size must be at least 2")
    n = size * size
    goal = n - 1
    T = gridworld_transition(size, slip)
    R = np.zeros_like(T)
    R[:, :, goal] = 1.0
    R[goal] = 0.0
    rho0 = np.zeros(n)
    rho0[0] = 1.0
    return TabularMDP(T, R, discount, rho0)


class GridworldEnv(TabularEnv):
    def __init__(self, size: int = 4, slip: float = 0.0, horizon: int | None = None,
                 discount: float = 0.95, terminate_at_goal: bool = True, seed=None):
        self.size = int(size)
        self.slip = float(slip)
        mdp = gridworld_mdp(size, slip, discount)
        goal = (mdp.n_states - 1,) if terminate_at_goal else ()
        super().__init__(mdp, horizon or 4 * size * size, terminal_states=goal, seed=seed)


class PendulumEnv(Environment):
    """Torque-actuated inverted pendulum, state ``(theta, theta_dot)``.

    ``theta_ddot = (m g l sin(theta) + u * max_torque) / (rotor_inertia + m l^2)``

    The fixed rotor inertia makes the bob mass change both the gravity pull
    and the control authority.  Actions are normalised torques, clipped to
    [-1, 1].  Reward is 1 for every step that ends upright; leaving
    ``|theta| < threshold`` terminates the episode.
    """

    action_low = -1.0
    action_high = 1.0
    observation_dim = 2
    action_dim = 1

    def __init__(self, mass: float = PENDULUM_MASS_DEFAULT, dt: float = 0.02, horizon: int = 200,
                 length: float = 1.0, gravity: float = 9.81, rotor_inertia: float = 50.0,
                 max_torque: float = 254.0, threshold: float = 0.2, init_range: float = 0.05,
                 max_speed: float = 50.0, seed=None):
        super().__init__(seed)
        if mass <= 0:
            raise ValueError("mass must be positive")
        if not 0 < dt <= 0.1:
            raise ValueError("dt must lie in (0, 0.1]")
        self.mass = float(mass)
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.length = float(length)
        self.gravity = float(gravity)
        self.rotor_inertia = float(rotor_inertia)
        self.max_torque = float(max_torque)
        self.threshold = float(threshold)
        self.init_range = float(init_range)
        self.max_speed = float(max_speed)
        self.obs_scale = np.array([1.0 / threshold, 1.0])

    @property
    def inertia(self) -> float:
        return self.rotor_inertia + self.mass * self.length ** 2

    def _initial_state(self):
        return self.rng.uniform(-self.init_range, self.init_range, size=2)

    def _check_state(self, state):
        s = np.asarray(state, dtype=np.float64)
        if s.shape != (2,) or not np.all(np.isfinite(s)):
            raise ValueError(f"pendulum state must be a finite 2-vector, got {state!r}")
        if abs(s[0]) > math.pi or abs(s[1]) > self.max_speed:
            raise ValueError(f"pendulum state {s} out of bounds")

    def angular_acceleration(self, theta, u):
        torque = np.clip(u, self.action_low, self.action_high) * self.max_torque
        return (self.mass * self.gravity * self.length * np.sin(theta) + torque) / self.inertia

    def dynamics(self, state, action) -> np.ndarray:
        """One semi-implicit Euler step; vectorised over leading axes."""
        state = np.asarray(state, dtype=np.float64)
        u = np.asarray(action, dtype=np.float64)[..., 0]
        theta, theta_dot = state[..., 0], state[..., 1]
        theta_dot = np.clip(theta_dot + self.dt * self.angular_acceleration(theta, u),
                            -self.max_speed, self.max_speed)
        theta = theta + self.dt * theta_dot
        return np.stack([theta, theta_dot], axis=-1)

    def _transition(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(1), self.action_low, self.action_high)
        nxt = self.dynamics(state, a)
        fallen = abs(nxt[0]) >= self.threshold
        return nxt, 0.0 if fallen else 1.0, fallen

    def clip_action(self, action) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64).reshape(-1), self.action_low, self.action_high)

    def energy(self, state) -> float:
        theta, theta_dot = state
        return 0.5 * self.inertia * theta_dot ** 2 + self.mass * self.gravity * self.length * math.cos(theta)

    def space_descriptor(self) -> dict:
        return {"type": "box", "observation_dim": 2, "action_dim": 1,
                "action_low": self.action_low, "action_high": self.action_high,
                "horizon": self.horizon}

    def features(self, obs) -> np.ndarray:
        return np.asarray(obs, dtype=np.float64) * self.obs_scale

    def config(self) -> dict:
        return {"mass": self.mass, "dt": self.dt, "horizon": self.horizon, "length": self.length,
                "gravity": self.gravity, "rotor_inertia": self.rotor_inertia,
                "max_torque": self.max_torque, "threshold": self.threshold,
                "init_range": self.init_range, "max_speed": self.max_speed}

    def clone(self, **overrides) -> "PendulumEnv":
        cfg = self.config()
        cfg.update(overrides)
        return PendulumEnv(**cfg)


def _record(name, default, modified):
    # matched pairs (used as no-mismatch controls) carry no modification
    return None if default == modified else ModificationRecord(name, default, modified)


@dataclass
class EnvironmentPair:
    sim: Environment
    real: Environment
    modification: ModificationRecord | None

    def __post_init__(self):
        if self.sim.space_descriptor() != self.real.space_descriptor():
            raise ValueError("sim and real environments must share spaces")


def make_gridworld_pair(size: int = 4, sim_slip: float = 0.0, real_slip: float = 0.3, seed=None,
                        horizon: int | None = None, discount: float = 0.95,
                        terminate_at_goal: bool = True) -> EnvironmentPair:
    seeds = np.random.SeedSequence(seed).spawn(2)
    kw = dict(size=size, horizon=horizon, discount=discount, terminate_at_goal=terminate_at_goal)
    sim = GridworldEnv(slip=sim_slip, seed=np.random.default_rng(seeds[0]), **kw)
    real = GridworldEnv(slip=real_slip, seed=np.random.default_rng(seeds[1]), **kw)
    return EnvironmentPair(sim, real, _record("slip", sim_slip, real_slip))


def make_pendulum_pair(sim_mass: float = PENDULUM_MASS_DEFAULT, real_mass: float = PENDULUM_MASS_MODIFIED,
                       dt: float = 0.02, horizon: int = 200, seed=None, **physics) -> EnvironmentPair:
    if sim_mass <= 0 or real_mass <= 0:
        raise ValueError("masses must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    seeds = np.random.SeedSequence(seed).spawn(2)
    sim = PendulumEnv(mass=sim_mass, dt=dt, horizon=horizon, seed=np.random.default_rng(seeds[0]), **physics)
    real = PendulumEnv(mass=real_mass, dt=dt, horizon=horizon, seed=np.random.default_rng(seeds[1]), **physics)
    return EnvironmentPair(sim, real, _record("mass", sim_mass, real_mass))


def make_pair_from_config(cfg: dict, seed=None) -> EnvironmentPair:
    """Build a pair from ``{env, property, default, modified, ...}``."""
    cfg = dict(cfg)
    kind = cfg.pop("env")
    prop = cfg.pop("property", None)
    default = cfg.pop("default", None)
    modified = cfg.pop("modified", None)
    if kind == "pendulum":
        if prop not in (None, "mass"):
            raise ValueError(f"pendulum pairs modify 'mass', not {prop!r}")
        kw = {}
        if default is not None:
            kw["sim_mass"] = default
        if modified is not None:
            kw["real_mass"] = modified
        return make_pendulum_pair(seed=seed, **kw, **cfg)
    if kind == "gridworld":
        if prop not in (None, "slip"):
            raise ValueError(f"gridworld pairs modify 'slip', not {prop!r}")
        kw = {}
        if default is not None:
            kw["sim_slip"] = default
        if modified is not None:
            kw["real_slip"] = modified
        return make_gridworld_pair(seed=seed, **kw, **cfg)
    raise ValueError(f"unknown environment {kind!r}")


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    next_states: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    seed: int | None = None

    def append(self, s, a, sp, r, done):
        self.states.append(s)
        self.actions.append(a)
        self.next_states.append(sp)
        self.rewards.append(float(r))
        self.dones.append(bool(done))

    def __len__(self):
        return len(self.states)

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    def is_chain_consistent(self) -> bool:
        for i in range(len(self) - 1):
            if not self.dones[i] and not np.array_equal(self.next_states[i], self.states[i + 1]):
                return False
        return True


def stack_transitions(trajectories):
    """(states, actions, next_states) arrays over all trajectories."""
    s = np.array([x for t in trajectories for x in t.states])
    a = np.array([x for t in trajectories for x in t.actions])
    sp = np.array([x for t in trajectories for x in t.next_states])
    return s, a, sp


def count_transitions(trajectories) -> int:
    return sum(len(t) for t in trajectories)


def _act(policy, env, obs, rng, deterministic):
    """Returns (env_action, raw_action, logp) for any supported policy type."""
    from .mdp import TabularPolicy

    if isinstance(policy, TabularPolicy):
        p = policy.probs[int(obs)]
        a = int(np.argmax(p)) if deterministic else int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))
        return a, a, math.log(p[a]) if p[a] > 0 else -math.inf
    if hasattr(policy, "act"):
        raw, logp = policy.act(env.features(obs), rng, deterministic)
        if env.discrete:
            return int(raw), int(raw), float(logp)
        return env.clip_action(raw), np.array(raw, dtype=np.float64), float(logp)
    a = policy(obs)
    return a, a, 0.0


def as_seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def rollout(env: Environment, policy, n_episodes: int, seed=None, deterministic: bool = False,
            max_transitions: int | None = None) -> list:
    """Run ``n_episodes`` episodes; fully determined by ``seed``.

    ``max_transitions`` caps the total transition count (the last episode
    may be cut short and is then marked done).
    """
    env_ss, pol_ss = as_seed_sequence(seed).spawn(2)
    env.seed(np.random.default_rng(env_ss))
    rng = np.random.default_rng(pol_ss)
    trajectories = []
    used = 0
    for _ in range(n_episodes):
        if max_transitions is not None and used >= max_transitions:
            break
        traj = Trajectory(seed=seed if isinstance(seed, (int, np.integer)) else None)
        s = env.reset()
        done = False
        while not done:
            a, _, _ = _act(policy, env, s, rng, deterministic)
            sp, r, done, _ = env.step(a)
            used += 1
            if max_transitions is not None and used >= max_transitions:
                done = True
            traj.append(s, a, sp, r, done)
            s = sp
        trajectories.append(traj)
    return trajectories


def evaluate_policy(env: Environment, policy, n_episodes: int, seed=None, deterministic: bool = True):
    """Mean and std of undiscounted episode return."""
    returns = [t.total_reward for t in rollout(env, policy, n_episodes, seed=seed, deterministic=deterministic)]
    return float(np.mean(returns)), float(np.std(returns))


def empirical_transition_counts(trajectories, n_states: int, n_actions: int) -> np.ndarray:
    counts = np.zeros((n_states, n_actions, n_states))
    for t in trajectories:
        np.add.at(counts, (np.asarray(t.states), np.asarray(t.actions), np.asarray(t.next_states)), 1.0)
    return counts


def _flat(x) -> list:
    return np.atleast_1d(np.asarray(x, dtype=np.float64)).tolist()


def write_trajectories_csv(trajectories, path) -> None:
    first = trajectories[0]
    s_dim = len(_flat(first.states[0]))
    a_dim = len(_flat(first.actions[0]))
    header = (["episode", "step"] + [f"state_{i}" for i in range(s_dim)] + [f"action_{i}" for i in range(a_dim)]
              + [f"next_state_{i}" for i in range(s_dim)] + ["reward", "done"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ep, t in enumerate(trajectories):
            for i in range(len(t)):
                w.writerow([ep, i] + [repr(v) for v in _flat(t.states[i])] + [repr(v) for v in _flat(t.actions[i])]
                           + [repr(v) for v in _flat(t.next_states[i])] + [repr(t.rewards[i]), int(t.dones[i])])


def read_trajectories_csv(path, discrete: bool = False) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return []
    keys = rows[0].keys()
    s_cols = [k for k in keys if k.startswith("state_")]
    a_cols = [k for k in keys if k.startswith("action_")]
    sp_cols = [k for k in keys if k.startswith("next_state_")]
    out = {}
    for row in rows:
        ep = int(row["episode"])
        traj = out.setdefault(ep, Trajectory())
        conv = (lambda cols: int(float(row[cols[0]]))) if discrete else (lambda cols: np.array([float(row[c]) for c in cols]))
        traj.append(conv(s_cols), conv(a_cols), conv(sp_cols), float(row["reward"]), bool(int(row["done"])))
    return [out[k] for k in sorted(out)]


def load_pair_config(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(data.decode())
    return json.loads(data)
