"""Exact finite-MDP machinery.

Everything here is closed-form linear algebra on small tensors.  These
routines are the ground truth that the sampled/learned parts of the package
are checked against.

Tensor conventions: ``T[s, a, s']`` transition probabilities, ``R[s, a, s']``
rewards, ``pi[s, a]`` policy probabilities, ``rho[s, a, s']`` marginal
transition distribution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ROW_TOL = 1e-12
RENORM_TOL = 1e-9


def _stochastic(arr, axis: int, name: str) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(arr < -ROW_TOL) or np.any(arr > 1.0 + ROW_TOL):
        raise ValueError(f"{name} has entries outside [0, 1]")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        # rounding residue from products of probabilities
        arr = np.clip(arr, 0.0, 1.0)
    sums = arr.sum(axis=axis, keepdims=True)
    err = np.abs(sums - 1.0)
    if np.any(err > RENORM_TOL):
        raise ValueError(f"{name} rows do not sum to 1 (max error {err.max():.3g})")
    if np.any(err > ROW_TOL):
        arr = arr / sums
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite discounted MDP with an explicit transition tensor."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray

    def __post_init__(self):
        T = _stochastic(self.transition, axis=2, name="transition")
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {T.shape}")
        R = np.array(self.reward, dtype=np.float64)
        if R.shape != T.shape:
            raise ValueError(f"reward shape {R.shape} != transition shape {T.shape}")
        if not np.all(np.isfinite(R)):
            raise ValueError("reward contains non-finite entries")
        R.setflags(write=False)
        gamma = float(self.discount)
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {gamma}")
        rho0 = _stochastic(self.initial_dist, axis=0, name="initial_dist")
        if rho0.shape != (T.shape[0],):
            raise ValueError("initial_dist length must equal n_states")
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "discount", gamma)
        object.__setattr__(self, "initial_dist", rho0)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_transition(self, transition) -> "TabularMDP":
        return TabularMDP(transition, self.reward, self.discount, self.initial_dist)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.discount,
            "rho0": self.initial_dist.tolist(),
            "T": self.transition.tolist(),
            "R": self.reward.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMDP":
        mdp = cls(doc["T"], doc["R"], doc["gamma"], doc["rho0"])
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValueError("declared sizes disagree with tensor shapes")
        return mdp

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        p = _stochastic(self.probs, axis=1, name="policy")
        if p.ndim != 2:
            raise ValueError("policy must be a (S, A) matrix")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(n_actions)[actions])

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class MarginalTransitionDistribution:
    """Discounted, normalized distribution over (s, a, s') triples."""

    rho: np.ndarray
    discount: float

    def __post_init__(self):
        rho = np.array(self.rho, dtype=np.float64)
        if rho.ndim != 3:
            raise ValueError("rho must be a (S, A, S) tensor")
        if np.any(rho < 0.0):
            raise ValueError("rho has negative entries")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    def state_marginal(self) -> np.ndarray:
        return self.rho.sum(axis=(1, 2))

    @property
    def total(self) -> float:
        return float(self.rho.sum())


class RecoveredTransition(NamedTuple):
    transition: np.ndarray
    visited: np.ndarray


def _check_dims(mdp: TabularMDP, policy: TabularPolicy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )


def state_transition_matrix(transition: np.ndarray, policy_probs: np.ndarray) -> np.ndarray:
    """P[s, s'] = sum_a pi(a|s) T(s'|s,a)."""
    return np.einsum("sa,sap->sp", policy_probs, transition)


def discounted_state_occupancy(transition, policy_probs, initial_dist, discount) -> np.ndarray:
    """d(s) = (1 - gamma) sum_t gamma^t p(s_t = s), by exact linear solve."""
    P = state_transition_matrix(transition, policy_probs)
    A = np.eye(P.shape[0]) - discount * P.T
    return (1.0 - discount) * np.linalg.solve(A, initial_dist)


def marginal_transition_distribution(mdp: TabularMDP, policy: TabularPolicy) -> MarginalTransitionDistribution:
    _check_dims(mdp, policy)
    d = discounted_state_occupancy(mdp.transition, policy.probs, mdp.initial_dist, mdp.discount)
    # negative round-off from the solve is clipped; the solution is a distribution
    d = np.clip(d, 0.0, None)
    rho = d[:, None, None] * policy.probs[:, :, None] * mdp.transition
    return MarginalTransitionDistribution(rho, mdp.discount)


def expected_return_from_marginal(rho, reward, discount: float) -> float:
    if isinstance(rho, MarginalTransitionDistribution):
        rho = rho.rho
    reward = np.asarray(reward, dtype=np.float64)
    if reward.shape != rho.shape:
        raise ValueError(f"reward shape {reward.shape} != rho shape {rho.shape}")
    return float(np.sum(rho * reward) / (1.0 - discount))


def expected_reward(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    return np.einsum("sa,sap,sap->s", policy.probs, mdp.transition, mdp.reward)


def policy_evaluation(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Solve V = r_pi + gamma P_pi V exactly."""
    _check_dims(mdp, policy)
    P = state_transition_matrix(mdp.transition, policy.probs)
    r = expected_reward(mdp, policy)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P, r)


def policy_return(mdp: TabularMDP, policy: TabularPolicy) -> float:
    return float(mdp.initial_dist @ policy_evaluation(mdp, policy))


def q_from_values(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    return np.einsum("sap,sap->sa", mdp.transition, mdp.reward + mdp.discount * V[None, None, :])


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Return (Q, V) with sup-norm Bellman residual below ``tol``."""
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = q_from_values(mdp, V)
        V_new = Q.max(axis=1)
        residual = np.max(np.abs(V_new - V))
        V = V_new
        if residual < tol:
            break
    else:
        raise RuntimeError("value iteration did not converge")
    return q_from_values(mdp, V), V


def optimal_policy(mdp: TabularMDP, tol: float = 1e-10) -> TabularPolicy:
    """Greedy deterministic policy; ties go to the lowest action index."""
    Q, _ = value_iteration(mdp, tol)
    return TabularPolicy.deterministic(np.argmax(Q, axis=1), mdp.n_actions)


def greedy_action_sets(mdp: TabularMDP, tol: float = 1e-8) -> list[frozenset]:
    """Per-state set of actions whose Q-value is within ``tol`` of the max."""
    Q, _ = value_iteration(mdp)
    best = Q.max(axis=1, keepdims=True)
    return [frozenset(np.flatnonzero(row).tolist()) for row in (Q >= best - tol)]


def recover_transition(rho, policy: TabularPolicy, min_mass: float = 0.0) -> RecoveredTransition:
    """Invert rho -> T on visited (s, a) pairs.

    Pairs with no mass are marked in ``visited`` (False) and filled with a
    uniform row so the returned tensor is still stochastic.
    """
    if isinstance(rho, MarginalTransitionDistribution):
        rho = rho.rho
    rho = np.asarray(rho, dtype=np.float64)
    if policy.probs.shape != rho.shape[:2]:
        raise ValueError("policy shape does not match rho")
    state_mass = rho.sum(axis=(1, 2))
    if np.any((state_mass > min_mass)[:, None] & (policy.probs <= 0.0)):
        raise ValueError("policy lacks full support on a visited state")
    pair_mass = rho.sum(axis=2)
    visited = pair_mass > min_mass
    n_states = rho.shape[2]
    T = np.full(rho.shape, 1.0 / n_states)
    T[visited] = rho[visited] / pair_mass[visited][:, None]
    return RecoveredTransition(T, visited)


def random_mdp(n_states: int, n_actions: int, discount: float, rng: np.random.Generator,
               concentration: float = 1.0) -> TabularMDP:
    T = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions, n_states))
    rho0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(T, R, discount, rho0)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator,
                  floor: float = 0.0) -> TabularPolicy:
    """Dirichlet policy; ``floor`` > 0 guarantees full support."""
    p = rng.dirichlet(np.ones(n_actions), size=n_states)
    p = floor / n_actions + (1.0 - floor) * p
    return TabularPolicy(p / p.sum(axis=1, keepdims=True))


def sample_marginal(mdp: TabularMDP, policy: TabularPolicy, n_samples: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo estimate of rho via geometric-horizon sampling.

    Each sample draws a stopping time t ~ Geometric(1 - gamma) on {0, 1, ...},
    rolls the chain forward and records the transition taken at step t.
    """
    _check_dims(mdp, policy)
    S, A = mdp.n_states, mdp.n_actions
    stop = rng.geometric(1.0 - mdp.discount, size=n_samples) - 1
    s = rng.choice(S, size=n_samples, p=mdp.initial_dist)
    counts = np.zeros((S, A, S))
    cum_pi = np.cumsum(policy.probs, axis=1)
    cum_T = np.cumsum(mdp.transition, axis=2)
    alive = np.arange(n_samples)
    t = 0
    while alive.size:
        st = s[alive]
        a = _sample_rows(cum_pi[st], rng)
        sp = _sample_rows(cum_T[st, a], rng)
        done = stop[alive] == t
        np.add.at(counts, (st[done], a[done], sp[done]), 1.0)
        s[alive] = sp
        alive = alive[~done]
        t += 1
    return counts / n_samples


def _sample_rows(cum: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cum.shape[0])[:, None]
    idx = (u > cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p - q).sum())


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats (0 <= JS <= ln 2)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    m = 0.5 * (p + q)
    return 0.5 * (_kl(p, m) + _kl(q, m))


def _kl(p, m):
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / m[mask])))
