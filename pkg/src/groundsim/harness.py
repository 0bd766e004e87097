"""Experiment harness: metrics, the transfer pipeline, bundled suites and verification.

Output layout of ``run_experiment``: one directory per seed holding the config
snapshot, policy/transformer checkpoints and CSVs, plus a merged
``metrics.csv`` at the top level.  Evaluation episodes never count toward the
real-transition budget.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import AneConfig, GatConfig, GatGrounder, ane_train, write_sweep_csv
from .envs import (Environment, TabularEnv, count_transitions, evaluate_policy, gridworld_mdp,
                   make_pair_from_config, rollout, stack_transitions)
from .garat import (Discriminator, GaratConfig, GaratTransfer, TransitionFeatures, data_loss_from_probs,
                    exact_divergence_minimizer, ground, optimal_discriminator)
from .grounding import GroundedEnvironment, TabularActionTransformer, grounded_marginal
from .mdp import (TabularMDP, TabularPolicy, js_divergence, marginal_transition_distribution, random_mdp,
                  random_policy, tv_distance)
from .nn import save_checkpoint
from .ppo import AgentTrainConfig, AgentTrainer, PpoConfig

log = logging.getLogger(__name__)

METHODS = ("garat", "gat", "ane", "sim_only", "real_only")
METRIC_COLUMNS = ("method", "seed", "real_transitions_used", "raw_return", "scaled_return", "transition_error",
                  "wall_ms")
EVAL_EPISODES = 50


# ---------------------------------------------------------------- metrics

def _state_vector(env: Environment, state) -> np.ndarray:
    if env.discrete:
        return np.eye(env.n_states)[int(state)]
    return np.asarray(state, dtype=np.float64)


def _is_stochastic(env: Environment) -> bool:
    if env.discrete:
        return True
    if isinstance(env, GroundedEnvironment):
        return not env.deterministic or _is_stochastic(env.sim)
    return False


def per_step_transition_error(sim_like: Environment, real_trajectories, n_draws: int = 16, seed=0):
    """Mean L2 error of one-step predictions from real states and actions.

    For each real ``(s, a, s')`` the environment is reset to ``s`` and stepped
    with ``a``; stochastic environments average ``n_draws`` next states.
    Discrete states are compared as one-hot vectors.  Returns
    ``(mean_error, errors)``.
    """
    states, actions, next_states = stack_transitions(real_trajectories)
    if len(states) == 0:
        raise ValueError("no real transitions to evaluate")
    draws = n_draws if _is_stochastic(sim_like) else 1
    sim_like.seed(np.random.default_rng(seed))
    errors = []
    for s, a, sp in zip(states, actions, next_states):
        acc = 0.0
        for _ in range(draws):
            sim_like.set_state(s)
            nxt, _, _, _ = sim_like.step(a)
            acc = acc + _state_vector(sim_like, nxt)
        pred = acc / draws
        errors.append(float(np.linalg.norm(pred - _state_vector(sim_like, sp))))
    return float(np.mean(errors)), errors


def scaled_return(raw: float, anchor_sim: float, anchor_real: float) -> float:
    """Affine rescaling with the sim-trained anchor at 0 and the real-trained at 1."""
    if abs(anchor_real - anchor_sim) <= 1e-9:
        raise ValueError(f"degenerate anchors: sim {anchor_sim!r}, real {anchor_real!r}")
    # + 0.0 turns a negative zero into 0.0 so CSVs never show "-0.0"
    return (raw - anchor_sim) / (anchor_real - anchor_sim) + 0.0


# ---------------------------------------------------------------- presets

def tabular_garat_config(discount: float = 0.9) -> GaratConfig:
    """Grounding settings for the exact tabular comparison.

    Samples are weighted by ``discount ** t`` so the discriminator targets
    the discounted marginal the exact oracle uses.
    """
    return GaratConfig(n_transformer_updates=40, disc_epochs=5, disc_learning_rate=1e-3, disc_minibatches=4,
                       discount_weighting=True,
                       transformer=PpoConfig(gamma=discount, learning_rate=1e-3, epochs=4, minibatches=4,
                                             anneal_lr=True))


def pendulum_garat_config() -> GaratConfig:
    """Grounding settings used for the pendulum pair."""
    return GaratConfig(n_transformer_updates=50, disc_epochs=5, disc_learning_rate=1e-3, disc_minibatches=4,
                       transformer_log_std_init=math.log(0.3),
                       transformer=PpoConfig(gamma=0.5, learning_rate=1e-3, epochs=4, minibatches=4,
                                             anneal_lr=True))


@dataclass
class TabularInstance:
    name: str
    sim: TabularMDP
    real: TabularMDP
    agent_policy: TabularPolicy


def tabular_suite() -> list:
    """Bundled grounding instances, each with ``|S| * |A| <= 16``.

    Random instances blend the sim's transitions with an independent random
    MDP; the gridworld pair is exactly realisable by an action mixture; the
    last instance has no mismatch at all.
    """
    out = []
    for k, (S, A, mix) in enumerate([(2, 2, 1.0), (2, 2, 0.5), (3, 2, 0.5), (4, 2, 0.3), (4, 4, 0.3)]):
        rng = np.random.default_rng(100 + k)
        sim = random_mdp(S, A, 0.9, rng)
        other = random_mdp(S, A, 0.9, rng)
        real = sim.with_transition((1.0 - mix) * sim.transition + mix * other.transition)
        out.append(TabularInstance(f"random_{S}x{A}_{k}", sim, real, random_policy(S, A, rng, floor=0.1)))
    rng = np.random.default_rng(7)
    out.append(TabularInstance("gridworld_2x2_slip", gridworld_mdp(2, 0.0, 0.9), gridworld_mdp(2, 0.3, 0.9),
                               random_policy(4, 4, rng, floor=0.1)))
    rng = np.random.default_rng(8)
    same = random_mdp(3, 2, 0.9, rng)
    out.append(TabularInstance("matched_3x2", same, same, random_policy(3, 2, rng, floor=0.1)))
    return out


def theorem1_check(instance: TabularInstance, config: GaratConfig | None = None, real_episodes: int = 2000,
                   horizon: int = 80, seed: int = 0) -> dict:
    """Runs ``ground`` and the exact minimiser on one instance and compares them."""
    sim, real, pi = instance.sim, instance.real, instance.agent_policy
    cfg = config or tabular_garat_config(sim.discount)
    rho_real = marginal_transition_distribution(real, pi).rho
    exact_tr, js_exact = exact_divergence_minimizer(sim, pi, rho_real, seed=seed)
    trajs = rollout(TabularEnv(real, horizon=horizon), pi, real_episodes, seed=[seed, 1])
    tr, diag = ground(TabularEnv(sim, horizon=horizon), trajs, pi, cfg, seed=seed, real_mdp=real)
    rho_g = grounded_marginal(sim, pi, tr.table()).rho
    rho_exact = grounded_marginal(sim, pi, exact_tr).rho
    js_ground = js_divergence(rho_g, rho_real)
    tol = max(0.01, 0.2 * js_exact)
    tv = tv_distance(rho_g, rho_exact)
    return {"instance": instance.name, "js_exact": js_exact, "js_ground": js_ground, "js_gap": js_ground - js_exact,
            "js_tolerance": tol, "tv_rho_g": tv, "passed": bool(js_ground - js_exact <= tol and tv <= 0.05),
            "diagnostics": diag}


def discriminator_instances() -> list:
    """Three small instances with a frozen random transformer each."""
    out = []
    for k, (S, A) in enumerate([(2, 2), (3, 2), (2, 3)]):
        rng = np.random.default_rng(200 + k)
        sim = random_mdp(S, A, 0.9, rng, concentration=2.0)
        real = random_mdp(S, A, 0.9, rng, concentration=2.0)
        pi = random_policy(S, A, rng, floor=0.3)
        tr = TabularActionTransformer(rng.dirichlet(np.full(A, 2.0), size=(S, A)))
        out.append((TabularInstance(f"disc_{S}x{A}_{k}", sim, real, pi), tr))
    return out


def optimal_discriminator_check(instance: TabularInstance, transformer: TabularActionTransformer,
                                n_updates: int = 5000, seed: int = 0) -> dict:
    """Trains D on the exact weighted marginals and compares it with the closed form.

    Every ``(s, a, s')`` triple appears once on each side, weighted by its
    probability.  The step size drops tenfold after half and after three
    quarters of the updates so the stochastic real-side draws settle.
    """
    sim, real, pi = instance.sim, instance.real, instance.agent_policy
    rho_g = grounded_marginal(sim, pi, transformer).rho.ravel()
    rho_r = marginal_transition_distribution(real, pi).rho.ravel()
    idx = np.array(list(np.ndindex(sim.transition.shape)))
    X = TransitionFeatures(TabularEnv(sim))(idx[:, 0], idx[:, 1], idx[:, 2])
    cfg = GaratConfig()
    D = Discriminator(cfg.disc_hidden, 1e-3, cfg.gp_coef, cfg.l2_coef, minibatches=1, epochs=1, seed=seed)
    D.initialize(X.shape[1])
    D.set_scaler(X)
    for i in range(n_updates):
        if i in (n_updates // 2, 3 * n_updates // 4):
            D.opt_.lr *= 0.1
        D.partial_fit(X, X, rho_g, rho_r)
    d = D.predict_proba(X)
    target = 2.0 * math.log(2.0) - 2.0 * js_divergence(rho_g, rho_r)
    loss = data_loss_from_probs(d, d, rho_g, rho_r)
    sup = float(np.max(np.abs(d - optimal_discriminator(rho_g, rho_r))))
    return {"instance": instance.name, "sup_error": sup, "data_loss": loss, "target_loss": target,
            "loss_error": abs(loss - target), "passed": bool(sup <= 0.05 and abs(loss - target) <= 0.05)}


# ---------------------------------------------------------------- experiments

DEFAULT_PAIR = {"env": "pendulum", "property": "mass", "default": 4.89, "modified": 100.0, "dt": 0.02,
                "horizon": 200}


@dataclass
class ExperimentConfig:
    pair: dict = field(default_factory=lambda: dict(DEFAULT_PAIR))
    method: str = "garat"
    method_config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    budget: int = 2000
    out_dir: str = "runs"
    sim_timesteps: int = 100_000
    real_timesteps: int = 200_000
    agent: dict = field(default_factory=dict)
    eval_episodes: int = EVAL_EPISODES

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.budget <= 0 and self.method not in ("sim_only", "real_only"):
            raise ValueError("real-transition budget must be positive")
        self.seeds = [int(s) for s in self.seeds]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return cls(**doc)

    def agent_config(self) -> AgentTrainConfig:
        return AgentTrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.agent.items()})

    def garat_config(self) -> GaratConfig:
        """Outer-loop settings: the pair's preset, overridden by ``method_config["garat"]``."""
        doc = dict(self.method_config.get("garat", {}))
        base = pendulum_garat_config() if self.pair.get("env") == "pendulum" else GaratConfig()
        merged = base.to_dict()
        for k, v in doc.items():
            merged[k] = {**merged[k], **v} if isinstance(v, dict) and isinstance(merged.get(k), dict) else v
        merged["real_budget"] = self.budget
        if "agent" not in doc:
            merged["agent"] = self.agent_config().to_dict()
        return GaratConfig.from_dict(merged)


@dataclass
class MetricRecord:
    method: str
    seed: int
    real_transitions_used: int
    raw_return: float
    scaled_return: float | None
    transition_error: float | None = None
    wall_ms: float = 0.0

    def row(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))
        return [self.method, self.seed, self.real_transitions_used, fmt(self.raw_return), fmt(self.scaled_return),
                fmt(self.transition_error), f"{self.wall_ms:.3f}"]


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in sorted(records, key=lambda r: (r.method, r.seed)):
            w.writerow(r.row())


def read_metrics_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            opt = lambda k: None if row[k] == "" else float(row[k])
            out.append(MetricRecord(row["method"], int(row["seed"]), int(row["real_transitions_used"]),
                                    float(row["raw_return"]), opt("scaled_return"), opt("transition_error"),
                                    float(row["wall_ms"])))
    return out


def _write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestep", "mean_return", "std_return"])
        for t, m, s in curve:
            w.writerow([t, repr(float(m)), repr(float(s))])


def _dump_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def train_anchors(config: ExperimentConfig, seed: int, seed_dir: str):
    """Sim- and real-trained anchor policies, cached in ``seed_dir``."""
    from .nn import load_checkpoint, policy_from_dict

    key = {"pair": config.pair, "agent": config.agent, "sim_timesteps": config.sim_timesteps,
           "real_timesteps": config.real_timesteps, "eval_episodes": config.eval_episodes, "seed": seed}
    path = os.path.join(seed_dir, "anchors.json")
    if os.path.exists(path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("key") == json.loads(json.dumps(key)):
            pi_sim = policy_from_dict(load_checkpoint(os.path.join(seed_dir, "policy_sim.json")))
            pi_real = policy_from_dict(load_checkpoint(os.path.join(seed_dir, "policy_real.json")))
            return pi_sim, pi_real, doc["anchor_sim"], doc["anchor_real"]
    pair = make_pair_from_config(config.pair, seed=[seed, 0])
    agent_cfg = config.agent_config()
    sim_tr = AgentTrainer(agent_cfg, config.sim_timesteps, seed).fit(pair.sim)
    real_tr = AgentTrainer(agent_cfg, config.real_timesteps, seed).fit(pair.real)
    anchor_sim = evaluate_policy(pair.real, sim_tr.policy_, config.eval_episodes, seed=[seed, 99])[0]
    anchor_real = evaluate_policy(pair.real, real_tr.policy_, config.eval_episodes, seed=[seed, 99])[0]
    save_checkpoint(sim_tr.policy_, os.path.join(seed_dir, "policy_sim.json"))
    save_checkpoint(real_tr.policy_, os.path.join(seed_dir, "policy_real.json"))
    _write_curve(sim_tr.learning_curve_, os.path.join(seed_dir, "curve_sim.csv"))
    _write_curve(real_tr.learning_curve_, os.path.join(seed_dir, "curve_real.csv"))
    _dump_json({"key": key, "anchor_sim": anchor_sim, "anchor_real": anchor_real,
                "real_only_transitions": config.real_timesteps}, path)
    return sim_tr.policy_, real_tr.policy_, anchor_sim, anchor_real


def _gat_grounder(gat_cfg: GatConfig):
    def run(sim, trajs, policy, config, seed_seq):
        seed = int(seed_seq.generate_state(1)[0])
        return GatGrounder(gat_cfg, seed).fit(sim, trajs, policy).transformer_
    return run


def _error_probe(pair, policy, seed):
    # evaluation-only real data for the grounding-error column
    return rollout(pair.real, policy, 10, seed=[seed, 77])


def _scaled_or_none(raw, anchor_sim, anchor_real):
    # equal anchors leave the scale undefined; the raw return is still recorded
    try:
        return scaled_return(raw, anchor_sim, anchor_real)
    except ValueError as exc:
        log.warning("%s; scaled_return left empty", exc)
        return None


def run_experiment(config: ExperimentConfig) -> list:
    """Pretrain in sim, collect real data, ground, retrain, evaluate in real.

    Returns one MetricRecord per seed and writes everything under
    ``config.out_dir``.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    _dump_json(config.to_dict(), os.path.join(config.out_dir, "config.json"))
    records = []
    ane_rows = []
    for seed in config.seeds:
        t0 = time.perf_counter()
        seed_dir = os.path.join(config.out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        _dump_json(config.to_dict(), os.path.join(seed_dir, "config.json"))
        pi_sim, pi_real, anchor_sim, anchor_real = train_anchors(config, seed, seed_dir)
        pair = make_pair_from_config(config.pair, seed=[seed, 0])
        used, error = 0, None
        method = config.method
        if method == "sim_only":
            policy = pi_sim
        elif method == "real_only":
            policy, used = pi_real, config.real_timesteps
        elif method in ("garat", "gat"):
            gcfg = config.garat_config()
            grounder = None
            if method == "gat":
                grounder = _gat_grounder(GatConfig(**config.method_config.get("gat", {})))
            est = GaratTransfer(gcfg, seed, grounder=grounder).fit(pair.sim, pair.real, pi_sim)
            policy, used = est.policy_, est.real_transitions_used_
            if est.transformers_:
                tr = est.transformers_[-1]
                save_checkpoint(tr, os.path.join(seed_dir, f"transformer_{method}.json"))
                gsim = GroundedEnvironment(pair.sim, tr, deterministic=not pair.sim.discrete)
                error = per_step_transition_error(gsim, _error_probe(pair, pi_sim, seed), seed=seed)[0]
            _dump_json(est.history_, os.path.join(seed_dir, f"history_{method}.json"))
        else:
            ane = AneConfig(**config.method_config.get("ane", {}))
            _, _, rows = ane_train(pair.sim, pair.real, ane.stds, config.agent_config(), config.sim_timesteps,
                                   seeds=[seed], eval_episodes=config.eval_episodes)
            ane_rows.extend(rows)
            policy = None
        if policy is not None:
            raw = evaluate_policy(pair.real, policy, config.eval_episodes, seed=[seed, 99])[0]
            save_checkpoint(policy, os.path.join(seed_dir, f"policy_{method}.json"))
            rec = MetricRecord(method, seed, used, raw, _scaled_or_none(raw, anchor_sim, anchor_real), error,
                               1000.0 * (time.perf_counter() - t0))
            write_metrics_csv([rec], os.path.join(seed_dir, f"metrics_{method}.csv"))
            records.append(rec)
    if config.method == "ane":
        records = _ane_records(config, ane_rows)
        write_sweep_csv(sorted(ane_rows, key=lambda r: (r["hyperparam"], r["seed"])),
                        os.path.join(config.out_dir, "sweep_ane.csv"))
    write_metrics_csv(records, os.path.join(config.out_dir, f"metrics_{config.method}.csv"))
    return records


def _ane_records(config: ExperimentConfig, rows) -> list:
    # best noise level = highest median real return across seeds
    by_std = {}
    for r in rows:
        by_std.setdefault(r["hyperparam"], []).append(r)
    best = max(sorted(by_std), key=lambda k: np.median([r["real_return"] for r in by_std[k]]))
    out = []
    for r in sorted(by_std[best], key=lambda r: r["seed"]):
        with open(os.path.join(config.out_dir, f"seed_{r['seed']}", "anchors.json")) as fh:
            anchors = json.load(fh)
        out.append(MetricRecord("ane", r["seed"], 0, r["real_return"],
                                _scaled_or_none(r["real_return"], anchors["anchor_sim"], anchors["anchor_real"])))
    return out


def summarize(records) -> dict:
    """Per-method medians of raw and scaled return."""
    out = {}
    for method in sorted({r.method for r in records}):
        rs = [r for r in records if r.method == method]
        scaled = [r.scaled_return for r in rs if r.scaled_return is not None]
        errs = [r.transition_error for r in rs if r.transition_error is not None]
        out[method] = {"n_seeds": len(rs), "median_raw_return": float(np.median([r.raw_return for r in rs])),
                       "median_scaled_return": float(np.median(scaled)) if scaled else None,
                       "median_transition_error": float(np.median(errs)) if errs else None,
                       "max_real_transitions_used": max(r.real_transitions_used for r in rs)}
    return out


# ---------------------------------------------------------------- grounding-error study

def grounding_error_study(seed: int, sim_timesteps: int = 100_000, n_real_episodes: int = 10,
                          garat_config: GaratConfig | None = None, gat_config: GatConfig | None = None,
                          pair_config: dict | None = None) -> dict:
    """Per-step transition errors of ungrounded, GARAT- and GAT-grounded sims.

    Both grounding methods see the same ``n_real_episodes`` real trajectories
    of the sim-trained policy; errors are measured on a separate set of real
    trajectories.
    """
    pair = make_pair_from_config(pair_config or DEFAULT_PAIR, seed=[seed, 0])
    policy = AgentTrainer(AgentTrainConfig(), sim_timesteps, seed).fit(pair.sim).policy_
    train = rollout(pair.real, policy, n_real_episodes, seed=[seed, 11])
    test = rollout(pair.real, policy, n_real_episodes, seed=[seed, 12])
    base = per_step_transition_error(pair.sim, test)[0]
    garat_tr, _ = ground(pair.sim, train, policy, garat_config or pendulum_garat_config(), seed=seed)
    garat_err = per_step_transition_error(GroundedEnvironment(pair.sim, garat_tr, deterministic=True), test)[0]
    gat_tr = GatGrounder(gat_config or GatConfig(), seed).fit(pair.sim, train, policy).transformer_
    gat_err = per_step_transition_error(GroundedEnvironment(pair.sim, gat_tr, deterministic=True), test)[0]
    return {"seed": seed, "real_transitions": count_transitions(train), "ungrounded": base, "garat": garat_err,
            "gat": gat_err}


# ---------------------------------------------------------------- verification

SUITES = ("marginals", "propositions", "theorem1", "gradients", "grounding_error")


def _check(name, passed, value=None, tolerance=None) -> dict:
    return {"name": name, "passed": bool(passed), "value": value, "tolerance": tolerance}


def verify_marginals(n_instances: int = 100, seed: int = 0) -> list:
    from .mdp import expected_return_from_marginal, policy_return, sample_marginal

    rng = np.random.default_rng(seed)
    worst_sum, worst_ret = 0.0, 0.0
    for _ in range(n_instances):
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        mdp = random_mdp(S, A, float(rng.uniform(0.1, 0.99)), rng)
        pi = random_policy(S, A, rng)
        rho = marginal_transition_distribution(mdp, pi)
        worst_sum = max(worst_sum, abs(rho.rho.sum() - 1.0))
        worst_ret = max(worst_ret, abs(expected_return_from_marginal(rho, mdp.reward, mdp.discount)
                                       - policy_return(mdp, pi)))
    checks = [_check("normalisation", worst_sum <= 1e-9, worst_sum, 1e-9),
              _check("return_equivalence", worst_ret <= 1e-9, worst_ret, 1e-9)]
    worst_tv = 0.0
    for _ in range(5):
        mdp = random_mdp(4, 2, 0.9, rng)
        pi = random_policy(4, 2, rng)
        est = sample_marginal(mdp, pi, 100_000, rng)
        worst_tv = max(worst_tv, tv_distance(est, marginal_transition_distribution(mdp, pi).rho))
    checks.append(_check("monte_carlo_tv", worst_tv < 0.01, worst_tv, 0.01))
    return checks


def verify_propositions(n_instances: int = 100, n_pairs: int = 20, seed: int = 0) -> list:
    from .grounding import TabularActionTransformer, grounded_transition, realizing_transformer
    from .mdp import greedy_action_sets, recover_transition

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        mdp = random_mdp(S, A, float(rng.uniform(0.1, 0.99)), rng)
        pi = random_policy(S, A, rng, floor=0.05)
        rec = recover_transition(marginal_transition_distribution(mdp, pi), pi)
        if rec.visited.any():
            worst = max(worst, float(np.max(np.abs(rec.transition - mdp.transition)[rec.visited])))
    checks = [_check("recover_transition_round_trip", worst <= 1e-8, worst, 1e-8)]
    mismatches = 0
    for k in range(n_pairs):
        if k % 2 == 0:
            # real dynamics defined as a grounded simulator
            S, A = int(rng.integers(2, 6)), int(rng.integers(2, 4))
            sim = random_mdp(S, A, 0.9, rng)
            tr = TabularActionTransformer(rng.dirichlet(np.ones(A), size=(S, A)))
            real = sim.with_transition(grounded_transition(sim.transition, tr))
        else:
            # slip mismatch realised by the solved action mixture
            size = int(rng.integers(2, 4))
            sim = gridworld_mdp(size, float(rng.uniform(0.0, 0.2)), 0.9)
            real = gridworld_mdp(size, float(rng.uniform(0.25, 0.6)), 0.9)
            tr, _ = realizing_transformer(sim.transition, real.transition)
        grounded = sim.with_transition(grounded_transition(sim.transition, tr))
        if greedy_action_sets(grounded) != greedy_action_sets(real):
            mismatches += 1
    checks.append(_check("greedy_sets_equal", mismatches == 0, mismatches, 0))
    return checks


def verify_theorem1(seed: int = 0) -> list:
    checks = []
    for inst in tabular_suite():
        r = theorem1_check(inst, seed=seed)
        checks.append(_check(f"{inst.name}_js_gap", r["js_gap"] <= r["js_tolerance"], r["js_gap"], r["js_tolerance"]))
        checks.append(_check(f"{inst.name}_tv", r["tv_rho_g"] <= 0.05, r["tv_rho_g"], 0.05))
    for inst, tr in discriminator_instances():
        r = optimal_discriminator_check(inst, tr, seed=seed)
        checks.append(_check(f"{inst.name}_sup", r["sup_error"] <= 0.05, r["sup_error"], 0.05))
        checks.append(_check(f"{inst.name}_loss", r["loss_error"] <= 0.05, r["loss_error"], 0.05))
    return checks


def verify_gradients(seed: int = 0) -> list:
    from .gradcheck import gradient_checks

    return [_check(name, err < 1e-4, err, 1e-4) for name, err in gradient_checks(seed)]


def verify_grounding_error(seed: int = 0) -> list:
    pair = make_pair_from_config(dict(DEFAULT_PAIR, modified=DEFAULT_PAIR["default"]), seed=seed)
    probe = rollout(pair.real, lambda s: np.array([-2.0 * s[0] - 0.5 * s[1]]), 3, seed=seed)
    matched = per_step_transition_error(pair.sim, probe)[0]
    study = grounding_error_study(seed)
    return [_check("matched_pair_zero_error", matched <= 1e-12, matched, 1e-12),
            _check("ungrounded_error_positive", study["ungrounded"] > 0, study["ungrounded"], 0.0),
            _check("garat_halves_error", study["garat"] <= 0.5 * study["ungrounded"], study["garat"],
                   0.5 * study["ungrounded"]),
            _check("gat_reduces_error", study["gat"] < study["ungrounded"], study["gat"], study["ungrounded"])]


def verify(suite: str, seed: int = 0) -> dict:
    """Runs a named oracle suite; returns a JSON-serialisable report."""
    runners = {"marginals": verify_marginals, "propositions": verify_propositions, "theorem1": verify_theorem1,
               "gradients": verify_gradients, "grounding_error": verify_grounding_error}
    if suite not in runners:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    t0 = time.perf_counter()
    checks = runners[suite](seed=seed)
    return {"suite": suite, "seed": seed, "passed": all(c["passed"] for c in checks), "checks": checks,
            "wall_ms": 1000.0 * (time.perf_counter() - t0)}
