"""Command-line entry point: ``groundsim <subcommand> [--config PATH] [--seed N] [--out DIR] [--budget N]``.

The config file (JSON or TOML) holds ExperimentConfig fields; the global
flags override ``seeds``, ``out_dir`` and ``budget``.  Every subcommand
writes JSON/CSV under the output directory and prints a JSON summary.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys

import numpy as np

from .baselines import GatConfig, GatGrounder
from .envs import (count_transitions, evaluate_policy, load_pair_config, make_pair_from_config, read_trajectories_csv,
                   rollout, write_trajectories_csv)
from .garat import ground, write_diagnostics_csv
from .grounding import GroundedEnvironment
from .harness import (SUITES, ExperimentConfig, MetricRecord, grounding_error_study, per_step_transition_error,
                      read_metrics_csv, run_experiment, summarize, verify, write_metrics_csv)
from .nn import load_checkpoint, policy_from_dict, save_checkpoint
from .ppo import AgentTrainer

log = logging.getLogger("groundsim")


def load_experiment_config(args, **overrides) -> ExperimentConfig:
    doc = load_pair_config(args.config) if args.config else {}
    doc.update(overrides)
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    if args.out is not None:
        doc["out_dir"] = args.out
    if args.budget is not None:
        doc["budget"] = args.budget
    return ExperimentConfig.from_dict(doc)


def _emit(doc, out_dir, name) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(json.dumps(doc, indent=2, sort_keys=True))


def _load_policy(path):
    return policy_from_dict(load_checkpoint(path))


def _train_policy(cfg: ExperimentConfig, pair, seed):
    return AgentTrainer(cfg.agent_config(), cfg.sim_timesteps, seed).fit(pair.sim).policy_


def cmd_train_sim(args) -> int:
    cfg = load_experiment_config(args)
    out = {}
    for seed in cfg.seeds:
        pair = make_pair_from_config(cfg.pair, seed=[seed, 0])
        tr = AgentTrainer(cfg.agent_config(), cfg.sim_timesteps, seed).fit(pair.sim)
        seed_dir = os.path.join(cfg.out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        save_checkpoint(tr.policy_, os.path.join(seed_dir, "policy_sim.json"))
        out[str(seed)] = {"sim_return": evaluate_policy(pair.sim, tr.policy_, cfg.eval_episodes, seed=[seed, 99])[0],
                          "real_return": evaluate_policy(pair.real, tr.policy_, cfg.eval_episodes, seed=[seed, 99])[0],
                          "policy": os.path.join(seed_dir, "policy_sim.json")}
    _emit(out, cfg.out_dir, "train_sim.json")
    return 0


def cmd_collect_real(args) -> int:
    cfg = load_experiment_config(args)
    out = {}
    for seed in cfg.seeds:
        pair = make_pair_from_config(cfg.pair, seed=[seed, 0])
        policy = _load_policy(args.policy) if args.policy else _train_policy(cfg, pair, seed)
        trajs = rollout(pair.real, policy, args.episodes, seed=[seed, 1], max_transitions=cfg.budget)
        seed_dir = os.path.join(cfg.out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        path = os.path.join(seed_dir, "real_trajectories.csv")
        write_trajectories_csv(trajs, path)
        out[str(seed)] = {"episodes": len(trajs), "real_transitions_used": count_transitions(trajs), "path": path}
    _emit(out, cfg.out_dir, "collect_real.json")
    return 0


def cmd_ground(args) -> int:
    cfg = load_experiment_config(args, method=args.method)
    out = {}
    for seed in cfg.seeds:
        pair = make_pair_from_config(cfg.pair, seed=[seed, 0])
        policy = _load_policy(args.policy) if args.policy else _train_policy(cfg, pair, seed)
        if args.data:
            trajs = read_trajectories_csv(args.data, discrete=pair.sim.discrete)
        else:
            trajs = rollout(pair.real, policy, args.episodes, seed=[seed, 1], max_transitions=cfg.budget)
        used = count_transitions(trajs)
        if used > cfg.budget:
            raise ValueError(f"real data holds {used} transitions, over the budget of {cfg.budget}")
        seed_dir = os.path.join(cfg.out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        if args.method == "garat":
            transformer, diagnostics = ground(pair.sim, trajs, policy, cfg.garat_config(), seed=seed)
            write_diagnostics_csv(diagnostics, os.path.join(seed_dir, "diagnostics_garat.csv"))
        else:
            transformer = GatGrounder(GatConfig(**cfg.method_config.get("gat", {})), seed).fit(
                pair.sim, trajs, policy).transformer_
        save_checkpoint(transformer, os.path.join(seed_dir, f"transformer_{args.method}.json"))
        gsim = GroundedEnvironment(pair.sim, transformer, deterministic=not pair.sim.discrete)
        probe = rollout(pair.real, policy, 10, seed=[seed, 77])
        out[str(seed)] = {"real_transitions_used": used,
                          "ungrounded_error": per_step_transition_error(pair.sim, probe, seed=seed)[0],
                          "grounded_error": per_step_transition_error(gsim, probe, seed=seed)[0]}
    _emit(out, cfg.out_dir, f"ground_{args.method}.json")
    return 0


def cmd_transfer(args) -> int:
    cfg = load_experiment_config(args, **({"method": args.method} if args.method else {}))
    records = run_experiment(cfg)
    _emit(summarize(records), cfg.out_dir, f"summary_{cfg.method}.json")
    return 0


def cmd_sweep_ane(args) -> int:
    doc = {"method": "ane"}
    cfg = load_experiment_config(args, **doc)
    if args.stds:
        cfg.method_config = {**cfg.method_config, "ane": {**cfg.method_config.get("ane", {}), "stds": args.stds}}
    records = run_experiment(cfg)
    _emit(summarize(records), cfg.out_dir, "summary_ane.json")
    return 0


GROUNDING_COLUMNS = ("seed", "real_transitions", "ungrounded", "garat", "gat")


def cmd_eval_grounding(args) -> int:
    cfg = load_experiment_config(args)
    rows = [grounding_error_study(seed, cfg.sim_timesteps, args.episodes, garat_config=cfg.garat_config(),
                                  gat_config=GatConfig(**cfg.method_config.get("gat", {})), pair_config=cfg.pair)
            for seed in cfg.seeds]
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "grounding_error.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GROUNDING_COLUMNS)
        for r in rows:
            w.writerow([r["seed"], r["real_transitions"]] + [repr(float(r[k])) for k in GROUNDING_COLUMNS[2:]])
    med = {k: float(np.median([r[k] for r in rows])) for k in ("ungrounded", "garat", "gat")}
    med["garat_ratio"] = med["garat"] / med["ungrounded"]
    med["gat_ratio"] = med["gat"] / med["ungrounded"]
    _emit({"seeds": cfg.seeds, "median": med}, cfg.out_dir, "eval_grounding.json")
    return 0


def cmd_verify(args) -> int:
    suites = SUITES if args.suite == "all" else (args.suite,)
    seed = 0 if args.seed is None else args.seed
    reports = [verify(s, seed) for s in suites]
    doc = {"passed": all(r["passed"] for r in reports), "reports": reports}
    _emit(doc, args.out or ".", f"verify_{args.suite}.json")
    return 0 if doc["passed"] else 1


def cmd_report(args) -> int:
    root = args.out or "runs"
    paths = sorted(glob.glob(os.path.join(root, "**", "metrics_*.csv"), recursive=True))
    # merged per-method files sit directly under an experiment directory
    merged = [p for p in paths if not os.path.basename(os.path.dirname(p)).startswith("seed_")]
    records: list[MetricRecord] = []
    for p in merged:
        records.extend(read_metrics_csv(p))
    if not records:
        raise FileNotFoundError(f"no metrics files under {root!r}")
    write_metrics_csv(records, os.path.join(root, "report_metrics.csv"))
    _emit({"sources": merged, "summary": summarize(records)}, root, "report.json")
    return 0


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # flags may come before or after the subcommand; the subcommand copy must
    # not reset values given at the top level
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", help="experiment config (JSON or TOML)", **kw)
    g.add_argument("--seed", type=int, help="single seed, overrides the config's seed list", **kw)
    g.add_argument("--out", help="output directory", **kw)
    g.add_argument("--budget", type=int, help="real-transition budget", **kw)
    g.add_argument("-v", "--verbose", action="store_true", **kw)
    return g


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundsim", description="Simulator grounding by action transformation.",
                                parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-sim", parents=[common], help="train the agent in the simulator")
    s.set_defaults(func=cmd_train_sim)

    s = sub.add_parser("collect-real", parents=[common], help="roll out a policy in the real environment")
    s.add_argument("--policy", help="policy checkpoint (default: train one in sim)")
    s.add_argument("--episodes", type=int, default=10)
    s.set_defaults(func=cmd_collect_real)

    s = sub.add_parser("ground", parents=[common], help="fit an action transformer")
    s.add_argument("method", choices=("garat", "gat"))
    s.add_argument("--policy", help="agent policy checkpoint (default: train one in sim)")
    s.add_argument("--data", help="real trajectories CSV (default: collect with the policy)")
    s.add_argument("--episodes", type=int, default=10)
    s.set_defaults(func=cmd_ground)

    s = sub.add_parser("transfer", parents=[common], help="full pretrain / ground / retrain / evaluate run")
    s.add_argument("--method", choices=("garat", "gat", "ane", "sim_only", "real_only"))
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("sweep-ane", parents=[common], help="action-noise envelope sweep")
    s.add_argument("--stds", type=float, nargs="+")
    s.set_defaults(func=cmd_sweep_ane)

    s = sub.add_parser("eval-grounding", parents=[common], help="per-step transition error study")
    s.add_argument("--episodes", type=int, default=10)
    s.set_defaults(func=cmd_eval_grounding)

    s = sub.add_parser("verify", parents=[common], help="run an oracle suite")
    s.add_argument("suite", choices=SUITES + ("all",))
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("report", parents=[common], help="merge metrics files under --out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
