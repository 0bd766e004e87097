import json
import os

import numpy as np
import pytest

from groundsim import cli
from groundsim.envs import evaluate_policy, make_gridworld_pair, make_pendulum_pair, rollout
from groundsim.garat import GaratConfig, GaratTransfer, policy_table
from groundsim.harness import (METRIC_COLUMNS, ExperimentConfig, MetricRecord, per_step_transition_error,
                               read_metrics_csv, run_experiment, scaled_return, summarize, verify, write_metrics_csv)
from groundsim.mdp import TabularPolicy, optimal_policy, policy_return
from groundsim.ppo import AgentTrainConfig, AgentTrainer

GRID = {"env": "gridworld", "property": "slip", "default": 0.0, "modified": 0.5, "size": 3}
SMALL_GARAT = {"n_transformer_updates": 3, "retrain_timesteps": 1000, "transformer": {"batch_timesteps": 128}}


def small_config(tmp_path, method="garat", pair=GRID, **kw):
    doc = dict(pair=dict(pair), method=method, method_config={"garat": SMALL_GARAT, "ane": {"stds": [0.0, 0.2]}},
               seeds=[0], budget=200, out_dir=str(tmp_path), sim_timesteps=2000, real_timesteps=2000,
               eval_episodes=5, agent={"batch_timesteps": 500})
    doc.update(kw)
    return ExperimentConfig(**doc)


# ---------------------------------------------------------------- metrics

def test_scaled_return_examples():
    assert scaled_return(5.0, 0.0, 10.0) == 0.5
    assert scaled_return(0.0, 0.0, 10.0) == 0.0
    assert scaled_return(10.0, 0.0, 10.0) == 1.0
    assert scaled_return(15.0, 0.0, 10.0) == 1.5
    assert scaled_return(-5.0, 0.0, 10.0) == -0.5
    assert str(scaled_return(3.0, 3.0, 1.0)) == "0.0"


def test_degenerate_anchors_raise():
    with pytest.raises(ValueError):
        scaled_return(1.0, 3.0, 3.0 + 1e-10)


def test_transition_error_of_env_against_itself_is_zero():
    pair = make_pendulum_pair(4.89, 4.89)
    pd = lambda s: np.array([-(2.0 * s[0] + 0.3 * s[1])])
    trajs = rollout(pair.real, pd, 3, seed=0)
    assert per_step_transition_error(pair.sim, trajs)[0] == 0.0
    mismatched = make_pendulum_pair(4.89, 100.0)
    assert per_step_transition_error(mismatched.sim, rollout(mismatched.real, pd, 3, seed=0))[0] > 0.0


def test_deterministic_gridworld_against_itself_has_zero_error():
    pair = make_gridworld_pair(3, 0.0, 0.0)
    trajs = rollout(pair.real, TabularPolicy.uniform(9, 4), 5, seed=0)
    assert per_step_transition_error(pair.sim, trajs)[0] == 0.0


def test_experiment_config_invariants():
    with pytest.raises(ValueError):
        ExperimentConfig(method="dagger")
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ValueError):
        ExperimentConfig(method="garat", budget=0)
    assert ExperimentConfig(method="sim_only", budget=0).budget == 0
    with pytest.raises(TypeError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_garat_config_merges_overrides():
    cfg = ExperimentConfig(method_config={"garat": {"transformer": {"epochs": 7}}}, budget=1234)
    g = cfg.garat_config()
    assert g.transformer.epochs == 7 and g.transformer.gamma == 0.5
    assert g.real_budget == 1234
    with pytest.raises(ValueError):
        ExperimentConfig(method_config={"garat": {"nope": 1}}).garat_config()


def test_metrics_csv_round_trip(tmp_path):
    recs = [MetricRecord("garat", 1, 900, 180.5, 0.8, 0.012, 12.5), MetricRecord("ane", 0, 0, 100.0, None)]
    path = tmp_path / "m.csv"
    write_metrics_csv(recs, path)
    assert path.read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)
    back = read_metrics_csv(path)
    assert back == sorted(recs, key=lambda r: (r.method, r.seed))


def test_summarize_takes_medians():
    recs = [MetricRecord("garat", s, 100 * s, r, r / 200.0) for s, r in enumerate([100.0, 200.0, 150.0])]
    out = summarize(recs)["garat"]
    assert out["median_raw_return"] == 150.0 and out["median_scaled_return"] == 0.75
    assert out["max_real_transitions_used"] == 200 and out["median_transition_error"] is None


# ---------------------------------------------------------------- experiments

def test_sim_only_and_real_only_budgets(tmp_path):
    sim = run_experiment(small_config(tmp_path, "sim_only"))[0]
    real = run_experiment(small_config(tmp_path, "real_only"))[0]
    assert sim.real_transitions_used == 0
    assert real.real_transitions_used == 2000
    assert os.path.exists(tmp_path / "seed_0" / "anchors.json")


def test_short_horizon_gridworld_anchors_scale_to_zero_and_one(tmp_path):
    # with the default horizon both anchors always reach the goal, so a short one keeps them apart
    grid = {**GRID, "horizon": 6}
    kw = dict(pair=grid, seeds=[0, 1], budget=0, sim_timesteps=1000, real_timesteps=1000, eval_episodes=50)
    real = run_experiment(small_config(tmp_path, "real_only", **kw))
    sim = run_experiment(small_config(tmp_path, "sim_only", **kw))
    assert [r.scaled_return for r in real] == [1.0, 1.0]
    assert [r.scaled_return for r in sim] == [0.0, 0.0]
    assert "-0.0" not in (tmp_path / "metrics_sim_only.csv").read_text()


def test_degenerate_gridworld_anchors_leave_scaled_return_empty(tmp_path):
    recs = run_experiment(small_config(tmp_path, "real_only", budget=0))
    assert recs[0].scaled_return is None and recs[0].raw_return == 1.0


def test_pendulum_anchors_scale_to_zero_and_one(tmp_path):
    pend = {"env": "pendulum", "property": "mass", "default": 4.89, "modified": 100.0}
    sim = run_experiment(small_config(tmp_path, "sim_only", pair=pend, budget=0))[0]
    real = run_experiment(small_config(tmp_path, "real_only", pair=pend, budget=0))[0]
    assert sim.scaled_return == 0.0 and real.scaled_return == 1.0


def test_garat_run_respects_budget_and_writes_outputs(tmp_path):
    rec = run_experiment(small_config(tmp_path, "garat"))[0]
    assert 0 < rec.real_transitions_used <= 200
    for name in ("metrics_garat.csv", "config.json", "seed_0/history_garat.json", "seed_0/transformer_garat.json",
                 "seed_0/policy_garat.json", "seed_0/curve_sim.csv"):
        assert os.path.exists(tmp_path / name), name


def test_ane_run_writes_sweep(tmp_path):
    recs = run_experiment(small_config(tmp_path, "ane", pair={**GRID, "modified": 0.3}))
    lines = (tmp_path / "sweep_ane.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 and len(recs) == 1 and recs[0].real_transitions_used == 0


def test_gridworld_outer_loop_does_not_lose_real_return():
    pair = make_gridworld_pair(3, 0.0, 0.5)
    real_mdp = pair.real.tabular_view()
    best = policy_return(real_mdp, optimal_policy(real_mdp))
    cfg = GaratConfig(n_transformer_updates=5, retrain_timesteps=2000, real_budget=500,
                      agent=AgentTrainConfig(batch_timesteps=500))
    cfg.transformer.batch_timesteps = 256
    before, after = [], []
    for seed in range(5):
        pi = AgentTrainer(AgentTrainConfig(batch_timesteps=500), 3000, seed).fit(pair.sim).policy_
        est = GaratTransfer(cfg, seed, eval_episodes=20).fit(pair.sim, pair.real, pi, 1)
        before.append(evaluate_policy(pair.real, pi, 100, seed=[seed, 5])[0])
        after.append(evaluate_policy(pair.real, est.policy_, 100, seed=[seed, 5])[0])
        assert est.real_transitions_used_ <= 500
        assert policy_return(real_mdp, policy_table(est.policy_, 9)) <= best + 1e-9
    assert np.median(after) >= np.median(before)


# ---------------------------------------------------------------- verification

def test_unknown_suite_rejected():
    with pytest.raises(ValueError):
        verify("everything")


@pytest.mark.parametrize("suite", ["marginals", "propositions"])
def test_fast_suites_pass(suite):
    report = verify(suite, seed=1)
    assert report["passed"] and report["wall_ms"] > 0
    json.dumps(report)


# ---------------------------------------------------------------- command line

def write_config(tmp_path, **kw):
    doc = small_config(tmp_path / "out").to_dict()
    doc.pop("out_dir")
    doc.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_cli_ground_collect_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "out")
    assert cli.main(["train-sim", "--config", cfg, "--out", out, "--seed", "2"]) == 0
    policy = os.path.join(out, "seed_2", "policy_sim.json")
    assert cli.main(["collect-real", "--config", cfg, "--out", out, "--seed", "2", "--policy", policy,
                     "--episodes", "3"]) == 0
    data = os.path.join(out, "seed_2", "real_trajectories.csv")
    for method in ("gat", "garat"):
        assert cli.main(["--config", cfg, "ground", method, "--out", out, "--seed", "2", "--policy", policy,
                         "--data", data]) == 0
        doc = json.loads((tmp_path / "out" / f"ground_{method}.json").read_text())
        assert doc["2"]["real_transitions_used"] > 0
    assert cli.main(["transfer", "--config", cfg, "--out", out, "--method", "sim_only"]) == 0
    assert cli.main(["report", "--out", out]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "sim_only" in report["summary"]
    capsys.readouterr()


def test_cli_budget_violation_exits_nonzero(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "out")
    assert cli.main(["collect-real", "--config", cfg, "--out", out, "--episodes", "5"]) == 0
    data = os.path.join(out, "seed_0", "real_trajectories.csv")
    assert cli.main(["ground", "gat", "--config", cfg, "--out", out, "--budget", "1", "--data", data]) == 2
    assert "budget" in capsys.readouterr().err


def test_cli_verify_and_errors(tmp_path, capsys):
    assert cli.main(["verify", "propositions", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "verify_propositions.json").read_text())["passed"]
    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "everything"])
    assert exc.value.code != 0
    assert cli.main(["transfer", "--config", str(tmp_path / "missing.toml")]) == 2
    capsys.readouterr()


def test_cli_global_flags_before_or_after_subcommand(tmp_path, capsys):
    p = cli.build_parser()
    a = p.parse_args(["--seed", "3", "--out", "x", "verify", "marginals"])
    b = p.parse_args(["verify", "marginals", "--seed", "3", "--out", "x"])
    assert (a.seed, a.out) == (b.seed, b.out) == (3, "x")
