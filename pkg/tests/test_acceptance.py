"""Acceptance criteria, each checked at its stated tolerance.

Every test records a one-line verdict that conftest prints in the terminal
summary. The two learning criteria train into ``VOLTGRID_ACCEPTANCE_RUNS``
(default ``runs/`` at the repository root) and resume from whatever is there,
so a finished run is only evaluated again.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from checks import record, run_soc_audit
from oracles import newton_raphson
from voltgrid import diffcore
from voltgrid.config import from_dict
from voltgrid.data import load_scenario
from voltgrid.env import make_env
from voltgrid.fleet import ChargerState, EvSession, apply_charger_action, feasible_power_range
from voltgrid.grid import load_network, solve_power_flow
from voltgrid.learner import AgentPolicy, LagMAPPOAgent, LagrangeState, collect_rollout, dual_update, evaluate, load_agent, train
from voltgrid.learner.ppo import _batch
from voltgrid.learner.train import read_log
from voltgrid.signals import episode_objective

ROOT = Path(__file__).resolve().parents[1]
RUNS = Path(os.environ.get("VOLTGRID_ACCEPTANCE_RUNS", ROOT / "runs"))
TRAIN_ITERS = 500
ABLATION_SEEDS = (0, 1, 2)
EVAL_EPISODES = 20


# ---------------------------------------------------------------- 1 power flow

def test_criterion_1_power_flow_oracle():
    start = time.perf_counter()
    worst, slowest = 0.0, 0.0
    rng = np.random.default_rng(2024)
    for name in ("two_bus", "ieee33"):
        net = load_network(name)
        n = net.n_bus
        for _ in range(200):
            p, q = net.base_injection_pu(rng.uniform(0.0, 1.6, n))
            p = p + rng.uniform(-0.01, 0.01, n) * (np.arange(n) != net.index[net.slack_bus])
            r = solve_power_flow(net, p, q)
            assert r.converged
            worst = max(worst, float(np.max(np.abs(r.voltages - newton_raphson(net, p, q)))))
            if name == "ieee33":
                # best of three, the usual way to time a short call
                times = []
                for _ in range(3):
                    t0 = time.perf_counter()
                    solve_power_flow(net, p, q)
                    times.append(time.perf_counter() - t0)
                slowest = max(slowest, min(times))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and slowest < 5e-3 and elapsed < 60.0
    record(1, ok, f"max |V_bfs - V_nr| = {worst:.2e} p.u. (<= 1e-5); slowest 33-bus solve {slowest * 1e3:.2f} ms (< 5); {elapsed:.1f} s (< 60)")
    assert ok


# ---------------------------------------------------------------- 2 physics

def test_criterion_2_physics_invariants(desk):
    env = make_env(desk)
    worst = max(run_soc_audit(env, seed, np.random.default_rng(seed)) for seed in range(1000))
    rng = np.random.default_rng(7)
    dt = env.config.dt_hours
    breaches = 0
    for _ in range(100_000 // 50):
        pch, pdis = rng.uniform(1, 50, 2)
        eta_c, eta_d = rng.uniform(0.5, 1.0, 2)
        cap = float(rng.uniform(10, 100))
        ev = EvSession(0, 10_000, float(rng.uniform(0, cap)), cap, capacity_kwh=cap)
        ch = ChargerState(pch, pdis, eta_c, eta_d, ev)
        for req in rng.uniform(-3 * pdis, 3 * pch, 50):
            lo, hi = feasible_power_range(ch, dt)
            res = apply_charger_action(ch, float(req), dt)
            inside = -pdis - 1e-12 <= res.applied_kw <= pch + 1e-12 and lo - 1e-12 <= res.applied_kw <= hi + 1e-12
            breaches += not (inside and ev.soc_min_kwh - 1e-12 <= ev.soc_kwh <= ev.soc_max_kwh + 1e-12)
    ok = worst <= 1e-9 and breaches == 0
    record(2, ok, f"worst SoC ledger error over 1000 episodes {worst:.1e} kWh (<= 1e-9); {breaches} bound breaches in 1e5 projected actions")
    assert ok


# ---------------------------------------------------------------- 3 signals

def test_criterion_3_cost_functions(desk):
    unit = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(ROOT / "tests" / "test_signals.py")],
        capture_output=True, text=True, cwd=ROOT,
    )
    env = make_env(desk)
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        env.reset(seed)
        bds = []
        while not env.done:
            *_, info = env.step(rng.uniform(-22, 22, (env.n_agents, env.n_chargers)))
            bds.append(info["breakdown"])
        lhs = episode_objective(bds)
        rhs = sum(-r + c for r, c in zip(env.trace.reward, env.trace.cost))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    summary = unit.stdout.strip().splitlines()[-1] if unit.stdout.strip() else unit.stderr.strip()[-200:]
    ok = unit.returncode == 0 and worst <= 1e-9
    record(3, ok, f"signals unit examples: {summary}; decomposition identity rel. error {worst:.1e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------------- 4 gradients

def test_criterion_4_gradient_checks(desk):
    start = time.perf_counter()
    cfg = from_dict({"seed": 3})
    env = make_env(desk)
    c = desk.chargers
    agent = LagMAPPOAgent(cfg, env.obs_dim, env.n_agents, env.n_chargers, c.p_ch_max_kw, c.p_dis_max_kw, dtype=torch.float64)
    assert (cfg.encoder.variant, cfg.encoder.layers) == ("attention", 2)
    buf = collect_rollout([env], agent, 16, [0], np.random.default_rng(0))
    batch = _batch(agent, buf, np.arange(10, 16))
    g = torch.Generator().manual_seed(0)
    r_emb = torch.randn(6, env.n_agents, agent.emb_dim, generator=g, dtype=torch.float64)
    r_act = torch.randn(6, env.n_chargers, generator=g, dtype=torch.float64)

    def enc_loss():
        return (agent.embed(batch["windows"], batch["masks"]) * r_emb).sum()

    emb = agent.embed(batch["windows"], batch["masks"]).detach()

    def actor_loss():
        a = agent.actor_for(0)
        return (a.log_prob(emb[:, 0], batch["u"][:, 0], batch["occ"][:, 0]) * r_act[:, 0]).sum() + (a(emb[:, 0]) * r_act).sum()

    joint = agent.joint(emb)
    errors = {
        "encoder": diffcore.finite_difference_check(enc_loss, agent.group("encoder"), max_entries=24),
        "actor": diffcore.finite_difference_check(actor_loss, diffcore.ParamSet.from_module(agent.actor_for(0)), max_entries=48),
        "critic_r": diffcore.finite_difference_check(lambda: (agent.critic_r(joint) * r_act[:, 0]).sum(), diffcore.ParamSet.from_module(agent.critic_r), max_entries=48),
        "critic_c": diffcore.finite_difference_check(lambda: (agent.critic_c(joint) * r_act[:, 1]).sum(), diffcore.ParamSet.from_module(agent.critic_c), max_entries=48),
    }
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-3 and elapsed < 300
    record(4, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f" (< 1e-3); {elapsed:.0f} s (< 300)")
    assert ok


# ---------------------------------------------------------------- 5 dual ascent

def test_criterion_5_lagrangian_mechanics(tmp_path, smoke):
    fixed = dual_update(LagrangeState(0.7, 2.0, 0.1), 2.0).lam == 0.7
    floor = dual_update(LagrangeState(0.0, 2.0, 0.1), 1.0).lam == 0.0
    linear = dual_update(LagrangeState(1.0, 1.0, 0.5), 3.0).lam == 2.0
    cfg = from_dict({
        "encoder": {"variant": "attention", "layers": 1, "model_dim": 8, "heads": 2, "window": 3},
        "actor_hidden": 8, "critic_hidden": 8, "minibatch": 64, "ppo_epochs": 1,
        "iterations": 50, "c_bar": -1.0, "checkpoint_every": 0,
    })
    train(cfg, tmp_path, scenario=smoke)
    lam = [float(r["lambda"]) for r in read_log(tmp_path / "train_log.csv")]
    monotone = len(lam) == 50 and all(b >= a for a, b in zip(lam, lam[1:]))
    ok = fixed and floor and linear and monotone
    record(5, ok, f"fixed point {fixed}, projection at 0 {floor}, linear ascent {linear}; lambda nondecreasing over {len(lam)} iterations: {monotone} ({lam[0]:.3g} -> {lam[-1]:.3g})")
    assert ok


# ---------------------------------------------------------------- 6 learning

def trained_run(name: str, overrides: dict) -> Path:
    """Train (or finish training) a desk run; an already finished run is left as is."""
    out = RUNS / name
    cfg = from_dict({"iterations": TRAIN_ITERS, **overrides})
    train(cfg, out, resume=(out / "latest.ckpt").exists())
    return out


def eval_summary(policy, desk):
    return evaluate(policy, desk, episodes=EVAL_EPISODES)["summary"]


def test_criterion_6_learning_improvement(desk):
    t0 = time.perf_counter()
    run = trained_run("desk_attention_seed0", {"seed": 0})
    agent, _ = load_agent(run / "latest.ckpt", desk)
    learned = eval_summary(AgentPolicy(agent), desk)
    rand, greedy = eval_summary("random", desk), eval_summary("greedy", desk)
    obj, obj_r = learned["objective"][0], rand["objective"][0]
    vv, vv_g = learned["avg_voltage_violation"][0], greedy["avg_voltage_violation"][0]
    ds, ds_g = learned["avg_demand_dissatisfaction"][0], greedy["avg_demand_dissatisfaction"][0]
    a, b, c = obj <= 0.85 * obj_r, vv <= 0.8 * vv_g, ds <= 1.1 * ds_g
    iters = len(read_log(run / "train_log.csv"))
    record(
        6, a and b and c,
        f"({iters} iterations, {time.perf_counter() - t0:.0f} s) "
        f"(a) objective {obj:.1f} vs random {obj_r:.1f} ({obj / obj_r:.1%}, need <= 85%): {a}; "
        f"(b) voltage violation {vv:.4g} vs greedy {vv_g:.4g} ({vv / vv_g:.1%}, need <= 80%): {b}; "
        f"(c) dissatisfaction {ds:.3f} vs greedy {ds_g:.3f} ({ds / ds_g:.1%}, need <= 110%): {c}",
    )
    assert a and b and c


# ---------------------------------------------------------------- 7 ablation (soft)

def test_criterion_7_ablation_direction(desk):
    finals = {}
    for variant in ("attention", "passthrough"):
        objs = []
        for seed in ABLATION_SEEDS:
            over = {"seed": seed}
            if variant == "passthrough":
                over["encoder"] = {"variant": "passthrough", "window": 1}
            run = trained_run(f"desk_{variant}_seed{seed}", over)
            agent, _ = load_agent(run / "latest.ckpt", desk)
            objs.append(eval_summary(AgentPolicy(agent), desk)["objective"][0])
        finals[variant] = float(np.mean(objs))
    holds = finals["attention"] <= finals["passthrough"]
    # reported, never gated
    record(7, True, f"attention objective {finals['attention']:.1f} vs passthrough {finals['passthrough']:.1f} over seeds {ABLATION_SEEDS}; ordering holds: {holds}" + ("" if holds else " [FLAG]"))


# ---------------------------------------------------------------- 8 determinism

def test_criterion_8_bit_reproducibility(tmp_path):
    from voltgrid.cli import main

    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"scenario": "smoke_2bus", "encoder": {"variant": "attention", "layers": 1, "model_dim": 8, "heads": 2, "window": 3},'
                   ' "actor_hidden": 8, "critic_hidden": 8, "minibatch": 32, "ppo_epochs": 2, "checkpoint_every": 1}')
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--iters", "3", "--out", str(tmp_path / name / "run")]) == 0
        ck = str(tmp_path / name / "run" / "latest.ckpt")
        assert main(["eval", "--checkpoint", ck, "--scenario", "smoke_2bus", "--episodes", "3", "--out", str(tmp_path / name / "eval")]) == 0
        assert main(["simulate", "--policy", "random", "--scenario", "smoke_2bus", "--episodes", "2", "--out", str(tmp_path / name / "sim")]) == 0

    def strip_wall(p):
        lines = p.read_text().splitlines()
        return [",".join(line.split(",")[:-1]) for line in lines]

    same, compared = [], 0
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_dir() or f.name == "manifest.json":
            continue
        g = tmp_path / "b" / f.relative_to(tmp_path / "a")
        compared += 1
        same.append(strip_wall(f) == strip_wall(g) if f.name == "train_log.csv" else f.read_bytes() == g.read_bytes())
    ok = compared > 0 and all(same)
    record(8, ok, f"{sum(same)}/{compared} output files bit-identical across reruns (logs compared without wall time)")
    assert ok


# ---------------------------------------------------------------- 9 decentralization

def test_criterion_9_decentralized_execution(desk):
    env = make_env(desk)
    c = desk.chargers
    agent = LagMAPPOAgent(from_dict({"seed": 1}), env.obs_dim, env.n_agents, env.n_chargers, c.p_ch_max_kw, c.p_dis_max_kw)
    pol = AgentPolicy(agent)
    obs = env.reset(0)
    pol.reset(env, 0)
    for _ in range(20):
        obs, *_ = env.step(pol.act(obs, env))
    pol.tracker.push(obs)
    rows, mask = pol.tracker.rows, pol.tracker.mask
    rng = np.random.default_rng(0)
    changed = 0
    for k in range(env.n_agents):
        base = pol.act_agent(k, rows[k].copy(), mask[k].copy())
        for _ in range(25):
            noisy = rows + rng.standard_normal(rows.shape) * rng.choice([0.1, 10.0, 1e3])
            noisy[k] = rows[k]
            # the batched training path embeds every agent at once; agent k's slice must not notice
            with torch.no_grad():
                emb = agent.embed(agent.to_tensor(noisy[None]), torch.as_tensor(mask[None]))[:, k]
                joint_path = agent.actor_for(k).to_power(agent.actor_for(k)(emb)[0].double().numpy())
            changed += not np.array_equal(base, pol.act_agent(k, noisy[k], mask[k]))
            changed += not np.allclose(base, joint_path, rtol=0, atol=1e-4)
    ok = changed == 0
    record(9, ok, f"{changed} of {2 * 25 * env.n_agents} checks saw an agent's action move when other agents' buffers were perturbed")
    assert ok
