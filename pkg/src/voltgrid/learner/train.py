"""Training loop, baseline policies and seeded evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .. import __version__, diffcore
from ..config import TrainConfig
from ..data import ScenarioBundle, load_scenario
from ..env import ChargingEnv, EpisodeConfig, make_env, metrics, norm_dict
from .agent import LagMAPPOAgent
from .ppo import dual_update, paper_literal_targets, ppo_update
from .rollout import WindowTracker, collect_rollout, compute_advantages, discounted_returns

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "iteration",
    "mean_reward",
    "mean_cost",
    "lambda",
    "actor_loss",
    "critic_r_loss",
    "critic_c_loss",
    "volt_violation",
    "dissatisfaction",
    "wall_time_s",
)
METRIC_KEYS = ("energy_cost", "cycling_overhead", "avg_voltage_violation", "avg_demand_dissatisfaction", "objective")


class TrainingAborted(RuntimeError):
    """A non-finite loss or parameter stopped training; the last good checkpoint is kept."""


class CheckpointMismatch(ValueError):
    pass


# ---------------------------------------------------------------- policies

class Policy:
    name = "policy"

    def reset(self, env: ChargingEnv, seed: int) -> None:
        pass

    def act(self, obs: Sequence[np.ndarray], env: ChargingEnv) -> list[np.ndarray]:
        raise NotImplementedError


class ZeroPolicy(Policy):
    name = "zero"

    def act(self, obs, env):
        return [np.zeros(env.n_chargers) for _ in obs]


class GreedyPolicy(Policy):
    """Uncoordinated comparator: full charging rate on every occupied charger."""

    name = "greedy"

    def act(self, obs, env):
        p = env.config.scenario.chargers.p_ch_max_kw
        return [p * env.layout.occupancy_mask(np.asarray(o)) for o in obs]


class RandomPolicy(Policy):
    """Uniform in the charger box bounds, seeded per episode."""

    name = "random"

    def reset(self, env, seed):
        self.rng = np.random.default_rng([int(seed), 0x5EED])

    def act(self, obs, env):
        c = env.config.scenario.chargers
        return [self.rng.uniform(-c.p_dis_max_kw, c.p_ch_max_kw, env.n_chargers) for _ in obs]


class AgentPolicy(Policy):
    """Deterministic (distribution-mean) actors; agent k reads only its own window."""

    name = "checkpoint"

    def __init__(self, agent: LagMAPPOAgent):
        self.agent = agent

    def reset(self, env, seed):
        self.tracker = WindowTracker(env.n_agents, self.agent.cfg.encoder.window, env.obs_dim)
        self._pending = True

    def act_agent(self, k: int, rows: np.ndarray, mask: np.ndarray) -> np.ndarray:
        a = self.agent
        with torch.no_grad():
            emb = a.embed_agent(k, a.to_tensor(rows[None]), torch.as_tensor(mask[None]))
            u = a.actor_for(k)(emb)[0].double().numpy()
        return a.actor_for(k).to_power(u)

    def act(self, obs, env):
        self.tracker.push(obs)
        return [self.act_agent(k, self.tracker.rows[k], self.tracker.mask[k]) for k in range(env.n_agents)]


BASELINES = {"zero": ZeroPolicy, "greedy": GreedyPolicy, "random": RandomPolicy}


def run_episode(env: ChargingEnv, policy: Policy, seed: int) -> dict:
    obs = env.reset(seed)
    policy.reset(env, seed)
    done = False
    while not done:
        obs, _, _, info = env.step(policy.act(obs, env))
        done = info["done"]
    return metrics(env.trace)


def resolve_scenario(scenario: Union[str, Path, ScenarioBundle]) -> ScenarioBundle:
    return scenario if isinstance(scenario, ScenarioBundle) else load_scenario(scenario)


def summarize(rows: list[dict], keys: Sequence[str] = METRIC_KEYS) -> dict:
    """Mean and population std of each metric; undefined (NaN) entries are skipped."""
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=float)
        vals = vals[np.isfinite(vals)]
        out[k] = (float(vals.mean()), float(vals.std())) if vals.size else (float("nan"), float("nan"))
    return out


def evaluate(
    policy: Union[Policy, str],
    scenario,
    episodes: int = 20,
    seed_base: int = 100_000,
    horizon_steps: Optional[int] = None,
) -> dict:
    """Run ``episodes`` seeded episodes; returns per-episode rows and a mean/std summary."""
    bundle = resolve_scenario(scenario)
    if isinstance(policy, str):
        if policy not in BASELINES:
            raise ValueError(f"unknown baseline policy {policy!r}")
        policy = BASELINES[policy]()
    env = ChargingEnv(EpisodeConfig(bundle, horizon_steps=horizon_steps))
    if isinstance(policy, AgentPolicy):
        a = policy.agent
        if (a.obs_dim, a.n_agents, a.n_actions) != (env.obs_dim, env.n_agents, env.n_chargers):
            raise CheckpointMismatch(
                f"checkpoint expects obs_dim={a.obs_dim}, agents={a.n_agents}, chargers={a.n_actions}; "
                f"scenario has {env.obs_dim}, {env.n_agents}, {env.n_chargers}"
            )
    rows = []
    for e in range(episodes):
        seed = seed_base + e
        m = run_episode(env, policy, seed)
        m["episode"], m["seed"] = e, seed
        rows.append(m)
    return {"policy": policy.name, "rows": rows, "summary": summarize(rows)}


# ---------------------------------------------------------------- agent construction

def build_agent(cfg: TrainConfig, bundle: ScenarioBundle, env: Optional[ChargingEnv] = None) -> LagMAPPOAgent:
    env = env or ChargingEnv(EpisodeConfig(bundle, horizon_steps=cfg.horizon_steps))
    c = bundle.chargers
    return LagMAPPOAgent(cfg, env.obs_dim, env.n_agents, env.n_chargers, c.p_ch_max_kw, c.p_dis_max_kw)


def load_agent(path, scenario=None) -> tuple[LagMAPPOAgent, dict]:
    """Rebuild an agent from a checkpoint; the config travels inside the checkpoint."""
    from ..config import from_dict

    arrays, header = diffcore.load_checkpoint(path)
    meta = header["meta"]
    doc = dict(meta["config"])
    cfg = from_dict(doc)
    bundle = resolve_scenario(scenario if scenario is not None else cfg.scenario)
    agent = build_agent(cfg, bundle)
    try:
        agent.load_state(arrays, meta)
    except (ValueError, KeyError) as exc:
        raise CheckpointMismatch(str(exc)) from exc
    return agent, header


def auto_c_bar(cfg: TrainConfig, bundle: ScenarioBundle, episodes: int = 3) -> float:
    """Fraction of the greedy baseline's mean per-step safety cost."""
    env = ChargingEnv(EpisodeConfig(bundle, horizon_steps=cfg.horizon_steps))
    per_step = []
    for e in range(episodes):
        m = run_episode(env, GreedyPolicy(), cfg.eval_seed_base + 10_000 + e)
        per_step.append(m["total_cost"] / env.horizon)
    return cfg.c_bar_fraction * float(np.mean(per_step))


def _critic_targets(agent: LagMAPPOAgent, buffer, gamma: float, first: bool) -> dict:
    if first:
        # discounted returns of the behaviour policy; the critics are still untrained
        def ret(x):
            return np.concatenate([discounted_returns(x[buffer.episode == e], gamma) for e in np.unique(buffer.episode)])

        out = {"critic_r": ret(buffer.reward), "critic_c": ret(buffer.cost)}
    else:
        out = {"critic_r": buffer.ret_r, "critic_c": buffer.ret_c}
    out["critic_l"] = paper_literal_targets(buffer.reward, buffer.cost, agent.lagrange.lam)
    return {n: out[n] for n in agent.critic_names()}


def _std(mean: float, sq: float) -> float:
    return math.sqrt(max(sq - mean * mean, 0.0)) or 1.0


def calibrate_scales(agent: LagMAPPOAgent, buffer, gamma: float) -> None:
    """Set each critic's offset and scale from the first batch of returns."""
    for name, x in _critic_targets(agent, buffer, gamma, first=True).items():
        m, sq = float(x.mean()), float((x * x).mean())
        agent.value_stats[name] = (m, sq)
        critic = getattr(agent, name)
        critic.offset, critic.scale = m, max(_std(m, sq), 1e-3)
    agent.scales_calibrated = True


def update_value_norm(agent: LagMAPPOAgent, buffer, rate: float) -> None:
    """Exponential running statistics of critic targets, applied output-preservingly."""
    if rate <= 0:
        return
    for name, x in _critic_targets(agent, buffer, 0.0, first=False).items():
        m0, sq0 = agent.value_stats[name]
        m = (1 - rate) * m0 + rate * float(x.mean())
        sq = (1 - rate) * sq0 + rate * float((x * x).mean())
        agent.value_stats[name] = (m, sq)
        getattr(agent, name).renormalize(m, max(_std(m, sq), 1e-3))


# ---------------------------------------------------------------- run directory I/O

def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def manifest_hash(manifest: dict) -> str:
    """Hash of everything that shapes the trajectory; the iteration budget may grow on resume."""
    core = {k: v for k, v in manifest.items() if k not in ("started_at",)}
    core["config"] = {k: v for k, v in core["config"].items() if k != "iterations"}
    return hashlib.sha256(_canonical(core).encode()).hexdigest()


def build_manifest(cfg: TrainConfig, bundle: ScenarioBundle, env: ChargingEnv, workers: int = 1) -> dict:
    return {
        "code_version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"train": cfg.seed, "eval_base": cfg.eval_seed_base},
        "scenario_hash": bundle.digest(),
        "obs_norm": norm_dict(env.config.norm),
        "obs_dim": env.obs_dim,
        "n_agents": env.n_agents,
        "n_chargers": env.n_chargers,
        "workers": workers,
        "torch_threads": 1,
    }


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainResult:
    out_dir: Path
    agent: LagMAPPOAgent
    log_rows: list
    manifest: dict


def episode_seed(cfg: TrainConfig, iteration: int, j: int) -> int:
    return cfg.seed * 1_000_003 + iteration * cfg.episodes_per_iter + j


def _save(agent, out: Path, iteration: int, rng, mhash: str, cfg: TrainConfig) -> Path:
    meta = agent.state_meta()
    meta.update({"iteration": iteration, "rng_state": _rng_state(rng), "config": cfg.to_dict()})
    arrays = agent.state_arrays()
    path = diffcore.save_checkpoint(out / "latest.ckpt", arrays, mhash, meta)
    if cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
        diffcore.save_checkpoint(out / f"ckpt_{iteration:05d}.ckpt", arrays, mhash, meta)
    return path


def train(cfg: TrainConfig, out_dir, resume: bool = False, workers: int = 1, scenario=None) -> TrainResult:
    """Rollout, advantages, PPO epochs and dual ascent, once per iteration.

    Writes ``manifest.json`` before the first iteration, appends one row per
    iteration to ``train_log.csv`` and keeps ``latest.ckpt`` plus every
    ``checkpoint_every``-th iteration. A non-finite loss raises
    :class:`TrainingAborted` and leaves the previous checkpoint untouched.
    """
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = resolve_scenario(scenario if scenario is not None else cfg.scenario)
    envs = [ChargingEnv(EpisodeConfig(bundle, horizon_steps=cfg.horizon_steps)) for _ in range(cfg.episodes_per_iter)]
    agent = build_agent(cfg, bundle, envs[0])
    manifest = build_manifest(cfg, bundle, envs[0], workers)
    mhash = manifest_hash(manifest)
    log_path = out / "train_log.csv"
    man_path = out / "manifest.json"
    rows: list[dict] = []
    start_iter = 0
    rng = np.random.default_rng([int(cfg.seed), 0xA11CE])

    if resume and (out / "latest.ckpt").exists():
        arrays, header = diffcore.load_checkpoint(out / "latest.ckpt")
        if header["manifest_hash"] != mhash:
            raise CheckpointMismatch("run directory was produced by a different config or scenario")
        agent.load_state(arrays, header["meta"])
        rng = _restore_rng(header["meta"]["rng_state"])
        start_iter = int(header["meta"]["iteration"]) + 1
        if log_path.exists():
            with open(log_path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) < start_iter]
        log.info("resuming at iteration %d (lambda=%.4g)", start_iter, agent.lagrange.lam)
    else:
        manifest = dict(manifest, started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
        man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        if cfg.c_bar == "auto":
            agent.lagrange.c_bar = auto_c_bar(cfg, bundle) if cfg.cost_channel else 0.0
        else:
            agent.lagrange.c_bar = float(cfg.c_bar)
        log.info("C_bar = %.6g", agent.lagrange.c_bar)

    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in LOG_COLUMNS])

    T = envs[0].horizon
    t0 = time.perf_counter()
    for it in range(start_iter, cfg.iterations):
        seeds = [episode_seed(cfg, it, j) for j in range(cfg.episodes_per_iter)]
        buf = collect_rollout(envs, agent, T, seeds, rng)
        if not agent.scales_calibrated:
            calibrate_scales(agent, buf, cfg.gamma)
        compute_advantages(buf, agent, cfg.gamma, cfg.gae_lambda, cfg.advantage_mode)
        update_value_norm(agent, buf, cfg.value_norm_rate)
        try:
            stats = ppo_update(agent, buf, rng)
        except FloatingPointError as exc:
            raise TrainingAborted(f"iteration {it}: {exc}") from exc
        if not agent.params.all_finite():
            raise TrainingAborted(f"iteration {it}: non-finite parameters after update")
        if cfg.cost_channel:
            agent.lagrange = dual_update(agent.lagrange, float(buf.cost.mean()))
        em = buf.episode_metrics
        row = {
            "iteration": it,
            "mean_reward": float(np.mean([m["total_reward"] for m in em])),
            "mean_cost": float(np.mean([m["total_cost"] for m in em])),
            "lambda": agent.lagrange.lam,
            "actor_loss": stats["actor_loss"],
            "critic_r_loss": stats["critic_r_loss"],
            "critic_c_loss": stats["critic_c_loss"],
            "volt_violation": float(np.mean([m["avg_voltage_violation"] for m in em])),
            "dissatisfaction": float(np.mean([m["avg_demand_dissatisfaction"] for m in em])),
            "wall_time_s": time.perf_counter() - t0,
        }
        rows.append({k: _fmt(v) for k, v in row.items()})
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([rows[-1][c] for c in LOG_COLUMNS])
        _save(agent, out, it, rng, mhash, cfg)
        log.info(
            "iter %d  R=%.2f  C=%.2f  lambda=%.4g  vv=%.4g  ds=%.3g",
            it, row["mean_reward"], row["mean_cost"], row["lambda"], row["volt_violation"], row["dissatisfaction"],
        )
    return TrainResult(out, agent, rows, manifest)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def finite_rows(rows: list[dict]) -> list[dict]:
    return [r for r in rows if all(math.isfinite(v) for v in r.values())]
