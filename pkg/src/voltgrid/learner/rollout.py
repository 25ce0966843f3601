"""Rollout collection, the trajectory buffer and advantage estimation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from ..env import ChargingEnv, metrics
from .agent import LagMAPPOAgent


class IncompleteEpisodeError(ValueError):
    pass


class WindowTracker:
    """Rolling left-padded observation windows for every agent."""

    def __init__(self, n_agents: int, w: int, obs_dim: int):
        self.rows = np.zeros((n_agents, w, obs_dim))
        self.mask = np.zeros((n_agents, w), dtype=bool)

    def push(self, obs: Sequence[np.ndarray]) -> None:
        self.rows[:, :-1] = self.rows[:, 1:]
        self.mask[:, :-1] = self.mask[:, 1:]
        self.rows[:, -1] = np.asarray(obs)
        self.mask[:, -1] = True


@dataclass
class RolloutBuffer:
    windows: np.ndarray  # (N, K, w, d)
    masks: np.ndarray  # (N, K, w)
    u: np.ndarray  # (N, K, C) pre-squash actions
    logp: np.ndarray  # (N, K) behaviour log-probabilities
    occ: np.ndarray  # (N, K, C) occupied-charger masks
    reward: np.ndarray  # (N,)
    cost: np.ndarray  # (N,)
    done: np.ndarray  # (N,)
    episode: np.ndarray  # (N,)
    episode_metrics: list = field(default_factory=list)
    adv_r: Optional[np.ndarray] = None
    adv_c: Optional[np.ndarray] = None
    ret_r: Optional[np.ndarray] = None
    ret_c: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.reward)

    @property
    def complete(self) -> bool:
        if len(self) == 0:
            return False
        ends = np.r_[self.episode[1:] != self.episode[:-1], True]
        return bool(np.all(self.done[ends]))


def _sample(agent: LagMAPPOAgent, rows: np.ndarray, mask: np.ndarray, occ: np.ndarray, rng, deterministic: bool):
    """Actions for a batch of environments; agent k only ever sees its own window.

    ``rows``: (B, K, w, d). Returns pre-squash ``u`` (B, K, C), log-probs (B, K)
    and charger powers in kW.
    """
    B, K, C = rows.shape[0], agent.n_agents, agent.n_actions
    u = np.zeros((B, K, C))
    logp = np.zeros((B, K))
    with torch.no_grad():
        emb = agent.embed(agent.to_tensor(rows), torch.as_tensor(mask))
        for k in range(K):
            actor = agent.actor_for(k)
            mean = actor(emb[:, k]).double().numpy()
            if deterministic:
                uk = mean
            else:
                uk = mean + actor.std().double().numpy() * rng.standard_normal((B, C))
            u[:, k] = uk
            logp[:, k] = actor.log_prob(emb[:, k], agent.to_tensor(uk), agent.to_tensor(occ[:, k])).double().numpy()
    actions = np.stack([agent.actor_for(k).to_power(u[:, k]) for k in range(K)], axis=1)
    return u, logp, actions


def collect_rollout(
    envs: Sequence[ChargingEnv],
    agent: LagMAPPOAgent,
    T: int,
    seeds: Sequence[int],
    rng: np.random.Generator,
    deterministic: bool = False,
) -> RolloutBuffer:
    """Run the environment instances in lockstep for ``T`` steps from fresh resets.

    Actions for all instances come from one batched forward pass; the buffer
    stores each instance's episode contiguously, in instance order.
    """
    agent.train_mode(False)
    E = len(envs)
    keys = ("windows", "masks", "u", "logp", "occ", "reward", "cost", "done")
    cols = [{k: [] for k in keys} for _ in range(E)]
    ep_metrics: list = [None] * E
    layout = envs[0].layout
    obs = [env.reset(seed) for env, seed in zip(envs, seeds)]
    trackers = [WindowTracker(env.n_agents, agent.cfg.encoder.window, env.obs_dim) for env in envs]
    for tr, o in zip(trackers, obs):
        tr.push(o)
    live = list(range(E))
    for _ in range(T):
        if not live:
            break
        # the buffer keeps float32 windows; acting on the same values keeps the first PPO ratio at exactly 1
        rows = np.stack([trackers[e].rows for e in live]).astype(np.float32)
        mask = np.stack([trackers[e].mask for e in live])
        occ = np.stack([layout.occupancy_mask(np.asarray(obs[e])) for e in live])
        u, logp, actions = _sample(agent, rows, mask, occ, rng, deterministic)
        still = []
        for j, e in enumerate(live):
            c = cols[e]
            c["windows"].append(rows[j])
            c["masks"].append(mask[j])
            obs[e], r, cost, info = envs[e].step(actions[j])
            c["u"].append(u[j])
            c["logp"].append(logp[j])
            c["occ"].append(occ[j])
            c["reward"].append(r)
            c["cost"].append(cost)
            c["done"].append(info["done"])
            trackers[e].push(obs[e])
            if info["done"]:
                ep_metrics[e] = metrics(envs[e].trace)
            else:
                still.append(e)
        live = still
    arr = {k: np.concatenate([np.asarray(c[k]) for c in cols]) for k in keys}
    episode = np.concatenate([np.full(len(c["reward"]), e) for e, c in enumerate(cols)])
    return RolloutBuffer(
        windows=arr["windows"],
        masks=arr["masks"].astype(bool),
        u=arr["u"],
        logp=arr["logp"],
        occ=arr["occ"].astype(np.float64),
        reward=arr["reward"].astype(np.float64),
        cost=arr["cost"].astype(np.float64),
        done=arr["done"].astype(bool),
        episode=episode.astype(int),
        episode_metrics=[m for m in ep_metrics if m is not None],
    )


def discounted_returns(x: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(x))
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """GAE over one terminated episode (no bootstrap past the last step)."""
    n = len(rewards)
    adv = np.zeros(n)
    nxt = 0.0
    acc = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * nxt - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt = values[t]
    return adv


def standardize(x: np.ndarray) -> np.ndarray:
    if len(x) < 2:
        return x - x.mean() if len(x) else x
    return (x - x.mean()) / (x.std() + 1e-8)


def critic_values(agent: LagMAPPOAgent, buffer: RolloutBuffer, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    vr, vc = [], []
    with torch.no_grad():
        for s in range(0, len(buffer), chunk):
            emb = agent.embed(agent.to_tensor(buffer.windows[s : s + chunk]), torch.as_tensor(buffer.masks[s : s + chunk]))
            j = emb.reshape(emb.shape[0], -1)
            vr.append(agent.critic_r(j).double().numpy())
            vc.append(agent.critic_c(j).double().numpy() if agent.critic_c is not None else np.zeros(len(j)))
    return np.concatenate(vr), np.concatenate(vc)


def compute_advantages(
    buffer: RolloutBuffer,
    agent: Optional[LagMAPPOAgent],
    gamma: float,
    gae_lambda: float,
    mode: str = "gae",
    values: Optional[tuple[np.ndarray, np.ndarray]] = None,
    standardize_reward: bool = True,
) -> RolloutBuffer:
    """Fill reward/cost advantages and critic targets in place.

    ``mc``: discounted return minus baseline; ``gae``: generalized advantage
    estimation. Reward advantages are standardized over the batch, cost
    advantages are left in cost units. ``values`` overrides the critics.
    """
    if not buffer.complete:
        raise IncompleteEpisodeError("buffer holds an unfinished episode")
    if values is None:
        values = critic_values(agent, buffer)
    vr, vc = values
    cost = buffer.cost if (agent is None or agent.critic_c is not None) else np.zeros_like(buffer.cost)
    adv_r = np.zeros(len(buffer))
    adv_c = np.zeros(len(buffer))
    ret_r = np.zeros(len(buffer))
    ret_c = np.zeros(len(buffer))
    for e in np.unique(buffer.episode):
        sl = np.flatnonzero(buffer.episode == e)
        r, c = buffer.reward[sl], cost[sl]
        if mode == "mc":
            gr, gc = discounted_returns(r, gamma), discounted_returns(c, gamma)
            adv_r[sl], adv_c[sl] = gr - vr[sl], gc - vc[sl]
            ret_r[sl], ret_c[sl] = gr, gc
        elif mode == "gae":
            adv_r[sl] = gae(r, vr[sl], gamma, gae_lambda)
            adv_c[sl] = gae(c, vc[sl], gamma, gae_lambda)
            ret_r[sl], ret_c[sl] = adv_r[sl] + vr[sl], adv_c[sl] + vc[sl]
        else:
            raise ValueError(f"unknown advantage mode {mode!r}")
    buffer.adv_r = standardize(adv_r) if standardize_reward else adv_r
    buffer.adv_c = adv_c
    buffer.ret_r, buffer.ret_c = ret_r, ret_c
    return buffer


def lagrangian_advantage(adv_r, adv_c, lam: float) -> np.ndarray:
    adv_r, adv_c = np.asarray(adv_r, dtype=float), np.asarray(adv_c, dtype=float)
    if adv_r.shape != adv_c.shape:
        raise ValueError("advantage arrays differ in length")
    return adv_r - lam * adv_c
