"""Clipped-surrogate actor loss, critic losses, parameter updates and dual ascent."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
import torch

from .. import diffcore
from .agent import LagMAPPOAgent, LagrangeState
from .rollout import RolloutBuffer, lagrangian_advantage

log = logging.getLogger(__name__)


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-sample pessimistic surrogate min(rho * A, clip(rho) * A)."""
    return torch.min(ratio * adv, ratio.clamp(1.0 - eps, 1.0 + eps) * adv)


def _batch(agent: LagMAPPOAgent, buffer: RolloutBuffer, idx: np.ndarray) -> dict:
    t = agent.to_tensor
    return {
        "windows": t(buffer.windows[idx]),
        "masks": torch.as_tensor(buffer.masks[idx]),
        "u": t(buffer.u[idx]),
        "logp": t(buffer.logp[idx]),
        "occ": t(buffer.occ[idx]),
        "reward": t(buffer.reward[idx]),
        "cost": t(buffer.cost[idx]),
    }


def actor_loss(agent: LagMAPPOAgent, batch: dict, emb: torch.Tensor, adv_lag: torch.Tensor, eps: float, entropy_coef: float = 0.0):
    """Sum over agents of the negative clipped surrogate; also returns diagnostics.

    Samples whose importance ratio is non-finite are dropped from the mean.
    """
    total = emb.new_zeros(())
    clip_frac = []
    for k in range(agent.n_agents):
        actor = agent.actor_for(k)
        lp = actor.log_prob(emb[:, k], batch["u"][:, k], batch["occ"][:, k])
        ratio = torch.exp(lp - batch["logp"][:, k])
        ok = torch.isfinite(ratio)
        if not bool(ok.all()):
            log.warning("agent %d: %d samples with non-finite importance ratio skipped", k, int((~ok).sum()))
        surr = clipped_surrogate(ratio[ok], adv_lag[ok], eps)
        loss_k = -surr.mean() if surr.numel() else emb.new_zeros(())
        if entropy_coef:
            loss_k = loss_k - entropy_coef * actor.entropy_proxy(batch["occ"][:, k])
        total = total + loss_k
        clip_frac.append(float(((ratio[ok] - 1.0).abs() > eps).float().mean()) if ok.any() else 0.0)
    return total, {"clip_frac": float(np.mean(clip_frac))}


def critic_losses(agent: LagMAPPOAgent, emb: torch.Tensor, ret_r, ret_c, batch: dict, lam: float) -> dict:
    """Squared errors measured in each critic's own scale units."""
    j = agent.joint(emb)
    out = {}
    v = agent.critic_r(j)
    out["critic_r"] = (((v - ret_r) / agent.critic_r.scale) ** 2).mean()
    if agent.critic_c is not None:
        v = agent.critic_c(j)
        out["critic_c"] = (((v - ret_c) / agent.critic_c.scale) ** 2).mean()
    if agent.critic_l is not None:
        target = paper_literal_targets(batch["reward"], batch["cost"], lam)
        v = agent.critic_l(j)
        out["critic_l"] = (((v - target) / agent.critic_l.scale) ** 2).mean()
    return out


def paper_literal_targets(reward, cost, lam: float):
    """Per-step Lagrangian-shaped target r - lambda * c."""
    return reward - lam * cost


def _apply(agent: LagMAPPOAgent, loss: torch.Tensor, groups: dict) -> float:
    """Backprop ``loss`` into the listed groups, clip each group separately, take one Adam step."""
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss)}")
    names = [n for g in groups.values() for n in g]
    params = diffcore.ParamSet({k: agent.params[k] for k in names})
    grads = diffcore.grad(lambda: loss, params)
    clipped = {}
    for group in groups.values():
        sub, _ = diffcore.clip_by_global_norm(diffcore.ParamSet({k: grads[k] for k in group}), agent.cfg.max_grad_norm)
        clipped.update(sub.items())
    diffcore.adam_step(params, diffcore.ParamSet({k: clipped[k] for k in names}), agent.opt)
    return float(loss.detach())


def _groups(agent: LagMAPPOAgent) -> dict:
    names = agent.params.names()
    g = {"policy": [n for n in names if n.startswith(("encoder", "actor"))]}
    for c in ("critic_r", "critic_c", "critic_l"):
        sel = [n for n in names if n.startswith(c + "/")]
        if sel:
            g[c] = sel
    return g


def actor_update(agent: LagMAPPOAgent, buffer: RolloutBuffer, idx=None, adv_lag=None) -> float:
    """One gradient step of the actors (and encoder) on the clipped surrogate."""
    idx = np.arange(len(buffer)) if idx is None else idx
    if adv_lag is None:
        adv_lag = lagrangian_advantage(buffer.adv_r, buffer.adv_c, agent.lagrange.lam)
    batch = _batch(agent, buffer, idx)
    agent.train_mode(True)
    emb = agent.embed(batch["windows"], batch["masks"])
    loss, _ = actor_loss(agent, batch, emb, agent.to_tensor(np.asarray(adv_lag)[idx]), agent.cfg.clip_eps, agent.cfg.entropy_coef)
    agent.train_mode(False)
    return _apply(agent, loss, {"policy": _groups(agent)["policy"]})


def critic_update(agent: LagMAPPOAgent, buffer: RolloutBuffer, idx=None) -> dict:
    """One full-batch gradient step on every critic loss."""
    idx = np.arange(len(buffer)) if idx is None else idx
    batch = _batch(agent, buffer, idx)
    agent.train_mode(True)
    emb = agent.embed(batch["windows"], batch["masks"])
    losses = critic_losses(agent, emb, agent.to_tensor(buffer.ret_r[idx]), agent.to_tensor(buffer.ret_c[idx]), batch, agent.lagrange.lam)
    agent.train_mode(False)
    total = sum(losses.values())
    groups = {k: v for k, v in _groups(agent).items() if k != "policy"}
    _apply(agent, total, groups)
    return {k: float(v.detach()) for k, v in losses.items()}


def ppo_update(agent: LagMAPPOAgent, buffer: RolloutBuffer, rng: np.random.Generator) -> dict:
    """N_ppo epochs of shuffled minibatch updates of actors, critics and encoder."""
    cfg = agent.cfg
    adv_lag = lagrangian_advantage(buffer.adv_r, buffer.adv_c, agent.lagrange.lam)
    adv_t = agent.to_tensor(adv_lag)
    ret_r, ret_c = agent.to_tensor(buffer.ret_r), agent.to_tensor(buffer.ret_c)
    groups = _groups(agent)
    stats = {"actor_loss": [], "critic_r_loss": [], "critic_c_loss": [], "critic_l_loss": [], "clip_frac": []}
    n = len(buffer)
    agent.train_mode(True)
    try:
        for _ in range(cfg.ppo_epochs):
            perm = rng.permutation(n)
            for s in range(0, n, cfg.minibatch):
                idx = perm[s : s + cfg.minibatch]
                batch = _batch(agent, buffer, idx)
                emb = agent.embed(batch["windows"], batch["masks"])
                a_loss, diag = actor_loss(agent, batch, emb, adv_t[idx], cfg.clip_eps, cfg.entropy_coef)
                c_losses = critic_losses(agent, emb, ret_r[idx], ret_c[idx], batch, agent.lagrange.lam)
                total = a_loss + cfg.vf_coef * sum(c_losses.values())
                _apply(agent, total, groups)
                stats["actor_loss"].append(float(a_loss.detach()))
                stats["clip_frac"].append(diag["clip_frac"])
                for k, v in c_losses.items():
                    stats[k + "_loss"].append(float(v.detach()))
    finally:
        agent.train_mode(False)
    return {k: (float(np.mean(v)) if v else 0.0) for k, v in stats.items()}


def dual_update(state: LagrangeState, observed_cost: float) -> LagrangeState:
    """Projected dual ascent on the Lagrange multiplier."""
    if not np.isfinite(observed_cost):
        raise FloatingPointError("observed cost must be finite")
    lam = max(0.0, state.lam + state.eta_lag * (observed_cost - state.c_bar))
    if state.lam_max is not None:
        lam = min(lam, state.lam_max)
    return replace(state, lam=lam)
