"""Lagrangian multi-agent PPO: actors, centralized critics, rollouts and training."""
from .agent import Critic, LagMAPPOAgent, LagrangeState, SquashedGaussianActor
from .ppo import actor_update, clipped_surrogate, critic_update, dual_update, ppo_update
from .rollout import RolloutBuffer, collect_rollout, compute_advantages, gae, lagrangian_advantage
from .train import AgentPolicy, TrainingAborted, evaluate, load_agent, train

__all__ = [
    "AgentPolicy",
    "Critic",
    "LagMAPPOAgent",
    "LagrangeState",
    "RolloutBuffer",
    "SquashedGaussianActor",
    "TrainingAborted",
    "actor_update",
    "clipped_surrogate",
    "collect_rollout",
    "compute_advantages",
    "critic_update",
    "dual_update",
    "evaluate",
    "gae",
    "lagrangian_advantage",
    "load_agent",
    "ppo_update",
    "train",
]
