"""Actor and critic networks and the container holding every learned parameter."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .. import diffcore
from ..config import TrainConfig
from ..encoder import TemporalEncoder, make_encoder

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0


def _mlp(sizes, act=nn.Tanh):
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


def _log1m_tanh2(u: torch.Tensor) -> torch.Tensor:
    # log(1 - tanh(u)^2) without cancellation
    return 2.0 * (math.log(2.0) - u - nn.functional.softplus(-2.0 * u))


class SquashedGaussianActor(nn.Module):
    """Diagonal Gaussian in pre-squash space, tanh-squashed onto [-p_dis_max, p_ch_max].

    Actions are carried around as the pre-squash sample ``u``; only the
    dimensions flagged in ``mask`` (occupied chargers) enter the log-probability.

    With ``per_charger`` the mean of charger ``i`` comes from one head shared by
    all charger slots, fed the station context and that slot's own
    (steps to departure, SoC gap, occupied) triple, which must be the last
    ``3 * n_actions`` input features. Otherwise one MLP maps the input to all means.
    """

    def __init__(
        self,
        in_dim: int,
        n_actions: int,
        hidden: int,
        p_ch_max: float,
        p_dis_max: float,
        init_log_std: float = -0.5,
        per_charger: bool = False,
    ):
        super().__init__()
        self.n_actions, self.per_charger = n_actions, per_charger
        if per_charger:
            self.trunk = nn.Sequential(nn.Linear(in_dim, hidden), nn.Tanh())
            self.net = _mlp([hidden + 3, hidden, 1])
        else:
            self.net = _mlp([in_dim, hidden, hidden, n_actions])
        self.log_std = nn.Parameter(torch.full((n_actions,), float(init_log_std)))
        self.lo, self.hi = -float(p_dis_max), float(p_ch_max)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        if not self.per_charger:
            return self.net(emb)
        n = self.n_actions
        ctx = self.trunk(emb)
        slots = emb[..., -3 * n :].reshape(*emb.shape[:-1], n, 3)
        x = torch.cat([ctx.unsqueeze(-2).expand(*ctx.shape[:-1], n, ctx.shape[-1]), slots], dim=-1)
        return self.net(x).squeeze(-1)

    def std(self) -> torch.Tensor:
        return torch.exp(self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))

    def to_power(self, u):
        """Map pre-squash values to kW (numpy or torch)."""
        t = np.tanh(u) if isinstance(u, np.ndarray) else torch.tanh(u)
        return self.lo + 0.5 * (t + 1.0) * (self.hi - self.lo)

    def log_prob(self, emb: torch.Tensor, u: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        mean = self(emb)
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        z = (u - mean) / torch.exp(log_std)
        lp = -0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)
        lp = lp - _log1m_tanh2(u) - math.log(0.5 * (self.hi - self.lo))
        if mask is not None:
            lp = lp * mask
        return lp.sum(-1)

    def entropy_proxy(self, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        ent = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX) + 0.5 * math.log(2 * math.pi * math.e)
        if mask is not None:
            return (ent * mask).sum(-1).mean()
        return ent.sum()


class Critic(nn.Module):
    """Centralized value head over the concatenated embeddings of all agents.

    The network works in normalized units; ``offset + scale * net(x)`` gives
    values in return units. :meth:`renormalize` moves the statistics while
    rescaling the output layer so predictions are unchanged.
    """

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.net = _mlp([in_dim, hidden, hidden, 1])
        self.offset = 0.0
        self.scale = 1.0

    def forward(self, joint: torch.Tensor) -> torch.Tensor:
        return self.offset + self.scale * self.net(joint).squeeze(-1)

    def renormalize(self, offset: float, scale: float) -> None:
        if not scale > 0:
            raise ValueError("scale must be positive")
        head = self.net[-1]
        with torch.no_grad():
            head.weight.mul_(self.scale / scale)
            head.bias.mul_(self.scale).add_(self.offset - offset).div_(scale)
        self.offset, self.scale = float(offset), float(scale)


@dataclass
class LagrangeState:
    lam: float = 0.0
    c_bar: float = 0.0
    eta_lag: float = 0.01
    lam_max: Optional[float] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


class LagMAPPOAgent:
    """Encoder(s), per-agent actors and centralized critics, plus optimizer state."""

    def __init__(self, cfg: TrainConfig, obs_dim: int, n_agents: int, n_actions: int, p_ch_max: float, p_dis_max: float, dtype=torch.float32):
        self.cfg = cfg
        self.obs_dim, self.n_agents, self.n_actions = obs_dim, n_agents, n_actions
        gen = torch.Generator().manual_seed(int(cfg.seed))
        n_enc = 1 if cfg.encoder.shared else n_agents
        self.encoders = [make_encoder(cfg.encoder, obs_dim, gen) for _ in range(n_enc)]
        per_charger = cfg.actor_head == "per-charger"
        # the per-charger head reads each slot's triple from the newest row; passthrough already ends with it
        self.slot_skip = 3 * n_actions if per_charger and cfg.encoder.variant != "passthrough" else 0
        emb = self.encoders[0].out_dim + self.slot_skip
        self.emb_dim = emb
        n_act = 1 if cfg.share_actors else n_agents
        self.actors = []
        for _ in range(n_act):
            a = SquashedGaussianActor(emb, n_actions, cfg.actor_hidden, p_ch_max, p_dis_max, cfg.init_log_std, per_charger)
            diffcore.init_module(a, gen)
            self.actors.append(a)
        self.critic_r = Critic(n_agents * emb, cfg.critic_hidden)
        diffcore.init_module(self.critic_r, gen)
        self.critic_c = None
        if cfg.cost_channel:
            self.critic_c = Critic(n_agents * emb, cfg.critic_hidden)
            diffcore.init_module(self.critic_c, gen)
        self.critic_l = None
        if cfg.critic_mode == "paper-literal":
            self.critic_l = Critic(n_agents * emb, cfg.critic_hidden)
            diffcore.init_module(self.critic_l, gen)
        for m in self.modules().values():
            m.to(dtype)
        self.dtype = dtype
        self.params = diffcore.ParamSet.merge(*(diffcore.ParamSet.from_module(m, name + "/") for name, m in self.modules().items()))
        self.opt = diffcore.OptimizerState.for_params(self.params, lr=cfg.lr)
        self.lagrange = LagrangeState(cfg.lambda_init, 0.0, cfg.eta_lag, cfg.lambda_max)
        self.scales_calibrated = False
        self.value_stats: dict[str, tuple[float, float]] = {}  # running (mean, mean square) of critic targets

    # ------------------------------------------------------------ structure
    def modules(self) -> "OrderedDict[str, nn.Module]":
        out = OrderedDict()
        for i, e in enumerate(self.encoders):
            out[f"encoder{i}"] = e
        for i, a in enumerate(self.actors):
            out[f"actor{i}"] = a
        out["critic_r"] = self.critic_r
        if self.critic_c is not None:
            out["critic_c"] = self.critic_c
        if self.critic_l is not None:
            out["critic_l"] = self.critic_l
        return out

    def critic_names(self) -> list[str]:
        return [n for n in ("critic_r", "critic_c", "critic_l") if getattr(self, n) is not None]

    def group(self, *prefixes: str) -> diffcore.ParamSet:
        return diffcore.ParamSet(OrderedDict((k, v) for k, v in self.params.items() if k.split("/")[0].startswith(prefixes)))

    def encoder_for(self, k: int) -> TemporalEncoder:
        return self.encoders[0 if len(self.encoders) == 1 else k]

    def actor_for(self, k: int) -> SquashedGaussianActor:
        return self.actors[0 if len(self.actors) == 1 else k]

    def train_mode(self, flag: bool) -> None:
        for m in self.modules().values():
            m.train(flag)

    # ------------------------------------------------------------ forward
    def _with_slots(self, emb: torch.Tensor, windows: torch.Tensor) -> torch.Tensor:
        if not self.slot_skip:
            return emb
        return torch.cat([emb, windows[..., -1, -self.slot_skip :]], dim=-1)

    def embed(self, windows: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """(B, K, w, d) windows -> (B, K, E) embeddings, each agent encoded on its own."""
        b, k = windows.shape[:2]
        if len(self.encoders) == 1:
            flat = self.encoders[0](windows.reshape(b * k, *windows.shape[2:]), masks.reshape(b * k, -1))
            return self._with_slots(flat.reshape(b, k, -1), windows)
        emb = torch.stack([self.encoders[i](windows[:, i], masks[:, i]) for i in range(k)], dim=1)
        return self._with_slots(emb, windows)

    def embed_agent(self, k: int, window: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Embedding of agent ``k`` computed from its own window only."""
        return self._with_slots(self.encoder_for(k)(window, mask), window)

    def joint(self, emb: torch.Tensor) -> torch.Tensor:
        j = emb.reshape(emb.shape[0], -1)
        return j if self.cfg.critic_grad_to_encoder else j.detach()

    def to_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    # ------------------------------------------------------------ checkpoint payload
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = self.params.to_numpy()
        out.update(diffcore.optimizer_arrays(self.opt))
        return out

    def state_meta(self) -> dict:
        return {
            "lambda": self.lagrange.lam,
            "c_bar": self.lagrange.c_bar,
            "opt_step": self.opt.step,
            "critic_scales": {n: getattr(self, n).scale for n in self.critic_names()},
            "critic_offsets": {n: getattr(self, n).offset for n in self.critic_names()},
            "value_stats": {n: list(v) for n, v in self.value_stats.items()},
            "scales_calibrated": self.scales_calibrated,
            "param_shapes": {k: list(v) for k, v in self.params.shapes().items()},
        }

    def load_state(self, arrays: dict, meta: dict, with_optimizer: bool = True) -> None:
        shapes = {k: tuple(v) for k, v in meta.get("param_shapes", {}).items()}
        if shapes and shapes != self.params.shapes():
            raise ValueError("checkpoint parameter shapes do not match this scenario/config")
        self.params.load_numpy(arrays)
        self.lagrange.lam = float(meta.get("lambda", self.lagrange.lam))
        self.lagrange.c_bar = float(meta.get("c_bar", self.lagrange.c_bar))
        for n, s in meta.get("critic_scales", {}).items():
            if getattr(self, n, None) is not None:
                getattr(self, n).scale = float(s)
        for n, o in meta.get("critic_offsets", {}).items():
            if getattr(self, n, None) is not None:
                getattr(self, n).offset = float(o)
        self.value_stats = {n: tuple(float(x) for x in v) for n, v in meta.get("value_stats", {}).items()}
        self.scales_calibrated = bool(meta.get("scales_calibrated", False))
        if with_optimizer and any(k.startswith("opt_m/") for k in arrays):
            diffcore.restore_optimizer(self.opt, arrays, self.params.names())
            self.opt.step = int(meta.get("opt_step", 0))
