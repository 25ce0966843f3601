"""Temporal observation windows and the three interchangeable encoders.

All encoders map a left-padded window ``(batch, w, obs_dim)`` plus a row
validity mask to one embedding per window:

* ``passthrough`` returns the newest row unchanged (no temporal encoding);
* ``recurrent`` runs a gated recurrent cell over the valid rows;
* ``attention`` is a post-norm Transformer encoder whose padded rows are
  excluded from attention, pooled at the newest token.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .diffcore import init_module

VARIANTS = ("passthrough", "recurrent", "attention")


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "attention"
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    dropout: float = 0.0
    window: int = 12
    ff_mult: int = 2
    positional_encoding: bool = True
    shared: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.window < 1 or self.layers < 1:
            raise ValueError("window and layers must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper": EncoderConfig(layers=6, model_dim=256, heads=4, dropout=0.1, ff_mult=4),
    "desk": EncoderConfig(layers=2, model_dim=64, heads=4, dropout=0.0),
}


def preset(name: str, **overrides) -> EncoderConfig:
    return replace(PRESETS[name], **overrides)


@dataclass
class ObservationWindow:
    rows: np.ndarray  # (w, obs_dim), oldest first
    pad_mask: np.ndarray  # (w,), True for real rows


def build_window(history: Sequence[np.ndarray], t: int, w: int) -> ObservationWindow:
    """Window of the ``w`` observations ending at step ``t``, zero-padded on the left."""
    if len(history) == 0:
        raise ValueError("empty observation history")
    if t >= len(history):
        raise ValueError(f"history holds {len(history)} steps, cannot end a window at step {t}")
    lo = max(0, t - w + 1)
    real = np.asarray(history[lo:t + 1], dtype=float)
    n_pad = w - real.shape[0]
    rows = np.zeros((w, real.shape[1]))
    rows[n_pad:] = real
    mask = np.zeros(w, dtype=bool)
    mask[n_pad:] = True
    return ObservationWindow(rows, mask)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


class AttentionLayer(nn.Module):
    """Multi-head self-attention + feed-forward, each with residual and LayerNorm."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)
        self.last_weights: Optional[torch.Tensor] = None

    def attend(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(b, n, h, dh).transpose(1, 2)
        k = self.k(x).view(b, n, h, dh).transpose(1, 2)
        v = self.v(x).view(b, n, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out), weights

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("every window needs at least one unmasked row")
        a, w = self.attend(x, mask)
        self.last_weights = w.detach()
        x = self.norm1(x + self.drop(a))
        f = self.ff2(self.drop(torch.relu(self.ff1(x))))
        return self.norm2(x + self.drop(f))


class TemporalEncoder(nn.Module):
    """Common interface: ``forward(rows (B, w, d), mask (B, w)) -> (B, out_dim)``."""

    def __init__(self, config: EncoderConfig, obs_dim: int):
        super().__init__()
        self.config = config
        self.obs_dim = obs_dim

    @property
    def out_dim(self) -> int:
        raise NotImplementedError


class PassthroughEncoder(TemporalEncoder):
    @property
    def out_dim(self) -> int:
        return self.obs_dim

    def forward(self, rows, mask):
        return rows[:, -1, :]


class RecurrentEncoder(TemporalEncoder):
    def __init__(self, config: EncoderConfig, obs_dim: int):
        super().__init__(config, obs_dim)
        self.cell = nn.GRUCell(obs_dim, config.model_dim)

    @property
    def out_dim(self) -> int:
        return self.config.model_dim

    def forward(self, rows, mask):
        h = rows.new_zeros(rows.shape[0], self.config.model_dim)
        for i in range(rows.shape[1]):
            m = mask[:, i : i + 1].to(rows.dtype)
            h = m * self.cell(rows[:, i], h) + (1 - m) * h
        return h


class AttentionEncoder(TemporalEncoder):
    def __init__(self, config: EncoderConfig, obs_dim: int):
        super().__init__(config, obs_dim)
        d = config.model_dim
        self.embed = nn.Linear(obs_dim, d)
        self.layers = nn.ModuleList(
            AttentionLayer(d, config.heads, config.ff_mult * d, config.dropout) for _ in range(config.layers)
        )
        self.register_buffer("pe", sinusoidal_positions(config.window, d).float(), persistent=False)

    @property
    def out_dim(self) -> int:
        return self.config.model_dim

    def forward(self, rows, mask):
        # scaled so the unit-amplitude positional code does not swamp the features
        x = self.embed(rows) * math.sqrt(self.config.model_dim)
        if self.config.positional_encoding:
            x = x + self.pe[-rows.shape[1]:].to(x.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        return x[:, -1, :]


_CLASSES = {"passthrough": PassthroughEncoder, "recurrent": RecurrentEncoder, "attention": AttentionEncoder}


def make_encoder(config: EncoderConfig, obs_dim: int, generator: Optional[torch.Generator] = None) -> TemporalEncoder:
    enc = _CLASSES[config.variant](config, obs_dim)
    if generator is not None:
        init_module(enc, generator)
    return enc


def encode(window: ObservationWindow, encoder: TemporalEncoder, training: bool = False) -> np.ndarray:
    """Embed a single window; dropout only applies when ``training``."""
    if window.rows.shape != (encoder.config.window, encoder.obs_dim):
        raise ValueError(f"window shape {window.rows.shape} does not match encoder ({encoder.config.window}, {encoder.obs_dim})")
    dtype = next(iter(encoder.parameters()), torch.zeros((), dtype=torch.float64)).dtype
    rows = torch.as_tensor(window.rows[None], dtype=dtype)
    mask = torch.as_tensor(window.pad_mask[None])
    was = encoder.training
    encoder.train(training)
    with torch.set_grad_enabled(training):
        out = encoder(rows, mask)
    encoder.train(was)
    return out[0].detach().cpu().numpy()
