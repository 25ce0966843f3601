"""Economic reward and safety cost terms of the charging objective.

Sign convention: ``reward`` is the *negative* economic cost (trading plus
degradation), so maximizing reward minimizes cost. The safety cost collects
dissatisfaction and voltage violation. Summed over an episode,
``-reward + safety_cost`` equals the full weighted objective.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fleet import EvcsState, target_soc


@dataclass(frozen=True)
class PriceSignal:
    buy: np.ndarray
    sell: np.ndarray

    @classmethod
    def create(cls, buy, sell, allow_arbitrage: bool = False) -> "PriceSignal":
        buy = np.asarray(buy, dtype=float)
        sell = np.asarray(sell, dtype=float)
        if buy.shape != sell.shape:
            raise ValueError("buy and sell price series differ in length")
        if not allow_arbitrage and np.any(sell > buy):
            bad = int(np.argmax(sell > buy))
            raise ValueError(f"sell price exceeds buy price at step {bad}")
        return cls(buy, sell)

    def __len__(self):
        return len(self.buy)

    def at(self, t: int) -> tuple[float, float]:
        return float(self.buy[t]), float(self.sell[t])


@dataclass(frozen=True)
class Weights:
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    beta4: float = 100.0
    alpha_e: float = 1e-4
    v_min: float = 0.95
    v_max: float = 1.05
    nonconvergence_vt: float = 1.0

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3", "beta4", "alpha_e", "nonconvergence_vt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class CostBreakdown:
    f_td: np.ndarray  # $ per station
    f_dg: np.ndarray  # $ per station
    f_ds: np.ndarray  # kWh per station
    f_vt: float  # p.u.
    reward: float
    safety_cost: float
    weights: Weights = field(repr=False, default=None)

    @property
    def objective(self) -> float:
        return -self.reward + self.safety_cost


def trading_power(evcs: EvcsState | None, applied_powers, pv_kw: float) -> float:
    """Net grid import (kW) of a station; negative means export."""
    return float(np.sum(applied_powers)) - float(pv_kw)


def trading_cost(p_td_kw: float, buy: float, sell: float, dt_hours: float) -> float:
    price = buy if p_td_kw > 0 else sell
    return price * p_td_kw * dt_hours


def degradation_cost(applied_powers, alpha_e: float) -> float:
    p = np.asarray(applied_powers, dtype=float)
    return alpha_e * float(np.sum(p * p))


def voltage_violation(voltages, v_min: float, v_max: float) -> float:
    v = np.asarray(voltages, dtype=float)
    return float(np.sum(np.maximum(v - v_max, 0.0) + np.maximum(v_min - v, 0.0)))


def dissatisfaction_cost(evcs: EvcsState, t: int) -> float:
    total = 0.0
    for c in evcs.chargers:
        ev = c.occupant
        if ev is not None:
            tt = min(max(t, ev.arrival_step), ev.departure_step)
            total += max(0.0, target_soc(ev, tt) - ev.soc_kwh)
    return total


def step_signals(f_td, f_dg, f_ds, f_vt: float, weights: Weights) -> CostBreakdown:
    f_td = np.asarray(f_td, dtype=float)
    f_dg = np.asarray(f_dg, dtype=float)
    f_ds = np.asarray(f_ds, dtype=float)
    reward = -(weights.beta1 * float(np.sum(f_td)) + weights.beta2 * float(np.sum(f_dg)))
    safety = weights.beta3 * float(np.sum(f_ds)) + weights.beta4 * float(f_vt)
    return CostBreakdown(f_td, f_dg, f_ds, float(f_vt), reward, safety, weights)


def episode_objective(breakdowns) -> float:
    """Weighted objective summed over a trajectory of CostBreakdowns."""
    total = 0.0
    for b in breakdowns:
        w = b.weights
        total += float(np.sum(w.beta1 * b.f_td + w.beta2 * b.f_dg + w.beta3 * b.f_ds)) + w.beta4 * b.f_vt
    return total
