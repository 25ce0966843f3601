"""Charging-station state: EV sessions, chargers, FIFO queue and SoC dynamics.

A session is served during steps ``arrival_step .. departure_step`` inclusive
and leaves at the end of its departure step. SoC values are in kWh.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional


@dataclass
class EvSession:
    arrival_step: int
    departure_step: int
    soc_arrival_kwh: float
    soc_target_departure_kwh: float
    capacity_kwh: float = 80.0
    soc_kwh: Optional[float] = None
    soc_min_kwh: float = 0.0
    soc_max_kwh: Optional[float] = None
    evcs_id: int = 0
    session_id: int = 0
    energy_in_kwh: float = 0.0  # SoC gained while charging
    energy_out_kwh: float = 0.0  # SoC lost while discharging

    def __post_init__(self):
        if self.soc_kwh is None:
            self.soc_kwh = self.soc_arrival_kwh
        if self.soc_max_kwh is None:
            self.soc_max_kwh = self.capacity_kwh
        if not self.arrival_step < self.departure_step:
            raise ValueError(f"session {self.session_id}: arrival_step must precede departure_step")
        if not 0 <= self.soc_arrival_kwh <= self.soc_target_departure_kwh <= self.capacity_kwh:
            raise ValueError(f"session {self.session_id}: need 0 <= soc_arrival <= soc_target <= capacity")
        if not self.soc_min_kwh <= self.soc_kwh <= self.soc_max_kwh:
            raise ValueError(f"session {self.session_id}: SoC outside bounds")

    @property
    def demand_kwh(self) -> float:
        return self.soc_target_departure_kwh - self.soc_arrival_kwh


@dataclass
class ChargerState:
    p_ch_max_kw: float = 22.0
    p_dis_max_kw: float = 22.0
    eta_ch: float = 0.95
    eta_dis: float = 0.95
    occupant: Optional[EvSession] = None

    def __post_init__(self):
        if self.p_ch_max_kw <= 0 or self.p_dis_max_kw <= 0:
            raise ValueError("charger rate limits must be positive")
        if not (0 < self.eta_ch <= 1 and 0 < self.eta_dis <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")


@dataclass
class EvcsState:
    bus: int
    chargers: list[ChargerState]
    waiting_queue: deque = field(default_factory=deque)
    pv_kw: float = 0.0

    @classmethod
    def uniform(cls, bus: int, n_chargers: int = 10, **charger_kw) -> "EvcsState":
        return cls(bus, [ChargerState(**charger_kw) for _ in range(n_chargers)])

    def occupancy(self) -> list[bool]:
        return [c.occupant is not None for c in self.chargers]

    def free_chargers(self) -> list[int]:
        return [i for i, c in enumerate(self.chargers) if c.occupant is None]


class ChargeResult(NamedTuple):
    applied_kw: float
    delta_soc_kwh: float
    clipped_kw: float  # requested - applied
    occupied: bool


def target_soc(session: EvSession, t: float) -> float:
    """Linear SoC trajectory from arrival to the departure target."""
    a, d = session.arrival_step, session.departure_step
    if not a <= t <= d:
        raise ValueError(f"step {t} outside session window [{a}, {d}]")
    if t == d:
        return session.soc_target_departure_kwh
    frac = (t - a) / (d - a)
    return session.soc_arrival_kwh + frac * (session.soc_target_departure_kwh - session.soc_arrival_kwh)


def feasible_power_range(charger: ChargerState, dt_hours: float) -> tuple[float, float]:
    """Signed power interval [lo, hi] in kW admissible for the current occupant."""
    ev = charger.occupant
    if ev is None:
        return 0.0, 0.0
    hi = min(charger.p_ch_max_kw, max(0.0, ev.soc_max_kwh - ev.soc_kwh) / (charger.eta_ch * dt_hours))
    lo = -min(charger.p_dis_max_kw, max(0.0, ev.soc_kwh - ev.soc_min_kwh) * charger.eta_dis / dt_hours)
    return lo, hi


def apply_charger_action(charger: ChargerState, power_kw: float, dt_hours: float) -> ChargeResult:
    """Project a signed power request onto the feasible set and update the occupant's SoC."""
    if dt_hours <= 0:
        raise ValueError("dt_hours must be positive")
    request = float(power_kw)
    ev = charger.occupant
    if ev is None:
        return ChargeResult(0.0, 0.0, request, False)
    lo, hi = feasible_power_range(charger, dt_hours)
    p = min(max(request, lo), hi)
    if p >= 0:
        new_soc = min(ev.soc_max_kwh, ev.soc_kwh + charger.eta_ch * p * dt_hours)
    else:
        new_soc = max(ev.soc_min_kwh, ev.soc_kwh + p * dt_hours / charger.eta_dis)
    delta = new_soc - ev.soc_kwh
    if delta >= 0:
        ev.energy_in_kwh += delta
    else:
        ev.energy_out_kwh -= delta
    ev.soc_kwh = new_soc
    return ChargeResult(p, delta, request - p, True)


def _fill_free(evcs: EvcsState) -> list[tuple[EvSession, int]]:
    assigned = []
    for i in evcs.free_chargers():
        if not evcs.waiting_queue:
            break
        ev = evcs.waiting_queue.popleft()
        evcs.chargers[i].occupant = ev
        assigned.append((ev, i))
    return assigned


def assign_arrivals(evcs: EvcsState, arrivals, t: int) -> dict:
    """Queue ``arrivals`` (in arrival order) and hand free chargers to the queue head first."""
    evcs.waiting_queue.extend(arrivals)
    assigned = _fill_free(evcs)
    return {"step": t, "assigned": assigned, "queued": len(evcs.waiting_queue)}


def process_departures(evcs: EvcsState, t: int) -> list[tuple[EvSession, float]]:
    """Release sessions whose departure step has come; queued ones leave unserved.

    Freed chargers immediately pull from the FIFO queue.
    """
    departed = []
    for c in evcs.chargers:
        ev = c.occupant
        if ev is not None and ev.departure_step <= t:
            c.occupant = None
            departed.append((ev, max(0.0, ev.soc_target_departure_kwh - ev.soc_kwh)))
    if evcs.waiting_queue:
        keep = deque()
        for ev in evcs.waiting_queue:
            if ev.departure_step <= t:
                departed.append((ev, max(0.0, ev.soc_target_departure_kwh - ev.soc_kwh)))
            else:
                keep.append(ev)
        evcs.waiting_queue = keep
    _fill_free(evcs)
    return departed


def flush_sessions(evcs: EvcsState) -> list[tuple[EvSession, float]]:
    """Treat every remaining session as departing now (episode end)."""
    out = []
    for c in evcs.chargers:
        if c.occupant is not None:
            ev = c.occupant
            out.append((ev, max(0.0, ev.soc_target_departure_kwh - ev.soc_kwh)))
            c.occupant = None
    for ev in evcs.waiting_queue:
        out.append((ev, max(0.0, ev.soc_target_departure_kwh - ev.soc_kwh)))
    evcs.waiting_queue = deque()
    return out
