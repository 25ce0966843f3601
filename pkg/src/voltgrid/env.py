"""Multi-station charging environment with partial network observability.

Each station (agent) sees its hosting bus and 1-hop neighbours, its own PV
output, the current prices, and the departure countdown and energy gap of
every charger. Reward is the negative economic cost; the safety cost
tracks dissatisfaction and voltage violation.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import fleet, signals
from .data import ScenarioBundle, episode_variant
from .grid import solve_power_flow

log = logging.getLogger(__name__)


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObsNorm:
    """Scaling applied to raw observation features (recorded in run manifests)."""

    v_offset: float = 1.0
    v_scale: float = 0.05
    power_scale_kw: float = 220.0
    price_scale: float = 0.45
    steps_scale: float = 144.0
    soc_scale: float = 80.0


@dataclass
class EpisodeConfig:
    scenario: ScenarioBundle
    seed: int = 0
    horizon_steps: Optional[int] = None
    norm: Optional[ObsNorm] = None

    def __post_init__(self):
        b = self.scenario
        if self.horizon_steps is None:
            self.horizon_steps = b.horizon
        if not 0 < self.horizon_steps <= b.horizon:
            raise EnvError(f"horizon_steps must lie in (0, {b.horizon}]")
        if self.norm is None:
            c = b.chargers
            self.norm = ObsNorm(
                power_scale_kw=c.p_ch_max_kw * c.count,
                price_scale=float(np.max(b.prices.buy)) or 1.0,
                steps_scale=float(b.horizon) / 2.0,
                soc_scale=max([s.capacity_kwh for s in b.sessions], default=80.0),
            )

    @property
    def dt_hours(self) -> float:
        return self.scenario.dt_hours


@dataclass
class EpisodeTrace:
    """Per-step record of one episode, enough to compute every reported metric."""

    f_td: list = field(default_factory=list)
    f_dg: list = field(default_factory=list)
    f_ds: list = field(default_factory=list)
    f_vt: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    p_trade_kw: list = field(default_factory=list)
    voltages: list = field(default_factory=list)
    departures: list = field(default_factory=list)  # (evcs, energy_in, energy_out, demand, unmet)


class ObservationLayout:
    """Fixed per-agent observation layout.

    Neighbourhood block: ``1 + max_degree`` slots of (injection, voltage, valid),
    hosting bus first. Then (pv, buy, sell). Then one (steps_to_departure,
    soc_gap, occupied) triple per charger slot.
    """

    def __init__(self, network, deployment, n_chargers: int):
        self.n_slots = 1 + network.max_degree
        self.n_chargers = n_chargers
        self.bus_idx = []
        self.valid = []
        for b in deployment.placements:
            buses = [b] + sorted(network.adjacency[b])
            idx = [network.index[x] for x in buses]
            self.bus_idx.append(np.array(idx + [0] * (self.n_slots - len(idx)), dtype=int))
            self.valid.append(np.array([1.0] * len(idx) + [0.0] * (self.n_slots - len(idx))))

    @property
    def dim(self) -> int:
        return 3 * self.n_slots + 3 + 3 * self.n_chargers

    @property
    def neighborhood_slice(self) -> slice:
        return slice(0, 3 * self.n_slots)

    @property
    def ev_slice(self) -> slice:
        return slice(3 * self.n_slots + 3, self.dim)

    def occupancy_mask(self, obs: np.ndarray) -> np.ndarray:
        """Charger occupancy flags read back from observation rows (last axis)."""
        ev = obs[..., self.ev_slice]
        return ev[..., 2::3]

    def build(self, k: int, injections_kw, voltages, pv_kw, price, chargers, t: int, norm: ObsNorm) -> np.ndarray:
        """Observation of agent ``k``; reads only its hosting-bus and 1-hop entries."""
        out = np.zeros(self.dim)
        idx, valid = self.bus_idx[k], self.valid[k]
        inj = np.asarray(injections_kw)[idx] / norm.power_scale_kw
        vol = (np.asarray(voltages)[idx] - norm.v_offset) / norm.v_scale
        nb = np.stack([inj * valid, vol * valid, valid], axis=1)
        out[: 3 * self.n_slots] = nb.ravel()
        o = 3 * self.n_slots
        out[o] = pv_kw / norm.power_scale_kw
        out[o + 1] = price[0] / norm.price_scale
        out[o + 2] = price[1] / norm.price_scale
        o += 3
        for i, c in enumerate(chargers):
            ev = c.occupant
            if ev is not None:
                out[o + 3 * i] = max(0, ev.departure_step - t) / norm.steps_scale
                out[o + 3 * i + 1] = (ev.soc_target_departure_kwh - ev.soc_kwh) / norm.soc_scale
                out[o + 3 * i + 2] = 1.0
        return out


class ChargingEnv:
    """Joint-step environment over all stations of a scenario."""

    def __init__(self, config: EpisodeConfig):
        self.config = config
        b = config.scenario
        self.network = b.network
        self.layout = ObservationLayout(b.network, b.deployment, b.chargers.count)
        self.n_agents = b.n_evcs
        self.n_chargers = b.chargers.count
        self.obs_dim = self.layout.dim
        self._hosts = np.array([b.network.index[x] for x in b.deployment.placements])
        self.t = 0
        self.done = True
        self.trace: Optional[EpisodeTrace] = None

    # ----------------------------------------------------------------
    @property
    def weights(self) -> signals.Weights:
        return self.config.scenario.weights

    @property
    def horizon(self) -> int:
        return self.config.horizon_steps

    def reset(self, seed: Optional[int] = None) -> list[np.ndarray]:
        if seed is not None:
            self.config.seed = int(seed)
        self.bundle = episode_variant(self.config.scenario, self.config.seed)
        b = self.bundle
        c = b.chargers
        self.stations = [
            fleet.EvcsState.uniform(bus, c.count, p_ch_max_kw=c.p_ch_max_kw, p_dis_max_kw=c.p_dis_max_kw, eta_ch=c.eta_ch, eta_dis=c.eta_dis)
            for bus in b.deployment.placements
        ]
        self._arrivals: dict[int, list[list[fleet.EvSession]]] = {}
        for i, rec in enumerate(b.sessions):
            a, d = rec.steps(b.step_minutes)
            if a >= self.horizon:
                continue
            ev = fleet.EvSession(
                arrival_step=a,
                departure_step=d,
                soc_arrival_kwh=rec.soc_arrival_kwh,
                soc_target_departure_kwh=min(rec.capacity_kwh, rec.soc_arrival_kwh + rec.energy_kwh),
                capacity_kwh=rec.capacity_kwh,
                evcs_id=rec.evcs_id,
                session_id=i,
            )
            slot = self._arrivals.setdefault(a, [[] for _ in range(self.n_agents)])
            slot[rec.evcs_id].append(ev)
        self.t = 0
        self.done = False
        self.trace = EpisodeTrace()
        inj = self._injections_kw(0, np.zeros(self.n_agents) - b.pv[0])
        self._last_pf = self._solve(0, inj)
        self._last_inj = inj
        return self._observe(0)

    def _injections_kw(self, t: int, p_trade_kw) -> np.ndarray:
        inj = -self.network.base_load_kw * self.bundle.load_profile[t]
        inj[self._hosts] -= p_trade_kw
        return inj

    def _solve(self, t: int, inj_kw):
        n = self.network
        q = -n.base_load_kvar * self.bundle.load_profile[t]
        return solve_power_flow(n, inj_kw / n.base_kva, q / n.base_kva)

    def _observe(self, t: int) -> list[np.ndarray]:
        b = self.bundle
        tt = min(t, self.horizon - 1)
        price = b.prices.at(tt)
        return [
            self.layout.build(k, self._last_inj, self._last_pf.voltages, b.pv[tt, k], price, st.chargers, t, self.config.norm)
            for k, st in enumerate(self.stations)
        ]

    def step(self, actions: Sequence) -> tuple[list[np.ndarray], float, float, dict]:
        if self.done:
            raise EnvError("step() called after the episode terminated; call reset()")
        if len(actions) != self.n_agents:
            raise EnvError(f"expected actions for {self.n_agents} agents, got {len(actions)}")
        b, t, w = self.bundle, self.t, self.weights
        dt = b.dt_hours
        # (1) arrivals
        todays = self._arrivals.get(t)
        for k, st in enumerate(self.stations):
            fleet.assign_arrivals(st, todays[k] if todays else [], t)
        # (2) projected actions
        applied = np.zeros((self.n_agents, self.n_chargers))
        clipped = np.zeros(self.n_agents)
        n_clipped = 0
        for k, st in enumerate(self.stations):
            a = np.asarray(actions[k], dtype=float).ravel()
            if a.shape != (len(st.chargers),):
                raise EnvError(f"agent {k}: expected {len(st.chargers)} charger actions, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise EnvError(f"agent {k}: non-finite action")
            for i, ch in enumerate(st.chargers):
                res = fleet.apply_charger_action(ch, a[i], dt)
                applied[k, i] = res.applied_kw
                if res.occupied and abs(res.clipped_kw) > 1e-12:
                    clipped[k] += abs(res.clipped_kw)
                    n_clipped += 1
        # dissatisfaction is assessed on every session served this step, departing ones included
        f_ds = np.array([signals.dissatisfaction_cost(st, t) for st in self.stations])
        # (3) departures
        departed = []
        for k, st in enumerate(self.stations):
            departed.extend((k, ev, unmet) for ev, unmet in fleet.process_departures(st, t))
        # (4) injections
        pv = b.pv[t]
        p_trade = np.array([signals.trading_power(st, applied[k], pv[k]) for k, st in enumerate(self.stations)])
        inj = self._injections_kw(t, p_trade)
        # (5) power flow
        pf = self._solve(t, inj)
        # (6) signals
        buy, sell = b.prices.at(t)
        f_td = np.array([signals.trading_cost(p, buy, sell, dt) for p in p_trade])
        f_dg = np.array([signals.degradation_cost(applied[k], w.alpha_e) for k in range(self.n_agents)])
        if pf.converged:
            f_vt = signals.voltage_violation(pf.voltages, w.v_min, w.v_max)
        else:
            log.warning("power flow did not converge at step %d (mismatch %.3g)", t, pf.max_mismatch)
            f_vt = w.nonconvergence_vt
        bd = signals.step_signals(f_td, f_dg, f_ds, f_vt, w)

        self.t = t + 1
        self.done = self.t >= self.horizon
        if self.done:
            for k, st in enumerate(self.stations):
                departed.extend((k, ev, unmet) for ev, unmet in fleet.flush_sessions(st))
        self._last_pf, self._last_inj = pf, inj
        obs = self._observe(self.t)

        tr = self.trace
        tr.f_td.append(f_td)
        tr.f_dg.append(f_dg)
        tr.f_ds.append(f_ds)
        tr.f_vt.append(f_vt)
        tr.reward.append(bd.reward)
        tr.cost.append(bd.safety_cost)
        tr.p_trade_kw.append(p_trade)
        tr.voltages.append(pf.voltages)
        tr.departures.extend((k, ev.energy_in_kwh, ev.energy_out_kwh, ev.demand_kwh, unmet) for k, ev, unmet in departed)

        info = {
            "step": t,
            "breakdown": bd,
            "applied_kw": applied,
            "clipped_kw": clipped,
            "n_clipped": n_clipped,
            "p_trade_kw": p_trade,
            "voltages": pf.voltages,
            "converged": pf.converged,
            "departed": [(k, ev.session_id, unmet) for k, ev, unmet in departed],
            "done": self.done,
        }
        return obs, bd.reward, bd.safety_cost, info


def metrics(trace: EpisodeTrace) -> dict:
    """Episode metrics: energy cost, cycling overhead, mean violation, mean unmet demand."""
    f_td = np.array(trace.f_td) if trace.f_td else np.zeros((0, 0))
    energy_cost = float(f_td.sum())
    e_in = sum(d[1] for d in trace.departures)
    e_out = sum(d[2] for d in trace.departures)
    delivered = e_in - e_out
    if delivered > 1e-12:
        cycling = 100.0 * (e_in + e_out) / delivered
        cycling_defined = True
    else:
        cycling, cycling_defined = float("nan"), False
    n_dep = len(trace.departures)
    unmet = sum(d[4] for d in trace.departures)
    return {
        "energy_cost": energy_cost,
        "cycling_overhead": cycling,
        "cycling_defined": cycling_defined,
        "avg_voltage_violation": float(np.mean(trace.f_vt)) if trace.f_vt else 0.0,
        "avg_demand_dissatisfaction": unmet / n_dep if n_dep else 0.0,
        "dissatisfaction_defined": n_dep > 0,
        "n_departed": n_dep,
        "total_reward": float(np.sum(trace.reward)),
        "total_cost": float(np.sum(trace.cost)),
        "objective": float(np.sum(trace.cost) - np.sum(trace.reward)),
    }


def make_env(scenario: ScenarioBundle, seed: int = 0, **kw) -> ChargingEnv:
    return ChargingEnv(EpisodeConfig(scenario, seed=seed, **kw))


def norm_dict(norm: ObsNorm) -> dict:
    return asdict(norm)
