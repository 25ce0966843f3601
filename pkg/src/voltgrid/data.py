"""Scenario bundles: CSV/JSON loaders, writers and a seeded synthetic generator.

A scenario directory holds ``network.json``, ``prices.csv``, ``pv.csv``,
``sessions.csv`` and ``config.json``. The generator stands in for the
measured EV, PV and price data, reproducing their coarse statistics: most
demands below 20 kWh, dwell times between 10 and 800 minutes, morning and
evening arrival peaks, a clear-sky PV bell and synthetic tariffs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import DeploymentMap, Network, load_network, network_to_dict
from .signals import PriceSignal, Weights

SCENARIO_DIR = Path(__file__).parent / "scenarios"
SCENARIO_FILES = ("network.json", "prices.csv", "pv.csv", "sessions.csv", "config.json")
SESSION_COLUMNS = ("arrival_min", "departure_min", "energy_kwh", "capacity_kwh", "evcs_id", "soc_arrival_kwh")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class SessionRecord:
    arrival_min: float
    departure_min: float
    energy_kwh: float
    capacity_kwh: float
    evcs_id: int
    soc_arrival_kwh: float

    @property
    def duration_min(self) -> float:
        return self.departure_min - self.arrival_min

    def steps(self, step_minutes: float) -> tuple[int, int]:
        """Arrival floored and departure ceiled to whole steps."""
        a = int(math.floor(self.arrival_min / step_minutes + 1e-9))
        d = int(math.ceil(self.departure_min / step_minutes - 1e-9))
        return a, max(d, a + 1)


@dataclass(frozen=True)
class ChargerSpec:
    count: int = 10
    p_ch_max_kw: float = 22.0
    p_dis_max_kw: float = 22.0
    eta_ch: float = 0.95
    eta_dis: float = 0.95


@dataclass(frozen=True)
class SynthesisSpec:
    seed: int = 0
    horizon: int = 288
    step_minutes: float = 5.0
    n_evcs: int = 4
    evs_per_evcs: int = 40
    demand_median_kwh: float = 10.0
    demand_sigma: float = 0.7
    capacity_kwh: float = 80.0
    soc_arrival_range: tuple = (0.1, 0.4)
    duration_median_min: float = 240.0
    duration_sigma: float = 0.7
    duration_range_min: tuple = (10.0, 800.0)
    # arrival mixture: (weight, mean hour, std hour); remainder is uniform over the day
    arrival_peaks: tuple = ((0.55, 8.0, 1.2), (0.35, 17.5, 1.5))
    pv_peak_kw: float = 60.0
    pv_noise: float = 0.1
    price_preset: str = "tou"
    p_max_kw: float = 22.0
    eta_ch: float = 0.95
    max_retries: int = 20

    def __post_init__(self):
        if self.horizon < 1 or self.step_minutes <= 0 or self.n_evcs < 1 or self.evs_per_evcs < 0:
            raise ValueError("horizon, step_minutes and n_evcs must be positive and evs_per_evcs nonnegative")
        if min(self.demand_median_kwh, self.capacity_kwh, self.duration_median_min, self.p_max_kw) <= 0:
            raise ValueError("medians, capacity and charger rating must be positive")
        if not 0 < self.eta_ch <= 1:
            raise ValueError("eta_ch must lie in (0, 1]")
        lo, hi = self.soc_arrival_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("soc_arrival_range must satisfy 0 <= lo <= hi <= 1")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthesisSpec":
        doc = dict(doc)
        for key in ("soc_arrival_range", "duration_range_min"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "arrival_peaks" in doc:
            doc["arrival_peaks"] = tuple(tuple(p) for p in doc["arrival_peaks"])
        return cls(**doc)


@dataclass
class ScenarioBundle:
    network: Network
    prices: PriceSignal
    pv: np.ndarray  # (horizon, K) kW
    sessions: list[SessionRecord]
    deployment: DeploymentMap
    weights: Weights = field(default_factory=Weights)
    horizon: int = 288
    step_minutes: float = 5.0
    chargers: ChargerSpec = field(default_factory=ChargerSpec)
    load_profile: Optional[np.ndarray] = None  # per-step multiplier of fixture base loads
    seed: int = 0
    synthesis: Optional[SynthesisSpec] = None
    resample: bool = False  # draw fresh sessions/PV per episode seed from ``synthesis``

    def __post_init__(self):
        if self.load_profile is None:
            self.load_profile = np.ones(self.horizon)
        self.load_profile = np.asarray(self.load_profile, dtype=float)
        self.pv = np.asarray(self.pv, dtype=float)
        self.validate()

    @property
    def dt_hours(self) -> float:
        return self.step_minutes / 60.0

    @property
    def n_evcs(self) -> int:
        return len(self.deployment.placements)

    def validate(self) -> None:
        self.deployment.validate(self.network)
        if len(self.prices) != self.horizon:
            raise ScenarioError(f"prices.csv: {len(self.prices)} rows for a {self.horizon}-step horizon")
        if self.pv.shape != (self.horizon, self.n_evcs):
            raise ScenarioError(f"pv.csv: expected {self.horizon}x{self.n_evcs} entries, got {self.pv.shape}")
        if self.load_profile.shape != (self.horizon,):
            raise ScenarioError("config.json: load_profile length differs from horizon")
        for i, s in enumerate(self.sessions):
            if not 0 <= s.evcs_id < self.n_evcs:
                raise ScenarioError(f"sessions.csv line {i + 2}: evcs_id {s.evcs_id} not deployed ({self.n_evcs} stations)")
            if s.departure_min <= s.arrival_min:
                raise ScenarioError(f"sessions.csv line {i + 2}: departure before arrival")

    def config_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "step_minutes": self.step_minutes,
            "seed": self.seed,
            "deployment": list(self.deployment.placements),
            "weights": asdict(self.weights),
            "chargers": asdict(self.chargers),
            "load_profile": [float(x) for x in self.load_profile],
            "synthesis": None if self.synthesis is None else self.synthesis.to_dict(),
            "resample": self.resample,
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(network_to_dict(self.network), sort_keys=True).encode())
        h.update(json.dumps(self.config_dict(), sort_keys=True).encode())
        h.update(self.prices.buy.tobytes() + self.prices.sell.tobytes() + self.pv.tobytes())
        h.update(json.dumps([asdict(s) for s in self.sessions]).encode())
        return h.hexdigest()


# ---------------------------------------------------------------- profiles

def _hours(horizon: int, step_minutes: float) -> np.ndarray:
    return (np.arange(horizon) + 0.5) * step_minutes / 60.0


def base_load_profile(horizon: int = 288, step_minutes: float = 5.0, low: float = 0.35, high: float = 0.65) -> np.ndarray:
    """Residential-style daily multiplier with a morning shoulder and an evening peak."""
    h = _hours(horizon, step_minutes)
    shape = 0.35 * np.exp(-0.5 * ((h - 8.0) / 1.5) ** 2) + np.exp(-0.5 * ((h - 19.0) / 2.0) ** 2)
    shape = shape / shape.max()
    return low + (high - low) * shape


def pv_profile(horizon: int, step_minutes: float, peak_kw: float, rng=None, noise: float = 0.0) -> np.ndarray:
    h = _hours(horizon, step_minutes)
    bell = np.clip(np.sin(np.pi * (h - 6.0) / 13.0), 0.0, None) ** 2
    out = peak_kw * bell
    if rng is not None and noise > 0:
        out = out * rng.lognormal(0.0, noise, size=horizon)
    return out


def price_preset(name: str, horizon: int = 288, step_minutes: float = 5.0) -> PriceSignal:
    h = _hours(horizon, step_minutes)
    if name == "tou":
        buy = np.where((h >= 16) & (h < 21), 0.45, np.where((h >= 7) & (h < 22), 0.25, 0.15))
        sell = np.full(horizon, 0.08)
    elif name == "wholesale":
        wh = 0.06 + 0.05 * np.exp(-0.5 * ((h - 8.0) / 1.5) ** 2) + 0.20 * np.exp(-0.5 * ((h - 18.5) / 1.0) ** 2)
        wh -= 0.03 * np.exp(-0.5 * ((h - 13.0) / 2.0) ** 2)
        buy = wh + 0.10
        sell = 0.9 * wh
    else:
        raise ScenarioError(f"unknown price preset {name!r}")
    return PriceSignal.create(np.round(buy, 6), np.round(sell, 6))


# ---------------------------------------------------------------- synthesis

def _truncated_lognormal(rng, median, sigma, lo, hi):
    for _ in range(1000):
        x = median * math.exp(sigma * rng.standard_normal())
        if lo <= x <= hi:
            return x
    return min(max(median, lo), hi)


def _arrival_minute(rng, spec: SynthesisSpec) -> float:
    day = spec.horizon * spec.step_minutes
    u = rng.random()
    acc = 0.0
    for w, mu, sd in spec.arrival_peaks:
        acc += w
        if u < acc:
            m = rng.normal(mu, sd) * 60.0
            break
    else:
        m = rng.random() * day
    return float(min(max(m, 0.0), day - spec.step_minutes))


def synthesize_sessions(spec: SynthesisSpec, rng) -> list[SessionRecord]:
    out = []
    lo_d, hi_d = spec.duration_range_min
    for k in range(spec.n_evcs):
        recs = []
        for _ in range(spec.evs_per_evcs):
            arr = _arrival_minute(rng, spec)
            soc0 = spec.capacity_kwh * rng.uniform(*spec.soc_arrival_range)
            for _attempt in range(spec.max_retries):
                dur = _truncated_lognormal(rng, spec.duration_median_min, spec.duration_sigma, lo_d, hi_d)
                dem = _truncated_lognormal(rng, spec.demand_median_kwh, spec.demand_sigma, 0.5, spec.capacity_kwh - soc0)
                if dem <= spec.p_max_kw * spec.eta_ch * dur / 60.0:
                    break
            else:
                dem = spec.p_max_kw * spec.eta_ch * dur / 60.0
            recs.append(SessionRecord(round(arr, 3), round(arr + dur, 3), round(dem, 4), spec.capacity_kwh, k, round(soc0, 4)))
        recs.sort(key=lambda r: (r.arrival_min, r.departure_min))
        out.extend(recs)
    out.sort(key=lambda r: (r.arrival_min, r.evcs_id))
    return out


def synthesize_pv(spec: SynthesisSpec, rng) -> np.ndarray:
    cols = [pv_profile(spec.horizon, spec.step_minutes, spec.pv_peak_kw, rng, spec.pv_noise) for _ in range(spec.n_evcs)]
    return np.round(np.stack(cols, axis=1), 4)


def synthesize(
    spec: SynthesisSpec,
    network: Network | str = "ieee33",
    deployment=(8, 12, 14, 30),
    weights: Weights | None = None,
    chargers: ChargerSpec | None = None,
    load_profile=None,
    resample: bool = False,
) -> ScenarioBundle:
    """Deterministically generate a scenario bundle from ``spec``."""
    if isinstance(network, str):
        network = load_network(network)
    deployment = deployment if isinstance(deployment, DeploymentMap) else DeploymentMap(tuple(deployment))
    if len(deployment.placements) != spec.n_evcs:
        raise ScenarioError("deployment size differs from spec.n_evcs")
    rng = np.random.default_rng(spec.seed)
    sessions = synthesize_sessions(spec, rng)
    pv = synthesize_pv(spec, rng)
    if sessions:
        durations = np.array([s.duration_min for s in sessions])
        inside = np.mean((durations >= 10) & (durations <= 800))
        if inside < 0.9:
            raise ScenarioError(f"only {inside:.1%} of durations fall within [10, 800] min")
        median = float(np.median([s.energy_kwh for s in sessions]))
        if median >= 20.0:
            raise ScenarioError(f"median session demand {median:.1f} kWh is not below 20 kWh")
    if load_profile is None:
        load_profile = base_load_profile(spec.horizon, spec.step_minutes)
    return ScenarioBundle(
        network=network,
        prices=price_preset(spec.price_preset, spec.horizon, spec.step_minutes),
        pv=pv,
        sessions=sessions,
        deployment=deployment,
        weights=weights or Weights(v_min=network.v_min, v_max=network.v_max),
        horizon=spec.horizon,
        step_minutes=spec.step_minutes,
        chargers=chargers or ChargerSpec(p_ch_max_kw=spec.p_max_kw, p_dis_max_kw=spec.p_max_kw, eta_ch=spec.eta_ch),
        load_profile=load_profile,
        seed=spec.seed,
        synthesis=spec,
        resample=resample,
    )


def episode_variant(bundle: ScenarioBundle, seed: int) -> ScenarioBundle:
    """Fresh sessions and PV drawn for one episode seed (resampling scenarios only)."""
    if not bundle.resample or bundle.synthesis is None:
        return bundle
    spec = replace(bundle.synthesis, seed=int(seed))
    rng = np.random.default_rng(spec.seed)
    return replace(bundle, sessions=synthesize_sessions(spec, rng), pv=synthesize_pv(spec, rng), seed=int(seed))


def validate_feasibility(bundle: ScenarioBundle) -> list[dict]:
    """Sessions whose energy target exceeds max rate x dwell time x efficiency."""
    c = bundle.chargers
    report = []
    for i, s in enumerate(bundle.sessions):
        deliverable = c.p_ch_max_kw * c.eta_ch * s.duration_min / 60.0
        if s.energy_kwh > deliverable + 1e-9:
            report.append({"index": i, "evcs_id": s.evcs_id, "energy_kwh": s.energy_kwh, "deliverable_kwh": deliverable})
    return report


# ---------------------------------------------------------------- file I/O

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_scenario(bundle: ScenarioBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "network.json").write_text(json.dumps(network_to_dict(bundle.network), indent=1) + "\n")
    with open(d / "prices.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "buy_per_kwh", "sell_per_kwh"])
        for t in range(bundle.horizon):
            w.writerow([t, _fmt(bundle.prices.buy[t]), _fmt(bundle.prices.sell[t])])
    with open(d / "pv.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "evcs_id", "pv_kw"])
        for t in range(bundle.horizon):
            for k in range(bundle.n_evcs):
                w.writerow([t, k, _fmt(bundle.pv[t, k])])
    with open(d / "sessions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SESSION_COLUMNS)
        for s in bundle.sessions:
            w.writerow([_fmt(getattr(s, c)) for c in SESSION_COLUMNS])
    (d / "config.json").write_text(json.dumps(bundle.config_dict(), indent=1) + "\n")
    return d


def _read_csv(path: Path, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ScenarioError(f"{path.name}: missing columns {missing}")
        return list(reader)


def load_scenario(directory) -> ScenarioBundle:
    """Load and cross-validate a scenario directory (or a bundled scenario name)."""
    d = Path(directory)
    if not d.exists() and (SCENARIO_DIR / str(directory)).exists():
        d = SCENARIO_DIR / str(directory)
    for name in SCENARIO_FILES:
        if not (d / name).exists():
            raise ScenarioError(f"{d}: missing {name}")
    try:
        cfg = json.loads((d / "config.json").read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"config.json: {exc}") from exc
    network = load_network(d / "network.json")
    horizon = int(cfg.get("horizon", 288))
    deployment = DeploymentMap(tuple(int(b) for b in cfg["deployment"]))
    k = len(deployment.placements)

    rows = _read_csv(d / "prices.csv", ("step", "buy_per_kwh", "sell_per_kwh"))
    if len(rows) != horizon:
        raise ScenarioError(f"prices.csv: {len(rows)} rows for a {horizon}-step horizon")
    for i, r in enumerate(rows):
        if int(r["step"]) != i:
            raise ScenarioError(f"prices.csv line {i + 2}: expected step {i}, got {r['step']}")
    prices = PriceSignal.create(
        [float(r["buy_per_kwh"]) for r in rows],
        [float(r["sell_per_kwh"]) for r in rows],
        allow_arbitrage=bool(cfg.get("allow_arbitrage", False)),
    )

    pv = np.full((horizon, k), np.nan)
    for i, r in enumerate(_read_csv(d / "pv.csv", ("step", "evcs_id", "pv_kw"))):
        t, e = int(r["step"]), int(r["evcs_id"])
        if not (0 <= t < horizon and 0 <= e < k):
            raise ScenarioError(f"pv.csv line {i + 2}: step/evcs_id out of range ({t}, {e})")
        pv[t, e] = float(r["pv_kw"])
    if np.isnan(pv).any():
        t, e = map(int, np.argwhere(np.isnan(pv))[0])
        raise ScenarioError(f"pv.csv: no entry for step {t}, evcs_id {e} (horizon mismatch)")

    sessions = []
    base_cols = SESSION_COLUMNS[:5]
    cap_default = 80.0
    for i, r in enumerate(_read_csv(d / "sessions.csv", base_cols)):
        try:
            cap = float(r["capacity_kwh"] or cap_default)
            soc0 = float(r["soc_arrival_kwh"]) if r.get("soc_arrival_kwh") not in (None, "") else 0.2 * cap
            rec = SessionRecord(float(r["arrival_min"]), float(r["departure_min"]), float(r["energy_kwh"]), cap, int(r["evcs_id"]), soc0)
        except ValueError as exc:
            raise ScenarioError(f"sessions.csv line {i + 2}: {exc}") from exc
        if not 0 <= rec.evcs_id < k:
            raise ScenarioError(f"sessions.csv line {i + 2}: evcs_id {rec.evcs_id} not deployed ({k} stations)")
        sessions.append(rec)

    synth = cfg.get("synthesis")
    lp = cfg.get("load_profile")
    return ScenarioBundle(
        network=network,
        prices=prices,
        pv=pv,
        sessions=sessions,
        deployment=deployment,
        weights=Weights(**cfg.get("weights", {})),
        horizon=horizon,
        step_minutes=float(cfg.get("step_minutes", 5.0)),
        chargers=ChargerSpec(**cfg.get("chargers", {})),
        load_profile=None if lp is None else np.asarray(lp, dtype=float),
        seed=int(cfg.get("seed", 0)),
        synthesis=None if synth is None else SynthesisSpec.from_dict(synth),
        resample=bool(cfg.get("resample", False)),
    )


# ---------------------------------------------------------------- bundled scenarios

def desk_scenario(seed: int = 1) -> ScenarioBundle:
    """Four stations of ten chargers at buses 8, 12, 14 and 30 of the 33-bus feeder.

    Sessions and PV are redrawn for every episode seed.
    """
    return synthesize(SynthesisSpec(seed=seed), "ieee33", (8, 12, 14, 30), resample=True)


def smoke_scenario() -> ScenarioBundle:
    """Two-bus feeder, one station with two chargers, two hours of 5-minute steps."""
    horizon = 24
    sessions = [
        SessionRecord(0.0, 60.0, 8.0, 80.0, 0, 16.0),
        SessionRecord(10.0, 115.0, 12.0, 80.0, 0, 20.0),
        SessionRecord(20.0, 90.0, 6.0, 80.0, 0, 30.0),
    ]
    return ScenarioBundle(
        network=load_network("two_bus"),
        prices=PriceSignal.create(np.full(horizon, 0.25), np.full(horizon, 0.08)),
        pv=np.zeros((horizon, 1)),
        sessions=sessions,
        deployment=DeploymentMap((2,)),
        horizon=horizon,
        chargers=ChargerSpec(count=2),
        load_profile=np.full(horizon, 0.5),
    )


BUNDLED = {"desk_33bus": desk_scenario, "smoke_2bus": smoke_scenario}
