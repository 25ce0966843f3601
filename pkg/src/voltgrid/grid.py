"""Radial distribution network model and backward-forward sweep power flow.

Voltages are solved with the matrix form of the backward-forward sweep:
the bus-injection to branch-current matrix (BIBC) performs the backward
current summation and the branch-current to bus-voltage matrix (BCBV) the
forward voltage update. Their product is precomputed once per network, so
each sweep is a single complex mat-vec.

Sign convention: injections are positive for generation, so a base load or
a charging station appears as a negative injection at its bus.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np

FIXTURE_DIR = Path(__file__).parent / "fixtures"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200


class NetworkError(ValueError):
    """Raised for malformed or physically invalid network documents."""


class NonRadialError(NetworkError):
    pass


class DuplicateLineError(NonRadialError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    p_load_kw: float = 0.0
    q_load_kvar: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    slack_bus: int
    v_slack: float = 1.0
    v_min: float = 0.95
    v_max: float = 1.05
    base_kva: float = 1000.0
    base_kv: float = 1.0
    name: str = ""

    def __post_init__(self):
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def index(self) -> dict[int, int]:
        """Bus id -> array position."""
        return {b: i for i, b in enumerate(self.bus_ids)}

    @property
    def z_base_ohm(self) -> float:
        return self.base_kv**2 * 1000.0 / self.base_kva

    @cached_property
    def adjacency(self) -> dict[int, frozenset[int]]:
        adj: dict[int, set[int]] = {b: set() for b in self.bus_ids}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        return {b: frozenset(s) for b, s in adj.items()}

    @cached_property
    def max_degree(self) -> int:
        return max(len(s) for s in self.adjacency.values())

    @cached_property
    def base_load_kw(self) -> np.ndarray:
        return np.array([b.p_load_kw for b in self.buses], dtype=float)

    @cached_property
    def base_load_kvar(self) -> np.ndarray:
        return np.array([b.q_load_kvar for b in self.buses], dtype=float)

    @cached_property
    def _sweep_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (non-slack positions, DLF = BCBV @ BIBC) in tree order."""
        slack = self.slack_bus
        parent: dict[int, tuple[int, complex]] = {}
        order = [slack]
        seen = {slack}
        z_of = {}
        for ln in self.lines:
            z = complex(ln.r_ohm, ln.x_ohm) / self.z_base_ohm
            z_of[(ln.from_bus, ln.to_bus)] = z
            z_of[(ln.to_bus, ln.from_bus)] = z
        head = 0
        while head < len(order):
            u = order[head]
            head += 1
            for v in sorted(self.adjacency[u]):
                if v not in seen:
                    seen.add(v)
                    parent[v] = (u, z_of[(u, v)])
                    order.append(v)
        nodes = order[1:]
        pos = {b: i for i, b in enumerate(nodes)}
        n = len(nodes)
        # path[i] = branches (identified by their child bus) from slack to node i
        path = np.zeros((n, n), dtype=bool)
        zvec = np.zeros(n, dtype=complex)
        for b in nodes:
            i = pos[b]
            p, z = parent[b]
            zvec[i] = z
            if p != slack:
                path[i] = path[pos[p]]
            path[i, i] = True
        bibc = path.T.astype(complex)  # branch j carries injections of every node below it
        bcbv = path * zvec[None, :]
        dlf = bcbv @ bibc
        idx = np.array([self.index[b] for b in nodes], dtype=int)
        return idx, dlf

    def kw_to_pu(self, kw):
        return np.asarray(kw, dtype=float) / self.base_kva

    def base_injection_pu(self, scale=1.0) -> tuple[np.ndarray, np.ndarray]:
        """Active/reactive injections (p.u.) of the fixture's base loads times ``scale``."""
        s = np.asarray(scale, dtype=float)
        return -self.base_load_kw * s / self.base_kva, -self.base_load_kvar * s / self.base_kva


@dataclass(frozen=True)
class DeploymentMap:
    """Bus hosting each charging station; station k sits at ``placements[k]``."""

    placements: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.placements)) != len(self.placements):
            raise ValueError(f"at most one station per bus, got {self.placements}")

    def validate(self, network: Network) -> None:
        for k, b in enumerate(self.placements):
            if b not in network.index:
                raise NetworkError(f"station {k} placed at unknown bus {b}")
            if b == network.slack_bus:
                raise NetworkError(f"station {k} placed at the slack bus")

    def matrix(self, network: Network) -> np.ndarray:
        """Binary N x K deployment matrix."""
        m = np.zeros((network.n_bus, len(self.placements)), dtype=int)
        for k, b in enumerate(self.placements):
            m[network.index[b], k] = 1
        return m


@dataclass(frozen=True)
class PowerFlowResult:
    voltages: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    complex_voltages: np.ndarray = field(repr=False, default=None)


def _validate(net: Network) -> None:
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate bus ids")
    if net.slack_bus not in ids:
        raise NetworkError(f"slack bus {net.slack_bus} not among buses")
    if not net.v_min < net.v_slack <= net.v_max:
        raise NetworkError(f"need v_min < v_slack <= v_max, got {net.v_min}, {net.v_slack}, {net.v_max}")
    if net.base_kva <= 0 or net.base_kv <= 0:
        raise NetworkError("base_kva and base_kv must be positive")
    idset = set(ids)
    pairs = set()
    for ln in net.lines:
        if ln.from_bus not in idset or ln.to_bus not in idset:
            raise NetworkError(f"line references unknown bus: {ln}")
        if ln.from_bus == ln.to_bus:
            raise NonRadialError(f"self loop: {ln}")
        if not (ln.r_ohm > 0 and ln.x_ohm > 0):
            raise NetworkError(f"nonpositive impedance: {ln}")
        key = frozenset((ln.from_bus, ln.to_bus))
        if key in pairs:
            raise DuplicateLineError(f"duplicate line forms a cycle: {ln}")
        pairs.add(key)
    # union-find: a spanning tree has N-1 edges and no cycle
    root = {b: b for b in ids}

    def find(b):
        while root[b] != b:
            root[b] = root[root[b]]
            b = root[b]
        return b

    for ln in net.lines:
        a, b = find(ln.from_bus), find(ln.to_bus)
        if a == b:
            raise NonRadialError(f"line closes a cycle: {ln}")
        root[a] = b
    if len(net.lines) != len(ids) - 1:
        raise NonRadialError(f"network is disconnected: {len(ids)} buses, {len(net.lines)} lines")


def network_from_dict(doc: Mapping) -> Network:
    try:
        buses = tuple(
            Bus(int(b["id"]), float(b.get("p_load_kw", 0.0)), float(b.get("q_load_kvar", 0.0)))
            for b in doc["buses"]
        )
        lines = tuple(
            Line(int(ln["from"]), int(ln["to"]), float(ln["r_ohm"]), float(ln["x_ohm"]))
            for ln in doc["lines"]
        )
        return Network(
            buses=buses,
            lines=lines,
            slack_bus=int(doc["slack"]),
            v_slack=float(doc.get("v_slack", 1.0)),
            v_min=float(doc["v_min"]),
            v_max=float(doc["v_max"]),
            base_kva=float(doc["base_kva"]),
            base_kv=float(doc["base_kv"]),
            name=str(doc.get("name", "")),
        )
    except (KeyError, TypeError) as exc:
        raise NetworkError(f"malformed network document: missing or invalid field {exc}") from exc


def network_to_dict(net: Network) -> dict:
    return {
        "name": net.name,
        "slack": net.slack_bus,
        "v_slack": net.v_slack,
        "base_kva": net.base_kva,
        "base_kv": net.base_kv,
        "v_min": net.v_min,
        "v_max": net.v_max,
        "buses": [{"id": b.id, "p_load_kw": b.p_load_kw, "q_load_kvar": b.q_load_kvar} for b in net.buses],
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r_ohm": ln.r_ohm, "x_ohm": ln.x_ohm} for ln in net.lines],
    }


def load_network(source) -> Network:
    """Load a network from a JSON string, a mapping, a path, or a bundled fixture name."""
    if isinstance(source, Mapping):
        return network_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        if not path.exists() and (FIXTURE_DIR / f"{source}.json").exists():
            path = FIXTURE_DIR / f"{source}.json"
        try:
            text = path.read_text()
        except OSError as exc:
            raise NetworkError(f"cannot read network file {path}: {exc}") from exc
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"malformed network document: {exc}") from exc
    return network_from_dict(doc)


def neighbors_one_hop(network: Network, bus: int) -> frozenset[int]:
    try:
        return network.adjacency[bus]
    except KeyError:
        raise KeyError(f"unknown bus {bus}") from None


def evcs_neighborhood(network: Network, deployment: DeploymentMap, k: int) -> frozenset[int]:
    if not 0 <= k < len(deployment.placements):
        raise KeyError(f"station {k} is not placed")
    return neighbors_one_hop(network, deployment.placements[k])


def solve_power_flow(
    network: Network,
    p_inj,
    q_inj=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowResult:
    """Solve bus voltages for per-bus injections given in p.u. (slack entry ignored).

    Non-convergence is reported through ``converged=False`` rather than raised.
    """
    idx, dlf = network._sweep_matrix
    p = np.asarray(p_inj, dtype=float)
    q = np.zeros_like(p) if q_inj is None else np.asarray(q_inj, dtype=float)
    if p.shape != (network.n_bus,) or q.shape != (network.n_bus,):
        raise ValueError(f"injections must have shape ({network.n_bus},)")
    s = (p + 1j * q)[idx]
    v0 = complex(network.v_slack)
    v = np.full(len(idx), v0, dtype=complex)
    mismatch = np.inf
    it = 0
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            current = np.conj(s / v)
            v_new = v0 + dlf @ current
            mismatch = float(np.max(np.abs(v_new - v))) if len(v) else 0.0
            v = v_new
            if not np.isfinite(mismatch) or mismatch <= tol:
                break
    converged = bool(np.isfinite(mismatch) and mismatch <= tol)
    full = np.full(network.n_bus, v0, dtype=complex)
    full[idx] = v
    mags = np.abs(full)
    mags[network.index[network.slack_bus]] = network.v_slack
    return PowerFlowResult(mags, converged, it, mismatch, full)


def bundled_network(name: str) -> Network:
    """Return one of the shipped fixtures: ``ieee33`` or ``two_bus``."""
    return load_network(FIXTURE_DIR / f"{name}.json")

