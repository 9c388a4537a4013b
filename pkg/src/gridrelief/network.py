"""Grid data model, admittance matrices and scenario transformations.

All electrical quantities are per unit on ``Network.base_mva``. Complex
voltages and currents are plain Python/numpy complex numbers in rectangular
form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc


DEMAND_Q_RANGES = ("shed-only", "symmetric")
MACHINE_PMIN_MODES = ("case", "zero")


class NetworkError(ValueError):
    """Structural or data error in a network description."""


@dataclass(frozen=True)
class Bus:
    id: int
    vmin: float
    vmax: float
    is_slack: bool = False
    gs: float = 0.0
    bs: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.vmin <= self.vmax):
            raise NetworkError(f"bus {self.id}: need 0 < vmin <= vmax, got {self.vmin}, {self.vmax}")


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    imax: float = math.inf
    in_service: bool = True

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"branch {self.id}: from_bus == to_bus ({self.from_bus})")
        if self.r == 0.0 and self.x == 0.0:
            raise NetworkError(f"branch {self.id}: zero series impedance")
        if not self.imax > 0.0:
            raise NetworkError(f"branch {self.id}: imax must be positive")

    @property
    def series_impedance(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class Machine:
    """Aggregated generation at one bus.

    ``vset`` is the voltage-magnitude setpoint used by the power flow.
    """

    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    p0: float = 0.0
    q0: float = 0.0
    vset: float = 1.0
    cost_p: float = 10.0
    cost_q: float = 1.0

    def __post_init__(self):
        if self.pmin > self.pmax + 1e-12 or self.qmin > self.qmax + 1e-12:
            raise NetworkError(f"machine at bus {self.bus}: inverted limits")


@dataclass(frozen=True)
class Demand:
    bus: int
    p0: float
    q0: float
    sheddable: bool = True
    cost_shed_p: float = 1000.0
    cost_shed_q: float = 100.0
    q_range: str = "shed-only"

    def __post_init__(self):
        if self.q_range not in DEMAND_Q_RANGES:
            raise NetworkError(f"demand at bus {self.bus}: unknown q_range {self.q_range!r}")

    @property
    def p_bounds(self) -> tuple[float, float]:
        # shed-only: consumption can drop to zero but never grow
        if not self.sheddable:
            return self.p0, self.p0
        return min(0.0, self.p0), max(0.0, self.p0)

    @property
    def q_bounds(self) -> tuple[float, float]:
        if not self.sheddable:
            return self.q0, self.q0
        if self.q_range == "symmetric":
            # local compensation may swing reactive draw to -|q0|
            return -abs(self.q0), abs(self.q0)
        return min(0.0, self.q0), max(0.0, self.q0)


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    machines: tuple[Machine, ...] = ()
    demands: tuple[Demand, ...] = ()
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "machines", tuple(self.machines))
        object.__setattr__(self, "demands", tuple(self.demands))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        known = set(ids)
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise NetworkError(f"branch {br.id} references unknown bus {end}")
        for kind, elems in (("machine", self.machines), ("demand", self.demands)):
            seen = set()
            for e in elems:
                if e.bus not in known:
                    raise NetworkError(f"{kind} references unknown bus {e.bus}")
                if e.bus in seen:
                    raise NetworkError(f"more than one {kind} at bus {e.bus}; aggregate first")
                seen.add(e.bus)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def slack_index(self) -> int | None:
        slacks = [k for k, b in enumerate(self.buses) if b.is_slack]
        if len(slacks) > 1:
            raise NetworkError("multiple slack buses are not supported")
        return slacks[0] if slacks else None

    @cached_property
    def machine_at(self) -> dict[int, Machine]:
        return {m.bus: m for m in self.machines}

    @cached_property
    def demand_at(self) -> dict[int, Demand]:
        return {d.bus: d for d in self.demands}

    @property
    def vmin(self) -> np.ndarray:
        return np.array([b.vmin for b in self.buses])

    @property
    def vmax(self) -> np.ndarray:
        return np.array([b.vmax for b in self.buses])

    def total_demand(self) -> complex:
        return complex(sum(d.p0 for d in self.demands), sum(d.q0 for d in self.demands))


@dataclass(frozen=True)
class SystemState:
    """Rectangular voltages and currents of every bus and branch end.

    ``i_f`` stacks the from-side currents of all branches followed by the
    to-side currents, matching the row order of :func:`build_branch_admittance`.
    """

    v: np.ndarray
    i_g: np.ndarray
    i_l: np.ndarray
    i_f: np.ndarray

    @property
    def i_b(self) -> np.ndarray:
        return self.i_g - self.i_l

    @property
    def s_g(self) -> np.ndarray:
        return self.v * np.conj(self.i_g)

    @property
    def s_l(self) -> np.ndarray:
        return self.v * np.conj(self.i_l)


def _branch_stamps(network: Network):
    """Per-branch (yff, yft, ytf, ytt) of the pi-model, zero when out of service."""
    nl = network.n_branch
    yff = np.zeros(nl, complex)
    yft = np.zeros(nl, complex)
    ytf = np.zeros(nl, complex)
    ytt = np.zeros(nl, complex)
    for k, br in enumerate(network.branches):
        if not br.in_service:
            continue
        ys = 1.0 / br.series_impedance
        tap = (br.tap or 1.0) * np.exp(1j * br.shift)
        half = 0.5j * br.b_shunt
        yff[k] = (ys + half) / (tap * np.conj(tap))
        yft[k] = -ys / np.conj(tap)
        ytf[k] = -ys / tap
        ytt[k] = ys + half
    return yff, yft, ytf, ytt


def _incidence(network: Network):
    idx = network.bus_index
    nl, nb = network.n_branch, network.n_bus
    rows = np.arange(nl)
    f = np.array([idx[br.from_bus] for br in network.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in network.branches], dtype=int)
    cf = sp.csr_matrix((np.ones(nl), (rows, f)), shape=(nl, nb))
    ct = sp.csr_matrix((np.ones(nl), (rows, t)), shape=(nl, nb))
    return cf, ct


def bus_shunt_admittance(network: Network) -> np.ndarray:
    return np.array([complex(b.gs, b.bs) for b in network.buses]) / network.base_mva


def build_branch_admittance(network: Network) -> sp.csr_matrix:
    """Y_F mapping bus voltages to branch-end currents, shape (2*n_branch, n_bus)."""
    yff, yft, ytf, ytt = _branch_stamps(network)
    cf, ct = _incidence(network)
    yf = sp.diags(yff) @ cf + sp.diags(yft) @ ct
    yt = sp.diags(ytf) @ cf + sp.diags(ytt) @ ct
    return sp.vstack([yf, yt]).tocsr().astype(complex)


def build_bus_admittance(network: Network) -> sp.csr_matrix:
    """Y_B including line charging, taps, phase shifters and bus shunts."""
    cf, ct = _incidence(network)
    yfb = build_branch_admittance(network)
    nl = network.n_branch
    ybus = cf.T @ yfb[:nl] + ct.T @ yfb[nl:] + sp.diags(bus_shunt_admittance(network))
    return sp.csr_matrix(ybus, dtype=complex)


def branch_end_buses(network: Network) -> tuple[np.ndarray, np.ndarray]:
    idx = network.bus_index
    f = np.array([idx[br.from_bus] for br in network.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in network.branches], dtype=int)
    return f, t


def branch_end_aggregation(network: Network) -> sp.csr_matrix:
    """Matrix summing the stacked branch-end currents into bus injections."""
    cf, ct = _incidence(network)
    return sp.hstack([cf.T, ct.T]).tocsr()


def apply_bus_contingency(network: Network, bus: int) -> Network:
    """Take every branch incident to ``bus`` out of service."""
    if bus not in network.bus_index:
        raise NetworkError(f"unknown bus {bus}")
    branches = tuple(
        replace(br, in_service=False) if bus in (br.from_bus, br.to_bus) else br
        for br in network.branches
    )
    return replace(network, branches=branches)


def apply_branch_contingency(network: Network, branch_ids) -> Network:
    wanted = set(branch_ids)
    known = {br.id for br in network.branches}
    missing = wanted - known
    if missing:
        raise NetworkError(f"unknown branch ids {sorted(missing)}")
    branches = tuple(
        replace(br, in_service=False) if br.id in wanted else br for br in network.branches
    )
    return replace(network, branches=branches)


def scale_demands(network: Network, factor: float) -> Network:
    if not factor > 0:
        raise NetworkError(f"load scale factor must be positive, got {factor}")
    demands = tuple(replace(d, p0=d.p0 * factor, q0=d.q0 * factor) for d in network.demands)
    return replace(network, demands=demands)


def connected_components(network: Network) -> list[list[int]]:
    """Partition of bus ids induced by the in-service branches."""
    if network.n_bus == 0:
        return []
    idx = network.bus_index
    live = [br for br in network.branches if br.in_service]
    rows = [idx[br.from_bus] for br in live]
    cols = [idx[br.to_bus] for br in live]
    adj = sp.csr_matrix((np.ones(len(live)), (rows, cols)), shape=(network.n_bus, network.n_bus))
    _, labels = _cc(adj, directed=False)
    groups: dict[int, list[int]] = {}
    for bus, lab in zip(network.buses, labels):
        groups.setdefault(int(lab), []).append(bus.id)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def energized_mask(network: Network) -> np.ndarray:
    """Boolean per bus: True when the bus shares a component with the slack."""
    mask = np.zeros(network.n_bus, dtype=bool)
    if network.slack_index is None:
        return mask
    slack_id = network.buses[network.slack_index].id
    for comp in connected_components(network):
        if slack_id in comp:
            for b in comp:
                mask[network.bus_index[b]] = True
    return mask


def deenergize_islands(network: Network) -> Network:
    """Zero the machines and demands of buses without a path to the slack."""
    live = energized_mask(network)
    dead = {b.id for b, ok in zip(network.buses, live) if not ok}
    if not dead:
        return network
    machines = tuple(
        replace(m, pmin=0.0, pmax=0.0, qmin=0.0, qmax=0.0, p0=0.0, q0=0.0) if m.bus in dead else m
        for m in network.machines
    )
    demands = tuple(replace(d, p0=0.0, q0=0.0) if d.bus in dead else d for d in network.demands)
    return replace(network, machines=machines, demands=demands)


def emergency_limits(network: Network, machine_pmin: str = "case", demand_q: str = "shed-only") -> Network:
    """Control-range assumptions for the emergency problem.

    ``machine_pmin='zero'`` lets any unit be tripped (active lower limit 0).
    ``demand_q='symmetric'`` lets sheddable loads move reactive draw within
    ``[-|q0|, |q0|]`` instead of only toward zero.
    """
    if machine_pmin not in MACHINE_PMIN_MODES:
        raise ValueError(f"machine_pmin must be one of {MACHINE_PMIN_MODES}")
    if demand_q not in DEMAND_Q_RANGES:
        raise ValueError(f"demand_q must be one of {DEMAND_Q_RANGES}")
    machines = network.machines
    if machine_pmin == "zero":
        machines = tuple(replace(m, pmin=min(0.0, m.pmin)) for m in machines)
    demands = tuple(replace(d, q_range=demand_q) for d in network.demands)
    return replace(network, machines=machines, demands=demands)
