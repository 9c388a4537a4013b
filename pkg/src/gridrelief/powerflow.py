"""Newton-Raphson AC power flow and reference-point construction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import (
    Network,
    SystemState,
    build_branch_admittance,
    build_bus_admittance,
    energized_mask,
)

logger = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, max_residual: float = float("nan")):
        self.max_residual = max_residual
        super().__init__(message)


class ConvergenceError(PowerFlowError):
    pass


class SingularJacobianError(PowerFlowError):
    pass


@dataclass(frozen=True)
class PowerFlowOptions:
    tolerance: float = 1e-10
    max_iterations: int = 20
    flat_start: bool = True
    max_backtracks: int = 12

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class PowerFlowResult:
    state: SystemState
    converged: bool
    iterations: int
    max_mismatch: float
    mismatch_history: tuple[float, ...] = ()


@dataclass(frozen=True)
class ReferencePoint:
    state: SystemState
    kind: str
    converged: bool
    max_residual: float
    fallback: bool = False
    iterations: int = 0
    notes: tuple[str, ...] = field(default=())


def power_from_iv(v, i):
    """Exact (p, q) of ``v * conj(i)`` from rectangular parts."""
    v = np.asarray(v, dtype=complex)
    i = np.asarray(i, dtype=complex)
    p = v.real * i.real + v.imag * i.imag
    q = v.imag * i.real - v.real * i.imag
    return p, q


def injection_residual(network: Network, state: SystemState) -> np.ndarray:
    """Per-bus (i_g - i_l) - Y_B v."""
    return (state.i_g - state.i_l) - build_bus_admittance(network) @ state.v


def scheduled_injection(network: Network) -> tuple[np.ndarray, np.ndarray]:
    """(generation, demand) complex power per bus at the scheduled set-points."""
    sg = np.zeros(network.n_bus, complex)
    sd = np.zeros(network.n_bus, complex)
    idx = network.bus_index
    for m in network.machines:
        sg[idx[m.bus]] += complex(m.p0, m.q0)
    for d in network.demands:
        sd[idx[d.bus]] += complex(d.p0, d.q0)
    return sg, sd


def _mismatch(ybus, v, sbus, pvpq, pq):
    mis = v * np.conj(ybus @ v) - sbus
    return np.r_[mis[pvpq].real, mis[pq].imag]


def _jacobian(ybus, v, pvpq, pq):
    ibus = ybus @ v
    dv = sp.diags(v)
    di = sp.diags(ibus)
    dvn = sp.diags(v / np.abs(v))
    ds_dvm = dv @ np.conj(ybus @ dvn) + np.conj(di) @ dvn
    ds_dva = 1j * dv @ np.conj(di - ybus @ dv)
    ds_dva = sp.csr_matrix(ds_dva)
    ds_dvm = sp.csr_matrix(ds_dvm)
    j11 = ds_dva[pvpq][:, pvpq].real
    j12 = ds_dvm[pvpq][:, pq].real
    j21 = ds_dva[pq][:, pvpq].imag
    j22 = ds_dvm[pq][:, pq].imag
    return sp.bmat([[j11, j12], [j21, j22]], format="csc")


def newton_power_flow(network: Network, options: PowerFlowOptions = PowerFlowOptions(),
                      v_init: np.ndarray | None = None) -> PowerFlowResult:
    """Polar Newton-Raphson on the energized component, with backtracking.

    Buses without a path to the slack are returned de-energized (v = 0).
    PV buses are those carrying a machine; their reactive output is free.
    """
    if network.slack_index is None:
        raise PowerFlowError("network has no slack bus")
    live = np.flatnonzero(energized_mask(network))
    ybus_full = build_bus_admittance(network)
    ybus = ybus_full[live][:, live].tocsr()
    sg, sd = scheduled_injection(network)
    sbus = (sg - sd)[live]

    pos = {int(k): n for n, k in enumerate(live)}
    slack = pos[network.slack_index]
    vset = np.ones(len(live))
    is_pv = np.zeros(len(live), dtype=bool)
    for m in network.machines:
        k = network.bus_index[m.bus]
        if k in pos:
            vset[pos[k]] = m.vset
            is_pv[pos[k]] = True
    is_pv[slack] = False
    pv = np.flatnonzero(is_pv)
    pq = np.array([k for k in range(len(live)) if k != slack and not is_pv[k]], dtype=int)
    pvpq = np.r_[pv, pq].astype(int)

    if v_init is not None and not options.flat_start:
        v = np.asarray(v_init, complex)[live].copy()
        v[pv] = vset[pv] * v[pv] / np.abs(v[pv])
    else:
        v = np.ones(len(live), complex)
    v[pv] = vset[pv] * np.exp(1j * np.angle(v[pv]))
    v[slack] = vset[slack] if network.machine_at.get(network.buses[network.slack_index].id) else 1.0

    npvpq = len(pvpq)
    f = _mismatch(ybus, v, sbus, pvpq, pq)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    history = [norm]
    it = 0
    while norm > options.tolerance and it < options.max_iterations:
        it += 1
        jac = _jacobian(ybus, v, pvpq, pq)
        try:
            with np.errstate(all="raise"):
                dx = -spla.spsolve(jac, f)
        except (RuntimeError, FloatingPointError) as exc:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}", norm) from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError(f"singular Jacobian at iteration {it}", norm)
        va, vm = np.angle(v), np.abs(v)
        step = 1.0
        for _ in range(options.max_backtracks + 1):
            va_new, vm_new = va.copy(), vm.copy()
            va_new[pvpq] += step * dx[:npvpq]
            vm_new[pq] += step * dx[npvpq:]
            v_new = vm_new * np.exp(1j * va_new)
            f_new = _mismatch(ybus, v_new, sbus, pvpq, pq)
            norm_new = float(np.max(np.abs(f_new)))
            if norm_new < norm:
                break
            step *= 0.5
        else:
            logger.debug("line search failed to decrease mismatch at iteration %d", it)
        v, f, norm = v_new, f_new, norm_new
        history.append(norm)

    converged = norm <= options.tolerance
    state = _state_from_voltage(network, live, v, ybus_full)
    return PowerFlowResult(state, converged, it, norm, tuple(history))


def _state_from_voltage(network: Network, live: np.ndarray, v_live: np.ndarray, ybus_full) -> SystemState:
    """Recover machine, load and branch currents from a bus voltage profile."""
    nb = network.n_bus
    v = np.zeros(nb, complex)
    v[live] = v_live
    _, sd = scheduled_injection(network)
    scalc = v * np.conj(ybus_full @ v)
    has_gen = np.zeros(nb, dtype=bool)
    for m in network.machines:
        has_gen[network.bus_index[m.bus]] = True
    has_gen &= np.abs(v) > 0
    nz = np.abs(v) > 0
    i_l = np.zeros(nb, complex)
    i_l[nz] = np.conj(sd[nz] / v[nz])
    i_g = np.zeros(nb, complex)
    i_g[has_gen] = np.conj((scalc[has_gen] + sd[has_gen]) / v[has_gen])
    i_f = build_branch_admittance(network) @ v
    return SystemState(v=v, i_g=i_g, i_l=i_l, i_f=np.asarray(i_f))


def solve_power_flow(network: Network, options: PowerFlowOptions = PowerFlowOptions()) -> SystemState:
    """Converged state or :class:`ConvergenceError` carrying the final mismatch."""
    res = newton_power_flow(network, options)
    if not res.converged:
        raise ConvergenceError(
            f"power flow did not converge in {options.max_iterations} iterations "
            f"(max mismatch {res.max_mismatch:.3e})", res.max_mismatch)
    return res.state


def compute_reference(network: Network, kind: str, options: PowerFlowOptions = PowerFlowOptions(),
                      fallback: ReferencePoint | None = None) -> ReferencePoint:
    """Power-flow reference point.

    For ``kind='post'`` the network must already carry the contingency, with
    surviving machines and loads at their scheduled values. If that power flow
    fails and a pre-contingency ``fallback`` is supplied, it is returned in
    its place and flagged.
    """
    if kind not in ("pre", "post"):
        raise ValueError(f"reference kind must be 'pre' or 'post', got {kind!r}")
    try:
        res = newton_power_flow(network, options)
    except PowerFlowError as exc:
        if kind == "post" and fallback is not None:
            logger.warning("post-contingency power flow failed (%s); using pre-contingency reference", exc)
            return ReferencePoint(fallback.state, "pre", fallback.converged, fallback.max_residual,
                                  fallback=True, notes=(f"post-contingency power flow failed: {exc}",))
        raise
    if not res.converged:
        if kind == "post" and fallback is not None:
            logger.warning("post-contingency power flow diverged; using pre-contingency reference")
            return ReferencePoint(fallback.state, "pre", fallback.converged, fallback.max_residual,
                                  fallback=True,
                                  notes=(f"post-contingency power flow diverged (mismatch {res.max_mismatch:.3e})",))
        raise ConvergenceError(
            f"{kind}-contingency power flow did not converge (max mismatch {res.max_mismatch:.3e})",
            res.max_mismatch)
    return ReferencePoint(res.state, kind, True, res.max_mismatch, iterations=res.iterations)


def balance_dispatch(network: Network, options: PowerFlowOptions = PowerFlowOptions(),
                     margin: float = 0.05, rounds: int = 8) -> Network:
    """Shift scheduled output so the slack machine lands inside its limits.

    The slack's excess (or shortfall) is spread over the other energized
    machines in proportion to their remaining headroom. ``margin`` keeps the
    slack that fraction of its range away from either limit. Returns the
    network unchanged if the slack carries no machine.
    """
    from dataclasses import replace

    if network.slack_index is None:
        return network
    slack_id = network.buses[network.slack_index].id
    slack = network.machine_at.get(slack_id)
    if slack is None:
        return network
    live = energized_mask(network)
    lo = slack.pmin + margin * (slack.pmax - slack.pmin)
    hi = slack.pmax - margin * (slack.pmax - slack.pmin)
    for _ in range(rounds):
        res = newton_power_flow(network, options)
        k = network.slack_index
        p_slack = float(power_from_iv(res.state.v[k], res.state.i_g[k])[0])
        if lo <= p_slack <= hi:
            return network
        excess = p_slack - hi if p_slack > hi else p_slack - lo
        others = [m for m in network.machines if m.bus != slack_id and live[network.bus_index[m.bus]]]
        room = np.array([(m.pmax - m.p0) if excess > 0 else (m.p0 - m.pmin) for m in others])
        room = np.clip(room, 0.0, None)
        if room.sum() <= 0:
            logger.warning("no headroom left to balance the slack machine")
            return network
        share = excess * room / room.sum()
        if abs(excess) > room.sum():
            share = np.sign(excess) * room
        moved = {m.bus: m.p0 + s for m, s in zip(others, share)}
        network = replace(network, machines=tuple(
            replace(m, p0=float(np.clip(moved[m.bus], m.pmin, m.pmax))) if m.bus in moved else m
            for m in network.machines))
    return network
