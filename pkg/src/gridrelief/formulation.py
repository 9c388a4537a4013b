"""Assembly of the four emergency-control programs over :class:`ConicProgram`.

Kinds:

``convex-taylor``
    flow equations, branch-current cones, convex voltage domain, first-order
    power bounds.
``convex-robust``
    as above with robust current domains in place of the power bounds.
``linear-taylor`` / ``linear-robust``
    polygonal versions of the two; pure LPs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    AnchorAngles,
    Halfspace,
    SecondOrderCone,
    anchor_angles,
    inscribed_polygon_facets,
    robust_conic_domain,
    robust_linear_domain,
    taylor_power_row,
    voltage_domain,
    voltage_polygon_facets,
)
from .network import (
    Network,
    SystemState,
    build_branch_admittance,
    build_bus_admittance,
    energized_mask,
)
from .powerflow import ReferencePoint, power_from_iv
from .program import ConicProgram, SolverResult

KINDS = ("convex-taylor", "convex-robust", "linear-taylor", "linear-robust")


class FormulationError(ValueError):
    pass


@dataclass(frozen=True)
class Sides:
    m_i: int = 32
    m_v: int = 32
    n_i: int = 32

    def __post_init__(self):
        for name in ("m_i", "m_v", "n_i"):
            if int(getattr(self, name)) < 3:
                raise FormulationError(f"{name} must be at least 3")

def declare_variables(network: Network, program: ConicProgram) -> None:
    nb, nl = network.n_bus, network.n_branch
    for name in ("v", "i_g", "i_l", "i_b"):
        program.add_block(f"{name}_re", nb)
        program.add_block(f"{name}_im", nb)
    program.add_block("i_f_re", 2 * nl)
    program.add_block("i_f_im", 2 * nl)

    live = energized_mask(network)
    blk = program.blocks
    for k, bus in enumerate(network.buses):
        dead = not live[k]
        if dead:
            for name in ("v", "i_b"):
                program.fix(blk[f"{name}_re"][k])
                program.fix(blk[f"{name}_im"][k])
        if dead or bus.id not in network.machine_at:
            program.fix(blk["i_g_re"][k])
            program.fix(blk["i_g_im"][k])
        if dead or bus.id not in network.demand_at:
            program.fix(blk["i_l_re"][k])
            program.fix(blk["i_l_im"][k])


def _complex_rows(mat, out_re, out_im, in_re, in_im):
    """Rows of ``out = mat @ in`` split into real and imaginary parts."""
    mat = mat.tocsr()
    rows = []
    for r in range(mat.shape[0]):
        lo, hi = mat.indptr[r], mat.indptr[r + 1]
        cols, vals = mat.indices[lo:hi], mat.data[lo:hi]
        re = {int(out_re[r]): -1.0}
        im = {int(out_im[r]): -1.0}
        for c, y in zip(cols, vals):
            re[int(in_re[c])] = re.get(int(in_re[c]), 0.0) + y.real
            re[int(in_im[c])] = re.get(int(in_im[c]), 0.0) - y.imag
            im[int(in_re[c])] = im.get(int(in_re[c]), 0.0) + y.imag
            im[int(in_im[c])] = im.get(int(in_im[c]), 0.0) + y.real
        rows.append((re, im))
    return rows


def assemble_flow_constraints(network: Network, program: ConicProgram) -> None:
    """Current aggregation, bus and branch Ohm's law, slack angle."""
    blk = program.blocks
    for k in range(network.n_bus):
        for part in ("re", "im"):
            program.add_eq({int(blk[f"i_b_{part}"][k]): 1.0, int(blk[f"i_g_{part}"][k]): -1.0,
                            int(blk[f"i_l_{part}"][k]): 1.0}, 0.0, tag=f"aggregate:{part}:{k}")
    ybus = build_bus_admittance(network)
    for k, (re, im) in enumerate(_complex_rows(ybus, blk["i_b_re"], blk["i_b_im"], blk["v_re"], blk["v_im"])):
        program.add_eq(re, 0.0, tag=f"bus:re:{k}")
        program.add_eq(im, 0.0, tag=f"bus:im:{k}")
    yf = build_branch_admittance(network)
    for k, (re, im) in enumerate(_complex_rows(yf, blk["i_f_re"], blk["i_f_im"], blk["v_re"], blk["v_im"])):
        program.add_eq(re, 0.0, tag=f"branch:re:{k}")
        program.add_eq(im, 0.0, tag=f"branch:im:{k}")
    if network.slack_index is not None:
        program.add_eq({int(blk["v_im"][network.slack_index]): 1.0}, 0.0, tag="slack")


def _local_cols(program: ConicProgram, k: int, current: str) -> dict[str, int]:
    blk = program.blocks
    return {"v_re": int(blk["v_re"][k]), "v_im": int(blk["v_im"][k]),
            "i_re": int(blk[f"{current}_re"][k]), "i_im": int(blk[f"{current}_im"][k])}


def _bind(coefficients, cols) -> dict[int, float]:
    row: dict[int, float] = {}
    for name, val in coefficients.items():
        row[cols[name]] = row.get(cols[name], 0.0) + val
    return row


def _add_constraint(program: ConicProgram, con, cols, tag: str) -> None:
    if isinstance(con, SecondOrderCone):
        program.add_soc([cols[t] for t in con.terms], con.bound, tag)
    else:
        row, rhs = con.as_leq()
        program.add_leq(_bind(row, cols), rhs, tag)


def _add_taylor_bounds(program, row, cols, lo, hi, tag):
    coeffs = _bind(row.coefficients, cols)
    program.add_leq(coeffs, hi - row.constant, tag=f"{tag}:upper")
    program.add_geq(coeffs, lo - row.constant, tag=f"{tag}:lower")


def assemble_objective(network: Network, reference: ReferencePoint, program: ConicProgram,
                       mode: str = "deviation") -> None:
    """Linearised emergency-control cost.

    ``deviation``: load shed (never negative) plus absolute redispatch of
    every machine's p and q and of every load's q, each measured with the
    first-order power rows against the reference.
    ``literal``: linear cost of the linearised machine outputs plus the shed.
    """
    if mode not in ("deviation", "literal"):
        raise FormulationError(f"unknown objective mode {mode!r}")
    live = energized_mask(network)
    st = reference.state
    idx = network.bus_index
    n_m = sum(1 for m in network.machines if live[idx[m.bus]])
    n_d = sum(1 for d in network.demands if live[idx[d.bus]])
    if mode == "deviation":
        t_pg = program.add_block("t_pg", n_m, lb=0.0)
        t_qg = program.add_block("t_qg", n_m, lb=0.0)
        t_ql = program.add_block("t_ql", n_d, lb=0.0)

    j = 0
    for m in network.machines:
        k = idx[m.bus]
        if not live[k]:
            continue
        cols = _local_cols(program, k, "i_g")
        v0, i0 = complex(st.v[k]), complex(st.i_g[k])
        p0, q0 = power_from_iv(v0, i0)
        for which, cost, ref, tcol in (("active", m.cost_p, p0, "t_pg"), ("reactive", m.cost_q, q0, "t_qg")):
            row = taylor_power_row(v0, i0, which)
            coeffs = _bind(row.coefficients, cols)
            if mode == "deviation":
                t = int(program.blocks[tcol][j])
                # t >= |T(v, i) - ref|
                program.add_leq({**coeffs, t: -1.0}, ref - row.constant, tag=f"epi:{tcol}:{m.bus}")
                program.add_leq({**{c: -v for c, v in coeffs.items()}, t: -1.0}, row.constant - ref,
                                tag=f"epi:{tcol}:{m.bus}")
                program.add_objective({t: cost})
            else:
                program.add_objective({c: cost * v for c, v in coeffs.items()}, cost * row.constant)
        j += 1

    j = 0
    for d in network.demands:
        k = idx[d.bus]
        if not live[k]:
            continue
        cols = _local_cols(program, k, "i_l")
        v0, i0 = complex(st.v[k]), complex(st.i_l[k])
        prow = taylor_power_row(v0, i0, "active")
        pc = _bind(prow.coefficients, cols)
        # shed = p0 - T_p >= 0
        program.add_objective({c: -d.cost_shed_p * v for c, v in pc.items()}, d.cost_shed_p * (d.p0 - prow.constant))
        program.add_leq(pc, d.p0 - prow.constant, tag=f"shed:{d.bus}")
        qrow = taylor_power_row(v0, i0, "reactive")
        qc = _bind(qrow.coefficients, cols)
        if mode == "deviation":
            t = int(program.blocks["t_ql"][j])
            program.add_leq({**qc, t: -1.0}, d.q0 - qrow.constant, tag=f"epi:t_ql:{d.bus}")
            program.add_leq({**{c: -v for c, v in qc.items()}, t: -1.0}, qrow.constant - d.q0, tag=f"epi:t_ql:{d.bus}")
            program.add_objective({t: d.cost_shed_q})
        else:
            program.add_objective({c: -d.cost_shed_q * v for c, v in qc.items()},
                                  d.cost_shed_q * (d.q0 - qrow.constant))
        j += 1


def build_formulation(network: Network, reference: ReferencePoint | None, kind: str,
                      sides: Sides = Sides(), objective: str = "deviation",
                      robust_form: str = "facets") -> ConicProgram:
    if kind not in KINDS:
        raise FormulationError(f"unknown formulation kind {kind!r}; expected one of {KINDS}")
    if reference is None:
        raise FormulationError("a reference point is required")
    linear = kind.startswith("linear")
    robust = kind.endswith("robust")
    live = energized_mask(network)
    ang: AnchorAngles = anchor_angles(reference, network, live)
    v_ref = np.asarray(reference.state.v, complex)

    prog = ConicProgram()
    declare_variables(network, prog)
    assemble_flow_constraints(network, prog)
    blk = prog.blocks

    # branch currents
    nl = network.n_branch
    for e in range(2 * nl):
        br = network.branches[e % nl]
        if not br.in_service or not np.isfinite(br.imax):
            continue
        cols = {"i_re": int(blk["i_f_re"][e]), "i_im": int(blk["i_f_im"][e])}
        tag = f"branch-current:{br.id}:{'from' if e < nl else 'to'}"
        if linear:
            for h in inscribed_polygon_facets(br.imax, sides.m_i):
                _add_constraint(prog, h, cols, tag)
        else:
            _add_constraint(prog, SecondOrderCone(("i_re", "i_im"), br.imax), cols, tag)

    # voltages
    for k, bus in enumerate(network.buses):
        cols = {"v_re": int(blk["v_re"][k]), "v_im": int(blk["v_im"][k])}
        if not live[k]:
            if not linear:
                _add_constraint(prog, SecondOrderCone(("v_re", "v_im"), bus.vmax), cols, f"voltage-upper:{bus.id}")
            continue
        upper, lower = voltage_domain(complex(v_ref[k]), bus.vmin, bus.vmax)
        _add_constraint(prog, lower, cols, f"voltage-lower:{bus.id}")
        if linear:
            for h in voltage_polygon_facets(ang.theta[k], ang.phi[k], bus.vmax, sides.m_v):
                _add_constraint(prog, h, cols, f"voltage-upper:{bus.id}")
        else:
            _add_constraint(prog, upper, cols, f"voltage-upper:{bus.id}")

    # machine and load power bounds
    st = reference.state
    elems = [("i_g", m.bus, m.pmin, m.pmax, m.qmin, m.qmax, st.i_g) for m in network.machines]
    elems += [("i_l", d.bus, *d.p_bounds, *d.q_bounds, st.i_l) for d in network.demands]
    for current, bus_id, pmin, pmax, qmin, qmax, i_ref in elems:
        k = network.bus_index[bus_id]
        if not live[k]:
            continue
        cols = _local_cols(prog, k, current)
        tag = f"{'machine' if current == 'i_g' else 'demand'}:{bus_id}"
        vmax = network.buses[k].vmax
        if robust:
            if linear:
                cons = robust_linear_domain(pmin, pmax, qmin, qmax, ang.theta[k], ang.phi[k], vmax,
                                            sides.n_i, form=robust_form, voltage_sides=sides.m_v)
            else:
                cons = robust_conic_domain(pmin, pmax, qmin, qmax, ang.theta[k], ang.phi[k], vmax,
                                           pieces=sides.n_i)
            for con in cons:
                _add_constraint(prog, con, cols, tag)
        else:
            v0, i0 = complex(v_ref[k]), complex(i_ref[k])
            _add_taylor_bounds(prog, taylor_power_row(v0, i0, "active"), cols, pmin, pmax, f"{tag}:p")
            _add_taylor_bounds(prog, taylor_power_row(v0, i0, "reactive"), cols, qmin, qmax, f"{tag}:q")

    assemble_objective(network, reference, prog, mode=objective)
    return prog


def extract_solution(program: ConicProgram, result: SolverResult, network: Network) -> SystemState:
    if result.status != "optimal" or result.x is None:
        raise FormulationError(f"cannot extract a state from a {result.status} solve")
    x = result.x
    blk = program.blocks

    def cplx(name):
        return x[blk[f"{name}_re"]] + 1j * x[blk[f"{name}_im"]]

    return SystemState(v=cplx("v"), i_g=cplx("i_g"), i_l=cplx("i_l"), i_f=cplx("i_f"))


def taylor_powers(reference: ReferencePoint, state: SystemState) -> dict[str, np.ndarray]:
    """First-order machine and load powers of ``state`` around ``reference``."""
    out = {}
    v0 = np.asarray(reference.state.v, complex)
    for name in ("i_g", "i_l"):
        i0 = np.asarray(getattr(reference.state, name), complex)
        i = np.asarray(getattr(state, name), complex)
        v = np.asarray(state.v, complex)
        out[f"p_{name[2]}"] = (v0.real * i.real + v.real * i0.real - v0.real * i0.real
                               + v0.imag * i.imag + v.imag * i0.imag - v0.imag * i0.imag)
        out[f"q_{name[2]}"] = (v0.imag * i.real + v.imag * i0.real - v0.imag * i0.real
                               - v0.real * i.imag - v.real * i0.imag + v0.real * i0.imag)
    return out


def constraint_counts(program: ConicProgram) -> dict[str, int]:
    return {"equalities": program.n_eq, "inequalities": program.n_ub, "cones": len(program.cones)}


__all__ = [
    "KINDS", "FormulationError", "Sides", "declare_variables", "assemble_flow_constraints",
    "assemble_objective", "build_formulation", "extract_solution", "taylor_powers", "constraint_counts",
    "Halfspace",
]
