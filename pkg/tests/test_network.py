import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridrelief import (
    Branch,
    Bus,
    Demand,
    Machine,
    Network,
    NetworkError,
    apply_branch_contingency,
    apply_bus_contingency,
    build_branch_admittance,
    build_bus_admittance,
    connected_components,
    deenergize_islands,
    emergency_limits,
    scale_demands,
)
from gridrelief.network import branch_end_aggregation, bus_shunt_admittance, energized_mask

from conftest import two_bus_network


def test_two_bus_admittance_matches_hand_stamp(two_bus):
    yb = build_bus_admittance(two_bus).toarray()
    expected = np.array([[5 - 5j, -5 + 5j], [-5 + 5j, 5 - 5j]])
    np.testing.assert_allclose(yb, expected, atol=1e-12)


def test_empty_branch_set_gives_zero_matrix():
    net = Network((Bus(1, 0.9, 1.1, is_slack=True), Bus(2, 0.9, 1.1)))
    assert build_bus_admittance(net).nnz == 0
    assert build_branch_admittance(net).shape == (0, 2)


def test_branch_current_from_ohms_law(two_bus):
    i_f = build_branch_admittance(two_bus) @ np.array([1.0, 0.9])
    assert i_f[0] == pytest.approx(0.5 - 0.5j, abs=1e-12)
    assert i_f[1] == pytest.approx(-0.5 + 0.5j, abs=1e-12)


def test_equal_voltages_carry_no_current(two_bus):
    assert np.allclose(build_branch_admittance(two_bus) @ np.array([1.02 + 0.1j, 1.02 + 0.1j]), 0)


def test_tap_and_shift_stamps():
    tau, sigma = 1.05, math.radians(10)
    z = complex(0.02, 0.2)
    b = 0.1
    net = Network((Bus(1, 0.9, 1.1, is_slack=True), Bus(2, 0.9, 1.1)),
                  (Branch(1, 1, 2, z.real, z.imag, b_shunt=b, tap=tau, shift=sigma),))
    y = 1 / z
    t = tau * np.exp(1j * sigma)
    yb = build_bus_admittance(net).toarray()
    assert yb[0, 0] == pytest.approx((y + 0.5j * b) / tau**2)
    assert yb[1, 1] == pytest.approx(y + 0.5j * b)
    assert yb[0, 1] == pytest.approx(-y / np.conj(t))
    assert yb[1, 0] == pytest.approx(-y / t)


def test_rts_row_sums_equal_shunts(rts):
    yb = build_bus_admittance(rts)
    row_sum = np.asarray(yb.sum(axis=1)).ravel()
    # independent recomputation: bus shunt plus half line charging of every incident branch
    expect = np.array([complex(b.gs, b.bs) / rts.base_mva for b in rts.buses])
    idx = rts.bus_index
    for br in rts.branches:
        if not br.in_service:
            continue
        y = 1 / br.series_impedance
        t = br.tap * np.exp(1j * br.shift)
        f, to = idx[br.from_bus], idx[br.to_bus]
        expect[f] += (y + 0.5j * br.b_shunt) / abs(t) ** 2 - y / np.conj(t)
        expect[to] += y + 0.5j * br.b_shunt - y / t
    np.testing.assert_allclose(row_sum, expect, atol=1e-9)


def test_symmetric_without_taps(rts):
    flat = Network(rts.buses, tuple(Branch(b.id, b.from_bus, b.to_bus, b.r, b.x, b.b_shunt, imax=b.imax)
                                   for b in rts.branches))
    yb = build_bus_admittance(flat)
    assert abs(yb - yb.T).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(parts=st.lists(st.floats(-1.5, 1.5), min_size=48, max_size=48))
def test_stamp_consistency(rts, parts):
    net = apply_bus_contingency(rts, 24)
    v = np.array(parts[:24]) + 1j * np.array(parts[24:])
    lhs = branch_end_aggregation(net) @ (build_branch_admittance(net) @ v) + bus_shunt_admittance(net) * v
    np.testing.assert_allclose(lhs, build_bus_admittance(net) @ v, atol=1e-10)


def test_bus_24_outage(rts):
    post = apply_bus_contingency(rts, 24)
    out = sorted((b.from_bus, b.to_bus) for b in post.branches if not b.in_service)
    assert out == [(3, 24), (15, 24)]
    comps = connected_components(post)
    assert len(comps) == 2
    assert [24] in comps
    assert len(connected_components(rts)) == 1


def test_contingency_idempotent_and_untouched_elements(rts):
    once = apply_bus_contingency(rts, 24)
    assert apply_bus_contingency(once, 24) == once
    assert once.machines == rts.machines and once.demands == rts.demands


def test_isolated_bus_contingency_is_identity():
    net = Network((Bus(1, 0.9, 1.1, is_slack=True), Bus(2, 0.9, 1.1), Bus(3, 0.9, 1.1)),
                  (Branch(1, 1, 2, 0.0, 0.1),))
    assert apply_bus_contingency(net, 3) == net


def test_unknown_ids_rejected(rts):
    with pytest.raises(NetworkError):
        apply_bus_contingency(rts, 999)
    with pytest.raises(NetworkError):
        apply_branch_contingency(rts, [999])


def test_scaling(rts):
    base = rts.total_demand().real
    assert scale_demands(rts, 1.15).total_demand().real == pytest.approx(1.15 * base)
    assert scale_demands(rts, 1.0) == rts
    twice = scale_demands(scale_demands(rts, 1.15), 1.15)
    assert twice.total_demand().real == pytest.approx(1.3225 * base, rel=1e-14)
    assert twice.machines == rts.machines
    with pytest.raises(NetworkError):
        scale_demands(rts, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_scaling_composes(f1, f2):
    net = two_bus_network(load=0.5)
    a = scale_demands(scale_demands(net, f1), f2).demands[0]
    b = scale_demands(net, f1 * f2).demands[0]
    assert a.p0 == pytest.approx(b.p0, rel=1e-14)


def test_empty_network_has_no_components():
    assert connected_components(Network(())) == []


def test_islands_are_deenergized(rts):
    post = deenergize_islands(apply_bus_contingency(rts, 24))
    live = energized_mask(post)
    assert live.sum() == 23 and not live[post.bus_index[24]]
    # bus 24 carries neither load nor generation in the RTS data; the zeroing is checked on a fixture
    net = Network((Bus(1, 0.9, 1.1, is_slack=True), Bus(2, 0.9, 1.1)), (),
                  (Machine(2, 0.1, 1.0, -1, 1, p0=0.5),), (Demand(2, 0.3, 0.1),))
    cut = deenergize_islands(net)
    assert cut.machines[0].pmax == 0 and cut.machines[0].pmin == 0
    assert cut.demands[0].p0 == 0


def test_validation():
    with pytest.raises(NetworkError):
        Bus(1, 1.1, 0.9)
    with pytest.raises(NetworkError):
        Branch(1, 1, 1, 0.1, 0.1)
    with pytest.raises(NetworkError):
        Branch(1, 1, 2, 0.0, 0.0)
    with pytest.raises(NetworkError):
        Network((Bus(1, 0.9, 1.1), Bus(1, 0.9, 1.1)))
    with pytest.raises(NetworkError):
        Network((Bus(1, 0.9, 1.1),), (Branch(1, 1, 7, 0.1, 0.1),))


def test_demand_bounds_are_shed_only():
    d = Demand(1, 0.5, -0.2)
    assert d.p_bounds == (0.0, 0.5)
    assert d.q_bounds == (-0.2, 0.0)
    assert Demand(1, 0.5, 0.2, sheddable=False).p_bounds == (0.5, 0.5)
    assert Demand(1, 0.5, 0.2, q_range="symmetric").q_bounds == (-0.2, 0.2)


def test_emergency_limits(rts):
    relaxed = emergency_limits(rts, machine_pmin="zero", demand_q="symmetric")
    assert all(m.pmin == 0 for m in relaxed.machines)
    assert [m.pmax for m in relaxed.machines] == [m.pmax for m in rts.machines]
    assert all(d.q_bounds == (-abs(d.q0), abs(d.q0)) for d in relaxed.demands)
    assert emergency_limits(rts) == rts
    with pytest.raises(ValueError):
        emergency_limits(rts, machine_pmin="half")
