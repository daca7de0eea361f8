import numpy as np
import pytest

from lvopf import network, powerflow
from lvopf.devices import Connection, DeviceSet, EvUnit, FlexLoad, ZipCoefficients
from lvopf.powerflow import (Injection, injections_from_devices, kcl_residuals,
                             solve_power_flow)

from conftest import two_bus_doc


def constant_load(bus, phases, p, q=0.0, T=1):
    inj = Injection(-1, phases, np.full(T, p), np.full(T, q))
    inj.bus_name = bus
    return inj


def test_zero_injection_flat_profile(two_bus_net):
    st = solve_power_flow(two_bus_net, [], horizon=1)
    assert st.converged
    assert st.iterations == 1
    assert st.u[1, 0, 0] == pytest.approx(1 + 0j)
    assert np.allclose(st.i_line, 0.0)


def test_two_bus_analytic():
    # r=0.01 p.u., constant P=1: u solves u^2 - u + 0.01 = 0
    net = network.load_network(two_bus_doc(r_self=0.01))
    st = solve_power_flow(net, [constant_load("B", ("a",), 1.0)])
    expected = (1 + np.sqrt(1 - 0.04)) / 2
    assert abs(st.u[1, 0, 0]) == pytest.approx(expected, abs=1e-9)
    assert st.u[1, 0, 0].real == pytest.approx(0.9898979485566356, abs=1e-9)


def test_monotone_loading():
    net = network.load_network(two_bus_doc(r_self=0.01))
    mags = []
    for p in (0.5, 1.0, 2.0, 4.0):
        st = solve_power_flow(net, [constant_load("B", ("a",), p)])
        mags.append(abs(st.u[1, 0, 0]))
    assert all(a > b for a, b in zip(mags, mags[1:]))


def test_cigre_self_consistency(cigre_net, cigre_devices):
    inj = injections_from_devices(cigre_devices)
    st = solve_power_flow(cigre_net, inj)
    assert st.converged
    assert kcl_residuals(cigre_net, st, inj) <= 1e-8


def test_newton_matches_sweep(cigre_net, cigre_devices):
    inj = injections_from_devices(cigre_devices)
    short = []
    for i in inj:
        j = Injection(-1, i.nodes, i.p0[18:22], i.q0[18:22], i.zip_p, i.zip_q)
        j.bus_name = i.bus_name
        short.append(j)
    st1 = solve_power_flow(cigre_net, short)
    st2 = solve_power_flow(cigre_net, [Injection(i.bus_i, i.nodes, i.p0, i.q0,
                                                 i.zip_p, i.zip_q)
                                       for i in short], force_newton=True)
    assert np.abs(st1.u - st2.u).max() <= 1e-8


def test_balanced_symmetry_n4(cigre_net_solid):
    n4 = network.apply_variant(cigre_net_solid, "N4")
    inj = [constant_load("R10", (z,), 2.0, 0.5) for z in "abc"]
    st = solve_power_flow(n4, inj)
    mags = np.abs(st.u[n4.bus_index["R10"], :3, 0])
    assert np.ptp(mags) <= 1e-10


def test_balanced_loads_zero_neutral(cigre_net_solid):
    n2 = network.apply_variant(cigre_net_solid, "N2")
    inj = [constant_load("R10", (z,), 2.0, 0.5) for z in "abc"]
    st = solve_power_flow(n2, inj)
    ni = network.COND_POS["n"]
    assert np.abs(st.i_line[:, ni, :]).max() <= 1e-9


def test_kron_equivalence_reference_feeder(cigre_net_solid, cigre_devices):
    inj1 = injections_from_devices(cigre_devices)
    inj3 = injections_from_devices(cigre_devices)
    n3 = network.apply_variant(cigre_net_solid, "N3")
    s1 = solve_power_flow(cigre_net_solid, inj1)
    s3 = solve_power_flow(n3, inj3)
    assert np.abs(s1.u[:, :3, :] - s3.u[:, :3, :]).max() <= 1e-8


def test_delta_injection_draws_two_phases():
    net = network.load_network(two_bus_doc(r_self=0.01, phases="abc"))
    st = solve_power_flow(net, [constant_load("B", ("a", "b"), 1.0)])
    ia = st.i_line[0, 0, 0]
    ib = st.i_line[0, 1, 0]
    assert ia == pytest.approx(-ib)
    assert abs(ia) > 0.1


def test_wye_load_with_neutral_return():
    doc = two_bus_doc(r_self=0.01, phases="an")
    net = network.load_network(doc)
    st = solve_power_flow(net, [constant_load("B", ("a",), 1.0)])
    ni = network.COND_POS["n"]
    # without grounding the full return flows back through the neutral
    assert st.i_line[0, ni, 0] == pytest.approx(-st.i_line[0, 0, 0], rel=1e-9)
    # the device voltage is the phase-neutral difference
    u_dev = st.u[1, 0, 0] - st.u[1, ni, 0]
    p_back = (u_dev * np.conj(st.i_line[0, 0, 0])).real
    assert p_back == pytest.approx(1.0, abs=1e-8)


def test_validation_detects_perturbed_voltages(cigre_net, cigre_devices):
    inj = injections_from_devices(cigre_devices)
    st = solve_power_flow(cigre_net, inj)

    class FakeResult:
        controls = None
        voltages = st.u.copy()

    FakeResult.voltages[5, 1, 12] += 0.05
    report = powerflow.validate_opf_solution(cigre_net, cigre_devices,
                                             FakeResult, tol=1e-4)
    assert not report["passed"]
    assert report["bus"] == cigre_net.buses[5].id
    assert report["phase"] == "b"
    assert report["period"] == 12
    assert report["max_deviation"] == pytest.approx(0.05, rel=1e-3)


def test_validation_passes_on_true_solution(cigre_net, cigre_devices):
    inj = injections_from_devices(cigre_devices)
    st = solve_power_flow(cigre_net, inj)

    class FakeResult:
        controls = None
        voltages = st.u

    report = powerflow.validate_opf_solution(cigre_net, cigre_devices,
                                             FakeResult, tol=1e-6)
    assert report["passed"]
