import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lvopf import bundled
from lvopf.network import (NetworkError, apply_variant, load_network,
                           rotate, counter_rotate)
from lvopf.phasors import PHASES, ref_rotor

from conftest import two_bus_doc


def test_cigre_document_loads(cigre_net):
    assert cigre_net.n_buses() == 18
    assert cigre_net.n_lines() == 17
    assert cigre_net.conductors == ("a", "b", "c", "n", "g")
    assert cigre_net.buses[cigre_net.slack].id == "R1"
    # customer nodes are grounded through 1 ohm
    grounded = {cigre_net.buses[k].id for k in cigre_net.grounded_buses()}
    assert grounded == {"R11", "R15", "R16", "R17", "R18"}
    zb = cigre_net.z_base_ohm
    assert zb == pytest.approx(57.6)
    g = cigre_net.buses[cigre_net.bus_index["R11"]].grounding
    assert g.resistance == pytest.approx(1.0 / zb)


def test_minimal_two_bus(two_bus_net):
    assert two_bus_net.n_lines() == 1
    assert two_bus_net.lines[0].from_bus == "S"
    assert two_bus_net.path_to_slack(two_bus_net.bus_index["B"]) == [0]


def test_loop_rejected():
    doc = two_bus_doc()
    doc["buses"].append({"id": "C"})
    line = dict(doc["lines"][0])
    doc["lines"] += [dict(line, **{"from": "B", "to": "C"}),
                     dict(line, **{"from": "C", "to": "S"})]
    with pytest.raises(NetworkError, match="non-radial"):
        load_network(doc)


def test_missing_slack_rejected():
    doc = two_bus_doc()
    doc["buses"][0].pop("slack")
    with pytest.raises(NetworkError, match="slack"):
        load_network(doc)


def test_asymmetric_matrix_rejected():
    doc = two_bus_doc(phases="ab")
    doc["lines"][0]["r_ohm_per_km"][0][1] = 1.0
    with pytest.raises(NetworkError, match="asymmetric"):
        load_network(doc)


def test_negative_self_resistance_rejected():
    doc = two_bus_doc()
    doc["lines"][0]["r_ohm_per_km"][0][0] = -1.0
    with pytest.raises(NetworkError, match="self-resistance"):
        load_network(doc)


def test_variant_identity(cigre_net):
    same = apply_variant(cigre_net, "N1")
    assert same.n_buses() == cigre_net.n_buses()
    assert same.conductors == cigre_net.conductors
    np.testing.assert_allclose(same.lines[3].R, cigre_net.lines[3].R)


def test_variant_n4_zeroes_mutual(cigre_net_solid):
    n4 = apply_variant(cigre_net_solid, "N4")
    for ln in n4.lines:
        assert np.allclose(ln.R - np.diag(np.diag(ln.R)), 0.0)
        assert np.allclose(ln.X - np.diag(np.diag(ln.X)), 0.0)


def test_variant_flags_inexact_kron(cigre_net):
    # reference feeder grounds only customer nodes resistively
    n3 = apply_variant(cigre_net, "N3")
    assert n3.kron_approximate
    assert n3.conductors == ("a", "b", "c")


def test_kron_requires_neutral_row():
    doc = two_bus_doc(phases="abc")
    net = load_network(doc)
    with pytest.raises(NetworkError, match="neutral"):
        apply_variant(net, "N3")


def test_rotation_examples():
    u = rotate(complex(-0.5, -0.87), "b")
    assert u.real == pytest.approx(1.0, abs=5e-3)
    assert u.imag == pytest.approx(0.0, abs=5e-3)
    assert rotate(1 + 0j, "a") == pytest.approx(1 + 0j)
    u = rotate(complex(-0.5, +0.87), "c")
    assert u.real == pytest.approx(1.0, abs=5e-3)
    assert u.imag == pytest.approx(0.0, abs=5e-3)
    with pytest.raises(ValueError):
        rotate(1 + 0j, "n")


@given(st.complex_numbers(max_magnitude=1e6, allow_nan=False,
                          allow_infinity=False),
       st.sampled_from(PHASES))
def test_rotation_is_isometry(u, z):
    assert abs(abs(rotate(u, z)) - abs(u)) <= 1e-9 * max(1.0, abs(u))
    back = counter_rotate(rotate(u, z), z)
    assert abs(back - u) <= 1e-9 * max(1.0, abs(u))


def test_nominal_rotors_map_to_unity():
    for z in PHASES:
        assert rotate(ref_rotor(z), z) == pytest.approx(1 + 0j)
