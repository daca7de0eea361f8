import json

import numpy as np
import pytest

from lvopf import bundled, devices, network, profiles


@pytest.fixture(scope="session")
def cigre_net():
    return network.load_network(bundled.default_network_path())


@pytest.fixture(scope="session")
def cigre_devices():
    cols = profiles.read_profile_table(bundled.default_profiles_path())
    return devices.load_devices(bundled.default_devices_path(),
                                profile_columns=cols)


@pytest.fixture(scope="session")
def cigre_net_solid():
    """Reference feeder with solid neutral grounding at every bus."""
    with open(bundled.default_network_path()) as fh:
        doc = json.load(fh)
    for b in doc["buses"]:
        b["grounding"] = {"r_ohm": 0.0, "x_ohm": 0.0}
    return network.load_network(doc)


def two_bus_doc(r_self=0.01, x_self=0.0, phases="a", ampacity_a=None):
    """Minimal single-line document on the 1 kW / 240 V base, p.u. impedance
    entered directly by scaling with the impedance base."""
    zb = 240.0 ** 2 / 1000.0
    n = len(phases)
    r = np.zeros((5, 5))
    x = np.zeros((5, 5))
    for f in phases:
        k = "abcng".index(f)
        r[k, k] = r_self * zb
        x[k, k] = x_self * zb
    line = {"from": "S", "to": "B", "phases": phases, "length_km": 1.0,
            "r_ohm_per_km": r.tolist(), "x_ohm_per_km": x.tolist()}
    if ampacity_a is not None:
        line["ampacity_a"] = ampacity_a
    return {
        "base": {"power_kw": 1.0, "voltage_v": 240.0},
        "buses": [{"id": "S", "slack": True}, {"id": "B"}],
        "lines": [line],
    }


@pytest.fixture()
def two_bus_net():
    return network.load_network(two_bus_doc())
