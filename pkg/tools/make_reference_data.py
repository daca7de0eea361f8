"""Generate the bundled reference feeder documents (run from repo root).

Topology and lengths follow the public CIGRE European LV residential
benchmark (18 nodes, trunk R1..R10, laterals to R11/R15/R16/R17/R18).
Cable impedances are representative and tuned so the unoptimized feeder is
stressed by phase imbalance at the evening peak. Neutral/ground rows follow
the synthesis rules documented in the README (neutral self = phase self,
ground self = 1.2x, phase-neutral mutual = 0.5x phase-phase mutual).
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lvopf.profiles import (RESIDENTIAL_SHAPE, pv_shape, ev_night_shape,
                            write_profile_table)

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "lvopf", "data")


def cable(r_cond, r_earth, x_self, x_mut, ampacity_a):
    """5x5 ohm/km matrices, Carson-style: every self entry carries the
    conductor resistance plus the earth-return correction, phase-phase
    mutuals carry the earth correction; neutral rows follow the synthesis
    rules (neutral self = phase self, ground self 1.2x, phase-neutral and
    phase-ground mutual = 0.5x phase-phase mutual)."""
    r_self = r_cond + r_earth
    r_mut = r_earth
    rs = np.zeros((5, 5))
    xs = np.zeros((5, 5))
    for k in range(3):
        rs[k, k] = r_self
        xs[k, k] = x_self
    rs[3, 3] = r_self            # neutral self = phase self
    xs[3, 3] = x_self
    rs[4, 4] = 1.2 * r_self      # ground (earth return) self
    xs[4, 4] = 1.2 * x_self
    for a in range(3):
        for b in range(a + 1, 3):
            rs[a, b] = rs[b, a] = r_mut
            xs[a, b] = xs[b, a] = x_mut
    for a in range(3):           # phase-neutral and phase-ground coupling
        rs[a, 3] = rs[3, a] = 0.5 * r_mut
        xs[a, 3] = xs[3, a] = 0.5 * x_mut
        rs[a, 4] = rs[4, a] = 0.5 * r_mut
        xs[a, 4] = xs[4, a] = 0.5 * x_mut
    rs[3, 4] = rs[4, 3] = 0.5 * r_mut
    xs[3, 4] = xs[4, 3] = 0.5 * x_mut
    return {"r_ohm_per_km": rs.tolist(), "x_ohm_per_km": xs.tolist(),
            "ampacity_a": ampacity_a, "phases": "abcng"}


def main():
    trunk = [("R1", "R2"), ("R2", "R3"), ("R3", "R4"), ("R4", "R5"),
             ("R5", "R6"), ("R6", "R7"), ("R7", "R8"), ("R8", "R9"),
             ("R9", "R10")]
    laterals = [("R3", "R11"), ("R4", "R12"), ("R12", "R13"), ("R13", "R14"),
                ("R14", "R15"), ("R6", "R16"), ("R9", "R17"), ("R10", "R18")]
    customers = ["R11", "R15", "R16", "R17", "R18"]

    buses = []
    for k in range(1, 19):
        b = {"id": f"R{k}"}
        if k == 1:
            b["slack"] = True
        if f"R{k}" in customers:
            b["grounding"] = {"r_ohm": 1.0, "x_ohm": 0.0}
        buses.append(b)

    trunk_km = float(os.environ.get("TRUNK_KM", "0.16"))
    lat_km = float(os.environ.get("LAT_KM", "0.12"))
    lines = []
    for f, t in trunk:
        lines.append({"from": f, "to": t, "cable": "trunk", "length_km": trunk_km})
    for f, t in laterals:
        lines.append({"from": f, "to": t, "cable": "lateral", "length_km": lat_km})

    net_doc = {
        "base": {"power_kw": 1.0, "voltage_v": 240.0},
        "cables": {
            "trunk": cable(0.30, 0.28, 0.36, 0.24, 200.0),
            "lateral": cable(0.65, 0.28, 0.38, 0.24, 120.0),
        },
        "buses": buses,
        "lines": lines,
    }

    res = RESIDENTIAL_SHAPE
    pv = pv_shape()
    cols = {
        "fl11": (1.5 * res), "fl15": (2.0 * res), "fl16": (2.5 * res),
        "fl17": (1.5 * res), "fl18": (2.0 * res),
        "pv15": (4.0 * pv), "pv16": (4.0 * pv), "pv17": (5.0 * pv),
        "ev11": (8.0 * ev_night_shape(start=19)),
        "ev15": (8.0 * ev_night_shape(start=20)),
        "ev17": (10.0 * ev_night_shape(start=21)),
    }
    write_profile_table(os.path.join(OUT, "profiles.csv"), cols)

    def zipc(azp, aip, app, azq, aiq, apq):
        return {"az_p": azp, "ai_p": aip, "ap_p": app,
                "az_q": azq, "ai_q": aiq, "ap_q": apq}

    dev_doc = {
        "horizon": 24,
        "profiles_csv": "profiles.csv",
        "devices": [
            {"id": "ev11", "type": "ev", "bus": "R11", "phase": "a",
             "p_charge_col": "ev11", "p_rate_kw": 8, "e_cap_kwh": 24},
            {"id": "fl11", "type": "load", "bus": "R11", "phase": "a",
             "profile_col": "fl11", "parts": {"fixed": 0.5, "flex": 0.5},
             "zip": zipc(0.2, 0.2, 0.6, 0.1, 0.1, 0.8)},
            {"id": "ev15", "type": "ev", "bus": "R15", "phase": "b",
             "p_charge_col": "ev15", "p_rate_kw": 8, "e_cap_kwh": 24},
            {"id": "fl15", "type": "load", "bus": "R15", "phase": "b",
             "profile_col": "fl15", "parts": {"fixed": 0.5, "flex": 0.5},
             "zip": zipc(0.6, 0.1, 0.3, 0.3, 0.2, 0.5)},
            {"id": "pv15", "type": "pv", "bus": "R15", "phase": "a",
             "s_gen_col": "pv15", "p_rate_kw": 4},
            {"id": "fl16", "type": "load", "bus": "R16", "phase": "c",
             "profile_col": "fl16", "parts": {"fixed": 0.5, "flex": 0.5},
             "zip": zipc(0.05, 0.15, 0.8, 0.3, 0.1, 0.6)},
            {"id": "pv16", "type": "pv", "bus": "R16", "phase": "b",
             "s_gen_col": "pv16", "p_rate_kw": 4},
            {"id": "ev17", "type": "ev", "bus": "R17", "phase": "c",
             "p_charge_col": "ev17", "p_rate_kw": 10, "e_cap_kwh": 30},
            {"id": "fl17", "type": "load", "bus": "R17", "phase": "a",
             "profile_col": "fl17", "parts": {"fixed": 0.5, "flex": 0.5},
             "zip": zipc(0.3, 0.4, 0.3, 0.5, 0.1, 0.4)},
            {"id": "pv17", "type": "pv", "bus": "R17", "phase": "c",
             "s_gen_col": "pv17", "p_rate_kw": 5},
            {"id": "fl18", "type": "load", "bus": "R18", "phase": "b",
             "profile_col": "fl18", "parts": {"fixed": 0.5, "flex": 0.5},
             "zip": zipc(0.05, 0.25, 0.7, 0.01, 0.8, 0.19)},
        ],
    }

    with open(os.path.join(OUT, "cigre_lv_network.json"), "w") as fh:
        json.dump(net_doc, fh, indent=1)
    with open(os.path.join(OUT, "cigre_devices.json"), "w") as fh:
        json.dump(dev_doc, fh, indent=1)
    print("wrote", OUT)


if __name__ == "__main__":
    main()
