"""Synthetic feeder generation and the multi-phase feeder transform.

Random radial feeders back the property suites (oracle self-consistency,
Kron equivalence) and the scalability runs; exact magnitudes are arbitrary
but electrically sane. The multi-phase transform rewires customer laterals
to randomly allocated 1-phase/2-phase service lines, remapping the devices
to the surviving phases.
"""

import copy

import numpy as np

from .phasors import PHASES
from .profiles import RESIDENTIAL_SHAPE, ev_night_shape, pv_shape


def _cable(rng, r_cond, x_self, x_mut, r_earth=0.25, ampacity_a=250.0):
    r_self = r_cond + r_earth
    rs = np.zeros((5, 5))
    xs = np.zeros((5, 5))
    for k in range(3):
        rs[k, k] = r_self
        xs[k, k] = x_self
    rs[3, 3], xs[3, 3] = r_self, x_self
    rs[4, 4], xs[4, 4] = 1.2 * r_self, 1.2 * x_self
    for a in range(3):
        for b in range(a + 1, 3):
            rs[a, b] = rs[b, a] = r_earth
            xs[a, b] = xs[b, a] = x_mut
    for a in range(4):
        for b in range(max(a + 1, 3), 5):
            rs[a, b] = rs[b, a] = 0.5 * r_earth
            xs[a, b] = xs[b, a] = 0.5 * x_mut
    return {"r_ohm_per_km": rs.tolist(), "x_ohm_per_km": xs.tolist(),
            "ampacity_a": ampacity_a, "phases": "abcng"}


def random_feeder(n_buses, seed=0, customer_ratio=0.3, grounding="customer",
                  stress=1.0, horizon=24, pv_share=0.5, ev_share=0.3):
    """Random radial feeder + device documents.

    grounding: "customer" (1 ohm at customer buses), "solid" (perfect ground
    at every bus), or "none".
    """
    rng = np.random.default_rng(seed)
    if n_buses < 2:
        raise ValueError("need at least two buses")
    buses = [{"id": "B0", "slack": True}]
    lines = []
    cables = {"main": _cable(rng, 0.30 * stress, 0.35 * stress, 0.22 * stress),
              "service": _cable(rng, 0.70 * stress, 0.38 * stress,
                                0.22 * stress, ampacity_a=120.0)}
    for k in range(1, n_buses):
        # mostly chain with occasional branching keeps feeders feeder-like
        if k == 1:
            parent = 0
        elif rng.uniform() < 0.75:
            parent = k - 1
        else:
            parent = int(rng.integers(max(0, k - 6), k))
        buses.append({"id": f"B{k}"})
        lines.append({"from": f"B{parent}", "to": f"B{k}",
                      "cable": "main" if rng.uniform() < 0.7 else "service",
                      "length_km": float(rng.uniform(0.03, 0.10))})

    n_cust = max(1, int(round(customer_ratio * (n_buses - 1))))
    cust = sorted(rng.choice(np.arange(1, n_buses), size=n_cust,
                             replace=False).tolist())
    for b in buses[1:]:
        k = int(b["id"][1:])
        if grounding == "solid":
            b["grounding"] = {"r_ohm": 0.0, "x_ohm": 0.0}
        elif grounding == "customer" and k in cust:
            b["grounding"] = {"r_ohm": 1.0, "x_ohm": 0.0}
    if grounding == "solid":
        buses[0]["grounding"] = {"r_ohm": 0.0, "x_ohm": 0.0}

    devices = []
    res = RESIDENTIAL_SHAPE
    pv = pv_shape(horizon) if horizon == 24 else pv_shape(horizon,
                                                          sunrise=horizon // 4,
                                                          sunset=3 * horizon // 4)
    shape = res if horizon == 24 else np.resize(res, horizon)
    for k in cust:
        z = PHASES[int(rng.integers(3))]
        rate = float(rng.uniform(1.0, 3.0))
        zc = rng.dirichlet(np.ones(3))
        zq = rng.dirichlet(np.ones(3))
        devices.append({
            "id": f"fl{k}", "type": "load", "bus": f"B{k}", "phase": z,
            "profile": (rate * shape).tolist(),
            "parts": {"fixed": 0.5, "flex": 0.5},
            "zip": {"az_p": zc[0], "ai_p": zc[1], "ap_p": zc[2],
                    "az_q": zq[0], "ai_q": zq[1], "ap_q": zq[2]},
        })
        if rng.uniform() < pv_share:
            cap = float(rng.uniform(2.0, 5.0))
            devices.append({"id": f"pv{k}", "type": "pv", "bus": f"B{k}",
                            "phase": PHASES[int(rng.integers(3))],
                            "s_gen": (cap * pv).tolist(), "p_rate_kw": cap})
        if rng.uniform() < ev_share:
            rate = float(rng.choice([4.0, 6.0, 8.0]))
            start = int(rng.integers(18, 22))
            prof = rate * ev_night_shape(horizon, start=start, duration=3)
            devices.append({"id": f"ev{k}", "type": "ev", "bus": f"B{k}",
                            "phase": PHASES[int(rng.integers(3))],
                            "p_charge": prof.tolist(), "p_rate_kw": rate,
                            "e_cap_kwh": rate * 3})

    net_doc = {"base": {"power_kw": 1.0, "voltage_v": 240.0},
               "cables": cables, "buses": buses, "lines": lines}
    dev_doc = {"horizon": horizon, "devices": devices}
    return net_doc, dev_doc


def transform_multiphase(net_doc, dev_doc, seed=0):
    """Rewire customer service lines to random 1-phase/2-phase connections.

    Buses hosting two or more devices keep two phases, single-device buses
    get one phase; the trunk stays three-phase. Devices are remapped onto
    the surviving phases of their bus. Neutral and ground conductors are
    kept wherever present.
    """
    rng = np.random.default_rng(seed)
    net = copy.deepcopy(net_doc)
    dev = copy.deepcopy(dev_doc)

    count = {}
    for e in dev["devices"]:
        count[e["bus"]] = count.get(e["bus"], 0) + 1

    downstream = {ln["to"] for ln in net["lines"]}
    upstream = {ln["from"] for ln in net["lines"]}
    leaves = downstream - upstream
    chosen = {}
    for ln in net["lines"]:
        if ln["to"] not in leaves:
            continue
        n_dev = count.get(ln["to"], 0)
        keep = 2 if n_dev >= 2 else 1
        zsel = sorted(rng.choice(3, size=keep, replace=False).tolist())
        phases = "".join(PHASES[k] for k in zsel)
        extra = "".join(f for f in ln.get("phases", "abcng") if f in "ng")
        if not ln.get("phases"):
            extra = "ng"
        ln["phases"] = phases + extra
        chosen[ln["to"]] = phases

    for e in dev["devices"]:
        avail = chosen.get(e["bus"])
        if not avail:
            continue
        if e.get("connection") == "delta" and len(avail) >= 2:
            e["phase"] = avail[:2]
        else:
            e["connection"] = "wye"
            e["phase"] = avail[int(rng.integers(len(avail)))]
    return net, dev
