"""Scenario machinery: load models L1-L7, controllability S1-S8, prices.

A scenario selects how much of each flexibility resource the operator may
touch and which ZIP components the load model keeps. Applying a scenario
returns transformed device sets; the network variant N1-N5 is handled by
:func:`lvopf.network.apply_variant`.
"""

import copy

import numpy as np

from .devices import BatteryUnit

# which ZIP components each load-model version keeps
LOAD_MODELS = {
    "L1": ("Z", "I", "P"),
    "L2": ("Z", "I"),
    "L3": ("Z", "P"),
    "L4": ("I", "P"),
    "L5": ("Z",),
    "L6": ("I",),
    "L7": ("P",),
}

# controllability: max PV curtailment, PV pf floor, max FL alteration,
# EV rescheduling, and the EV no-charge window (1-based inclusive periods)
CONTROLLABILITY = {
    "S1": dict(m_pv=0.0, pf_min=1.0, m_fl=0.0, ev_reschedule=False, t_nc=None),
    "S2": dict(m_pv=0.0, pf_min=0.9, m_fl=0.0, ev_reschedule=False, t_nc=None),
    "S3": dict(m_pv=0.0, pf_min=0.8, m_fl=0.0, ev_reschedule=False, t_nc=None),
    "S4": dict(m_pv=0.2, pf_min=0.7, m_fl=0.0, ev_reschedule=False, t_nc=None),
    "S5": dict(m_pv=0.2, pf_min=0.7, m_fl=0.1, ev_reschedule=False, t_nc=None),
    "S6": dict(m_pv=0.2, pf_min=0.7, m_fl=0.3, ev_reschedule=False, t_nc=None),
    "S7": dict(m_pv=0.2, pf_min=0.7, m_fl=0.3, ev_reschedule=True, t_nc=(4, 17)),
    "S8": dict(m_pv=0.2, pf_min=0.7, m_fl=0.3, ev_reschedule=True, t_nc=(8, 15)),
}


class CostTable:
    """Prices in EUR/kWh (EUR/p.u. for violation slacks), priority-ordered.

    Defaults follow the reference priority order: reactive support cheapest,
    then import/export, load alteration, EV rescheduling, PV curtailment,
    limit violations most expensive. `c_ds` (V2G discharge) has no published
    value; the default sits above EV rescheduling. `c_q_exchange` is a tiny
    anti-degeneracy price on reactive import/export, which is otherwise free.
    """

    FIELDS = ("c_ie", "c_ppv", "c_qpv", "c_fl", "c_ev", "c_ds", "c_v")

    def __init__(self, c_ie=1.0, c_ppv=10.0, c_qpv=0.5, c_fl=1.5, c_ev=4.5,
                 c_ds=10.0, c_v=30.0, c_export=None, c_q_exchange=None):
        self.c_ie = float(c_ie)
        self.c_ppv = float(c_ppv)
        self.c_qpv = float(c_qpv)
        self.c_fl = float(c_fl)
        self.c_ev = float(c_ev)
        self.c_ds = float(c_ds)
        self.c_v = float(c_v)
        self.c_export = float(c_export) if c_export is not None else self.c_ie
        self.c_q_exchange = (float(c_q_exchange) if c_q_exchange is not None
                             else 1e-4 * max(self.c_ie, 1.0))
        if any(getattr(self, f) < 0 for f in self.FIELDS):
            raise ValueError("costs must be nonnegative")

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return CostTable(**d)

    def scaled_ie(self, factor):
        return self.replace(c_ie=self.c_ie * factor,
                            c_export=self.c_export * factor)

    def to_dict(self):
        return {"c_ie": self.c_ie, "c_ppv": self.c_ppv, "c_qpv": self.c_qpv,
                "c_fl": self.c_fl, "c_ev": self.c_ev, "c_ds": self.c_ds,
                "c_v": self.c_v, "c_export": self.c_export,
                "c_q_exchange": self.c_q_exchange}


class ScenarioConfig:
    """Selects the full experimental setup for one run family."""

    def __init__(self, load_model="L1", network_model="N1", controllability="S5",
                 inverter_mode="1ph", connection_override=None,
                 monte_carlo=None, cost_overrides=None, voltage_band=(0.9, 1.1),
                 rotated_frame=True, ie_price_factor=1.0, ev_overrides=None):
        if load_model not in LOAD_MODELS:
            raise ValueError(f"unknown load model {load_model!r}")
        if network_model not in ("N1", "N2", "N3", "N4", "N5"):
            raise ValueError(f"unknown network model {network_model!r}")
        if controllability not in CONTROLLABILITY:
            raise ValueError(f"unknown controllability scenario {controllability!r}")
        if inverter_mode not in ("1ph", "3ph"):
            raise ValueError(f"unknown inverter mode {inverter_mode!r}")
        if connection_override not in (None, "wye", "delta", "mixed"):
            raise ValueError(f"unknown connection override {connection_override!r}")
        self.load_model = load_model
        self.network_model = network_model
        self.controllability = controllability
        self.inverter_mode = inverter_mode
        self.connection_override = connection_override
        mc = monte_carlo or {}
        self.mc_runs = int(mc.get("runs", 1))
        self.mc_perturbation = float(mc.get("perturbation", 0.0))
        self.mc_seed = int(mc.get("seed", 0))
        if self.mc_runs < 1:
            raise ValueError("monte carlo needs at least one run")
        if not 0.0 <= self.mc_perturbation <= 0.5:
            raise ValueError("perturbation outside [0, 0.5]")
        self.cost_overrides = dict(cost_overrides or {})
        self.voltage_band = tuple(voltage_band)
        self.rotated_frame = bool(rotated_frame)
        self.ie_price_factor = float(ie_price_factor)
        self.ev_overrides = dict(ev_overrides) if ev_overrides else None

    def costs(self):
        table = CostTable(**{k: v for k, v in self.cost_overrides.items()})
        if self.ie_price_factor != 1.0:
            table = table.scaled_ie(self.ie_price_factor)
        return table

    def effective_voltage_band(self):
        """S7/S8 under 3-phase inverters tighten the floor to 0.95 p.u."""
        vmin, vmax = self.voltage_band
        if (self.inverter_mode == "3ph"
                and self.controllability in ("S7", "S8")
                and "voltage_band" not in self.cost_overrides):
            vmin = max(vmin, 0.95)
        return vmin, vmax

    def to_dict(self):
        return {
            "load_model": self.load_model,
            "network_model": self.network_model,
            "controllability": self.controllability,
            "inverter_mode": self.inverter_mode,
            "connection_override": self.connection_override,
            "monte_carlo": {"runs": self.mc_runs,
                            "perturbation": self.mc_perturbation,
                            "seed": self.mc_seed},
            "cost_overrides": self.cost_overrides,
            "voltage_band": list(self.voltage_band),
            "rotated_frame": self.rotated_frame,
            "ie_price_factor": self.ie_price_factor,
            "ev_overrides": self.ev_overrides,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def t_nc_periods(spec, horizon):
    """Expand a (first, last) 1-based inclusive window into 0-based indices."""
    if spec is None:
        return frozenset()
    first, last = spec
    return frozenset(range(first - 1, last))


def apply_load_model(devices, load_model):
    """Restrict every load's ZIP coefficients to the model's components."""
    components = LOAD_MODELS[load_model]
    out = devices.copy()
    for load in out.loads:
        load.zip = load.zip.restricted_to(components)
    return out


def apply_controllability(devices, scenario, inverter_mode="1ph",
                          ev_overrides=None):
    """Overwrite device flexibility parameters per the controllability table;
    `ev_overrides` (reschedule / t_nc_clear / xi_v2g) trumps the table for
    specialised studies such as the V2G comparison."""
    s = CONTROLLABILITY[scenario]
    out = devices.copy()
    mode = "three_phase" if inverter_mode == "3ph" else "one_phase"
    for load in out.loads:
        load.m_fl = s["m_fl"]
    for pv in out.pvs:
        pv.m_pv = s["m_pv"]
        pv.pf_min = 1.0 if inverter_mode == "3ph" else s["pf_min"]
        pv.pf_max = 1.0 if inverter_mode == "3ph" else max(pv.pf_max, s["pf_min"])
        pv.inverter = mode
    ov = ev_overrides or {}
    for ev in [*out.evs, *out.batteries]:
        ev.reschedule = bool(ov.get("reschedule", s["ev_reschedule"]))
        ev.inverter = mode
        window = t_nc_periods(s["t_nc"], ev.horizon)
        if window:
            keep = frozenset(t for t in window if ev.p_charge[t] <= 1e-12)
            ev.no_charge_periods = keep | ev.no_charge_periods
            # the original profile must stay feasible: periods where the
            # customer scheduled charging are never blocked
        if ov.get("t_nc_clear"):
            ev.no_charge_periods = frozenset()
        if "xi_v2g" in ov and not isinstance(ev, BatteryUnit):
            ev.xi_v2g = int(ov["xi_v2g"])
    return out


def apply_scenario(devices, config):
    """Load model + controllability in one step (network variant separate)."""
    out = apply_load_model(devices, config.load_model)
    out = apply_controllability(out, config.controllability,
                                config.inverter_mode,
                                getattr(config, "ev_overrides", None))
    return out


def perturb_profiles(devices, rng, fraction):
    """Scale every load and PV profile by an independent uniform factor in
    [1-fraction, 1+fraction]; draw order is fixed by device order."""
    out = devices.copy()
    if fraction == 0.0:
        # keep the stream aligned so runs with p=0 stay comparable
        for _ in out.loads + out.pvs:
            rng.uniform()
        return out
    for load in out.loads:
        f = rng.uniform(1.0 - fraction, 1.0 + fraction)
        load.profile_fixed = load.profile_fixed * f
        load.profile_flex = load.profile_flex * f
        load.profile_eshift = load.profile_eshift * f
        # the time-shiftable block power is a device property, not scaled
    for pv in out.pvs:
        f = rng.uniform(1.0 - fraction, 1.0 + fraction)
        pv.s_gen = pv.s_gen * f
    return out
