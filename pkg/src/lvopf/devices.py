"""Residential resources: ZIP flexible loads, PVs, EVs and stand-alone batteries.

Every device is an immutable descriptor plus a pure "block" function that
turns it into bound arrays and local-constraint parameters consumed by the
problem assembly. Power quantities are p.u. (base 1 kW by default), energies
p.u.-hours.
"""

import copy
import json
import math

import numpy as np

from .phasors import PHASES


class DeviceError(ValueError):
    """Raised for malformed device documents or infeasible device data."""


# --- ZIP model ------------------------------------------------------------------


class ZipCoefficients:
    """Constant-impedance / constant-current / constant-power fractions.

    Each active/reactive triple sums to one; all fractions lie in [0, 1].
    """

    def __init__(self, az_p, ai_p, ap_p, az_q=None, ai_q=None, ap_q=None):
        if az_q is None:
            az_q, ai_q, ap_q = az_p, ai_p, ap_p
        self.az_p, self.ai_p, self.ap_p = float(az_p), float(ai_p), float(ap_p)
        self.az_q, self.ai_q, self.ap_q = float(az_q), float(ai_q), float(ap_q)
        for v in (self.az_p, self.ai_p, self.ap_p,
                  self.az_q, self.ai_q, self.ap_q):
            if not -1e-9 <= v <= 1 + 1e-9:
                raise DeviceError(f"ZIP fraction {v} outside [0, 1]")
        if abs(self.az_p + self.ai_p + self.ap_p - 1.0) > 1e-9:
            raise DeviceError("active ZIP fractions must sum to 1")
        if abs(self.az_q + self.ai_q + self.ap_q - 1.0) > 1e-9:
            raise DeviceError("reactive ZIP fractions must sum to 1")

    def p_triple(self):
        return (self.az_p, self.ai_p, self.ap_p)

    def q_triple(self):
        return (self.az_q, self.ai_q, self.ap_q)

    def restricted_to(self, components):
        """Keep only the listed components ('Z','I','P') and renormalize.

        If none of the surviving fractions carry mass, the mass is spread
        evenly over the surviving components.
        """
        keep = set(components)
        if not keep <= {"Z", "I", "P"} or not keep:
            raise DeviceError(f"bad ZIP component set {components!r}")

        def cut(triple):
            z, i, p = triple
            z = z if "Z" in keep else 0.0
            i = i if "I" in keep else 0.0
            p = p if "P" in keep else 0.0
            s = z + i + p
            if s <= 1e-12:
                share = 1.0 / len(keep)
                z = share if "Z" in keep else 0.0
                i = share if "I" in keep else 0.0
                p = share if "P" in keep else 0.0
            else:
                z, i, p = z / s, i / s, p / s
            return z, i, p

        zp, ip_, pp = cut(self.p_triple())
        zq, iq, pq = cut(self.q_triple())
        return ZipCoefficients(zp, ip_, pp, zq, iq, pq)

    def __repr__(self):
        return (f"ZipCoefficients(P={self.p_triple()}, Q={self.q_triple()})")


def zip_active_demand(p0, u, zp):
    """ZIP demand p0 * (aZ u^2 + aI u + aP) at voltage magnitude u."""
    az, ai, ap = zp if isinstance(zp, tuple) else zp.p_triple()
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise DeviceError("ZIP demand needs a positive voltage magnitude")
    return p0 * (az * u ** 2 + ai * u + ap)


def zip_reactive_demand(q0, u, zq):
    az, ai, ap = zq if isinstance(zq, tuple) else zq.q_triple()
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise DeviceError("ZIP demand needs a positive voltage magnitude")
    return q0 * (az * u ** 2 + ai * u + ap)


def nominal_reactive(p0, pf, omega=1):
    """Q0 from P0 through the power factor: P0 |sin(arccos pf)| / pf * omega."""
    if pf <= 0 or pf > 1:
        raise DeviceError(f"power factor {pf} outside (0, 1]")
    return p0 * abs(math.sin(math.acos(pf))) / pf * omega


def power_factor_tangent(pf, omega=1):
    """tan(arccos pf) signed by omega; Q = P * tangent."""
    if pf <= 0 or pf > 1:
        raise DeviceError(f"power factor {pf} outside (0, 1]")
    return math.sqrt(max(0.0, 1.0 - pf * pf)) / pf * omega


def device_current(p, q, u):
    """Injected/drawn current phasor from P, Q at complex device voltage u.

    i_re = (P u_re + Q u_im)/|u|^2, i_im = (P u_im - Q u_re)/|u|^2, which is
    conj((P+jQ)/u); recovering P = u_re i_re + u_im i_im is exact.
    """
    u = complex(u)
    m2 = u.real ** 2 + u.imag ** 2
    if m2 == 0:
        raise DeviceError("degenerate zero voltage in device current")
    return complex((p * u.real + q * u.imag) / m2,
                   (p * u.imag - q * u.real) / m2)


# --- connections -----------------------------------------------------------------


class Connection:
    """Where a device attaches: one phase (wye) or a phase pair (delta).

    Wye devices see phase-to-neutral voltage (phase-to-reference on 3-wire
    models); delta devices see the phase-to-phase difference and their current
    enters both phase balances with opposite signs.
    """

    def __init__(self, bus, phase, kind="wye"):
        self.bus = bus
        self.kind = kind
        if kind == "wye":
            if phase not in PHASES:
                raise DeviceError(f"wye connection needs one of a/b/c, got {phase!r}")
            self.phases = (phase,)
        elif kind == "delta":
            if (len(phase) != 2 or phase[0] not in PHASES
                    or phase[1] not in PHASES or phase[0] == phase[1]):
                raise DeviceError(f"delta connection needs a phase pair, got {phase!r}")
            self.phases = (phase[0], phase[1])
        else:
            raise DeviceError(f"unknown connection kind {kind!r}")

    @property
    def phase(self):
        return self.phases[0]

    def __repr__(self):
        return f"Connection({self.bus!r}, {''.join(self.phases)!r}, {self.kind})"


# --- devices ----------------------------------------------------------------------


class FlexLoad:
    """ZIP load split into fixed / fully-flexible / energy-shiftable /
    time-shiftable parts, all p.u. active power per period."""

    def __init__(self, dev_id, conn, profile_fixed, profile_flex,
                 profile_eshift=None, profile_tshift=None, p_sl=0.0,
                 active_periods=0, m_fl=0.0, pf=0.95, omega=1, zip_coeffs=None):
        self.id = dev_id
        self.conn = conn
        T = len(profile_fixed)
        zeros = np.zeros(T)
        self.profile_fixed = np.asarray(profile_fixed, float)
        self.profile_flex = np.asarray(profile_flex, float)
        self.profile_eshift = np.asarray(profile_eshift, float) if profile_eshift is not None else zeros.copy()
        self.profile_tshift = np.asarray(profile_tshift, float) if profile_tshift is not None else zeros.copy()
        self.p_sl = float(p_sl)
        self.active_periods = int(active_periods)
        self.m_fl = float(m_fl)
        self.pf = float(pf)
        self.omega = int(omega)
        self.zip = zip_coeffs or ZipCoefficients(0.0, 0.0, 1.0)

        for name in ("profile_fixed", "profile_flex", "profile_eshift", "profile_tshift"):
            arr = getattr(self, name)
            if arr.shape != (T,):
                raise DeviceError(f"{name} must have {T} entries")
            if np.any(arr < 0):
                raise DeviceError(f"{name} has negative entries")
        if not 0.0 <= self.m_fl <= 1.0:
            raise DeviceError("m_fl outside [0, 1]")
        if self.p_sl > 0:
            on = self.profile_tshift > 1e-12
            if not np.allclose(self.profile_tshift[on], self.p_sl):
                raise DeviceError("time-shiftable profile must be {0, p_sl}-valued")
            if int(on.sum()) != self.active_periods:
                raise DeviceError("time-shiftable profile must be active for "
                                  f"{self.active_periods} periods, found {int(on.sum())}")

    @property
    def horizon(self):
        return len(self.profile_fixed)

    def nominal_profile(self):
        """Original total P0[t]: sum of the four parts."""
        return (self.profile_fixed + self.profile_flex
                + self.profile_eshift + self.profile_tshift)

    def q_tangent(self):
        return power_factor_tangent(self.pf, self.omega)


class PvUnit:
    def __init__(self, dev_id, conn, s_gen, inverter="one_phase", m_pv=0.0,
                 pf_min=1.0, pf_max=1.0, p_rate=None):
        self.id = dev_id
        self.conn = conn
        self.s_gen = np.asarray(s_gen, float)
        if np.any(self.s_gen < 0):
            raise DeviceError("negative PV generation")
        self.inverter = inverter
        if inverter not in ("one_phase", "three_phase"):
            raise DeviceError(f"unknown inverter mode {inverter!r}")
        self.m_pv = float(m_pv)
        self.pf_min = float(pf_min)
        self.pf_max = float(pf_max)
        self.p_rate = float(p_rate) if p_rate is not None else float(self.s_gen.max())
        if not 0.0 <= self.m_pv <= 1.0:
            raise DeviceError("m_pv outside [0, 1]")
        if not 0.0 < self.pf_min <= self.pf_max <= 1.0:
            raise DeviceError("need 0 < pf_min <= pf_max <= 1")

    @property
    def horizon(self):
        return len(self.s_gen)


class EvUnit:
    def __init__(self, dev_id, conn, p_charge, inverter="one_phase",
                 no_charge_periods=(), p_rate=None, e_cap=None, e_min=0.0,
                 e_0=0.0, eta_c=0.9, eta_d=0.9, xi_v2g=0, pf=1.0, omega=1,
                 reschedule=True):
        self.id = dev_id
        self.conn = conn
        self.p_charge = np.asarray(p_charge, float)
        if np.any(self.p_charge < 0):
            raise DeviceError("negative EV charging profile")
        self.inverter = inverter
        if inverter not in ("one_phase", "three_phase"):
            raise DeviceError(f"unknown inverter mode {inverter!r}")
        self.no_charge_periods = frozenset(int(t) for t in no_charge_periods)
        if any(t < 0 or t >= len(self.p_charge) for t in self.no_charge_periods):
            raise DeviceError("no-charge period outside the horizon")
        if any(self.p_charge[t] > 1e-12 for t in self.no_charge_periods):
            raise DeviceError("original profile charges during a no-charge period")
        self.p_rate = float(p_rate) if p_rate is not None else float(self.p_charge.max())
        self.e_cap = float(e_cap) if e_cap is not None else float(self.p_charge.sum())
        self.e_min = float(e_min)
        self.e_0 = float(e_0)
        self.eta_c = float(eta_c)
        self.eta_d = float(eta_d)
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise DeviceError("efficiencies must lie in (0, 1]")
        self.xi_v2g = int(xi_v2g)
        if not self.e_min <= self.e_0 <= self.e_cap:
            raise DeviceError("need e_min <= e_0 <= e_cap")
        self.pf = float(pf)
        self.omega = int(omega)
        self.reschedule = bool(reschedule)

    @property
    def horizon(self):
        return len(self.p_charge)

    def q_tangent(self):
        return power_factor_tangent(self.pf, self.omega)


class BatteryUnit(EvUnit):
    """Stand-alone battery: an EV with a user-driven discharge profile and
    over/under-discharge rescheduling instead of V2G discharge."""

    def __init__(self, dev_id, conn, p_charge, p_discharge, **kw):
        kw.setdefault("xi_v2g", 1)
        super().__init__(dev_id, conn, p_charge, **kw)
        self.p_discharge = np.asarray(p_discharge, float)
        if self.p_discharge.shape != self.p_charge.shape:
            raise DeviceError("battery charge/discharge profiles differ in length")
        if np.any(self.p_discharge < 0):
            raise DeviceError("negative battery discharge profile")
        if any(self.p_discharge[t] > 1e-12 for t in self.no_charge_periods):
            raise DeviceError("original profile discharges during a no-charge period")


class DeviceSet:
    def __init__(self, loads=(), pvs=(), evs=(), batteries=(), horizon=None):
        self.loads = list(loads)
        self.pvs = list(pvs)
        self.evs = list(evs)
        self.batteries = list(batteries)
        self._horizon = horizon

    def all_devices(self):
        return [*self.loads, *self.pvs, *self.evs, *self.batteries]

    @property
    def horizon(self):
        devs = self.all_devices()
        if devs:
            return devs[0].horizon
        return self._horizon if self._horizon else 24

    def copy(self):
        return copy.deepcopy(self)

    def validate_against(self, net):
        for d in self.all_devices():
            if d.conn.bus not in net.bus_index:
                raise DeviceError(f"device {d.id} references unknown bus {d.conn.bus}")
            bi = net.bus_index[d.conn.bus]
            if net.buses[bi].is_slack:
                raise DeviceError(f"device {d.id} attached to the slack bus")
            have = set(net.buses[bi].phases)
            if not set(d.conn.phases) <= have:
                raise DeviceError(
                    f"device {d.id} needs phases {d.conn.phases} at bus {d.conn.bus}, "
                    f"available {sorted(have)}")
        horizons = {d.horizon for d in self.all_devices()}
        if len(horizons) > 1:
            raise DeviceError(f"mixed device horizons {sorted(horizons)}")

    def total_rating(self):
        tot = 0.0
        for l in self.loads:
            tot += float(l.nominal_profile().max(initial=0.0))
        for p in self.pvs:
            tot += p.p_rate
        for e in [*self.evs, *self.batteries]:
            tot += e.p_rate
        return tot


# --- block emission ----------------------------------------------------------------


class FlexLoadBlock:
    """Bounds and local-constraint data for one flexible load."""

    def __init__(self, load):
        T = load.horizon
        if load.active_periods > T:
            raise DeviceError("time-shiftable block active periods exceed the horizon")
        self.load = load
        self.od1_ub = load.m_fl * load.profile_flex
        self.ud1_ub = load.m_fl * load.profile_flex
        self.has_eshift = bool(np.any(load.profile_eshift > 1e-12)) and load.m_fl > 0
        self.od2_ub = load.m_fl * load.profile_eshift
        self.ud2_ub = load.m_fl * load.profile_eshift
        self.has_tshift = load.p_sl > 0 and load.active_periods > 0
        self.p_sl = load.p_sl
        self.active_periods = load.active_periods
        # base consumption excluding the delta-scheduled block
        self.base = (load.profile_fixed + load.profile_flex + load.profile_eshift)

    def effective_nominal(self, od1=0.0, ud1=0.0, od2=0.0, ud2=0.0, delta=None):
        """Post-decision nominal power feeding the ZIP model."""
        ts = self.p_sl * delta if delta is not None else self.load.profile_tshift
        return self.base + od1 - ud1 + od2 - ud2 + ts


def flex_load_block(load):
    return FlexLoadBlock(load)


class PvBlock:
    def __init__(self, pv):
        self.pv = pv
        self.s_lo = (1.0 - pv.m_pv) * pv.s_gen
        self.s_hi = pv.s_gen.copy()
        self.three_phase = pv.inverter == "three_phase"
        self.pf_min = pv.pf_min
        self.pf_max = pv.pf_max
        self.p_rate = pv.p_rate
        # per-phase injection bounds in balancing mode
        self.inj_lo = -pv.p_rate / 3.0
        self.inj_hi = +pv.p_rate / 3.0


def pv_block(pv):
    if np.any(pv.s_gen < 0):
        raise DeviceError("negative PV generation")
    return PvBlock(pv)


class EvBlock:
    def __init__(self, ev, discharge_profile=None):
        T = ev.horizon
        self.ev = ev
        self.is_battery = discharge_profile is not None
        self.nc_mask = np.zeros(T, bool)
        for t in ev.no_charge_periods:
            self.nc_mask[t] = True
        self.three_phase = ev.inverter == "three_phase"
        xi = ev.xi_v2g
        if self.three_phase:
            self.dem_lo = np.full(T, -ev.p_rate / 3.0)
            self.dem_hi = np.full(T, +ev.p_rate / 3.0)
        else:
            self.dem_lo = np.full(T, -ev.p_rate * xi)
            self.dem_hi = np.full(T, +ev.p_rate)
        self.dem_lo[self.nc_mask] = 0.0
        self.dem_hi[self.nc_mask] = 0.0
        if not ev.reschedule:
            self.oc_ub = np.zeros(T)
            self.uc_ub = np.zeros(T)
            self.ds_ub = np.zeros(T)
        else:
            self.oc_ub = np.where(self.nc_mask, 0.0, ev.p_rate)
            self.uc_ub = np.where(self.nc_mask, 0.0, ev.p_rate)
            self.ds_ub = np.where(self.nc_mask, 0.0, ev.p_rate * xi)
        if self.is_battery:
            self.p_dis = np.asarray(discharge_profile, float)
            self.uc_ub = np.minimum(self.uc_ub, ev.p_charge)
            if ev.reschedule:
                self.ods_ub = np.where(self.nc_mask, 0.0, ev.p_rate)
                self.uds_ub = np.minimum(np.where(self.nc_mask, 0.0, ev.p_rate),
                                         self.p_dis)
            else:
                self.ods_ub = np.zeros(T)
                self.uds_ub = np.zeros(T)
            base_rate = ev.p_charge * ev.eta_c - self.p_dis / ev.eta_d
        else:
            self.p_dis = None
            base_rate = ev.p_charge * ev.eta_c
        # cumulative stored-energy window (paper-form, deviation-relative)
        self.base_cum = np.cumsum(base_rate)
        self.e_lo = ev.e_min
        self.e_hi = ev.e_cap - ev.xi_v2g * ev.e_0
        if ev.reschedule:
            cap = float(np.sum(np.where(self.nc_mask, 0.0, ev.p_rate)))
            if cap + 1e-12 < float(ev.p_charge.sum()):
                raise DeviceError(
                    f"EV {ev.id}: available charging capacity {cap:.3f} cannot "
                    f"deliver the required energy {float(ev.p_charge.sum()):.3f}")

    def neutrality_residual(self, oc, uc, ds=0.0, ods=None, uds=None):
        """Horizon-end energy deviation M that the block constrains to zero."""
        ev = self.ev
        if self.is_battery:
            dev = np.asarray(ods, float) - np.asarray(uds, float)
            return float(np.sum(ev.eta_c * (np.asarray(oc) - np.asarray(uc))
                                - dev / ev.eta_d))
        return float(np.sum(ev.eta_c * (np.asarray(oc) - np.asarray(uc))
                            - ev.xi_v2g * np.asarray(ds) / ev.eta_d))


def ev_block(ev):
    return EvBlock(ev)


def battery_block(b):
    return EvBlock(b, discharge_profile=b.p_discharge)


def collapse_to_single_phase(devs):
    """Move every device onto phase a (wye) for the balanced 1-phase model;
    three-phase balancing inverters degenerate to plain single-phase units."""
    out = devs.copy()
    for d in out.all_devices():
        d.conn = Connection(d.conn.bus, "a", kind="wye")
        if getattr(d, "inverter", None) == "three_phase":
            d.inverter = "one_phase"
    return out


# --- document ingestion --------------------------------------------------------------


def _profile(entry, key, columns, T, scale):
    if key in entry:
        arr = np.asarray(entry[key], float)
    elif entry.get(f"{key}_col"):
        name = entry[f"{key}_col"]
        if columns is None or name not in columns:
            raise DeviceError(f"profile column {name!r} not found")
        arr = np.asarray(columns[name], float)
    else:
        return None
    if arr.shape != (T,):
        raise DeviceError(f"profile {key} must have {T} entries")
    return arr * scale


def load_devices(source, profile_columns=None, base_power_kw=1.0, horizon=24):
    """Parse a device document (path, JSON string or dict) into a DeviceSet.

    Profiles are given in kW (columns of `profile_columns` or inline arrays)
    and converted to p.u. here; energies in kWh become p.u.-hours.
    """
    if isinstance(source, dict):
        doc = source
    else:
        try:
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        except (OSError, TypeError):
            text = source
        doc = json.loads(text)

    scale = 1.0 / base_power_kw
    T = int(doc.get("horizon", horizon))
    loads, pvs, evs, batteries = [], [], [], []

    for k, e in enumerate(doc.get("devices", [])):
        kind = e.get("type")
        dev_id = e.get("id", f"{kind}{k}")
        conn = Connection(e["bus"], e["phase"],
                          kind=e.get("connection", "wye"))
        if kind == "load":
            total = _profile(e, "profile", profile_columns, T, scale)
            parts = {}
            for part in ("fixed", "flex", "eshift", "tshift"):
                arr = _profile(e, f"profile_{part}", profile_columns, T, scale)
                if arr is not None:
                    parts[part] = arr
            if total is not None:
                fr = e.get("parts", {"fixed": 0.0, "flex": 1.0})
                parts.setdefault("fixed", total * float(fr.get("fixed", 0.0)))
                parts.setdefault("flex", total * float(fr.get("flex", 0.0)))
                parts.setdefault("eshift", total * float(fr.get("eshift", 0.0)))
                parts.setdefault("tshift", total * float(fr.get("tshift", 0.0)))
            if "fixed" not in parts and "flex" not in parts:
                raise DeviceError(f"load {dev_id} has no profile data")
            z = e.get("zip")
            zc = ZipCoefficients(**z) if z else None
            loads.append(FlexLoad(
                dev_id, conn,
                parts.get("fixed", np.zeros(T)), parts.get("flex", np.zeros(T)),
                parts.get("eshift"), parts.get("tshift"),
                p_sl=float(e.get("p_sl_kw", 0.0)) * scale,
                active_periods=int(e.get("active_periods", 0)),
                m_fl=float(e.get("m_fl", 0.0)),
                pf=float(e.get("pf", 0.95)), omega=int(e.get("omega", 1)),
                zip_coeffs=zc))
        elif kind == "pv":
            s_gen = _profile(e, "s_gen", profile_columns, T, scale)
            if s_gen is None:
                raise DeviceError(f"pv {dev_id} has no generation profile")
            pvs.append(PvUnit(
                dev_id, conn, s_gen, inverter=e.get("inverter", "one_phase"),
                m_pv=float(e.get("m_pv", 0.0)),
                pf_min=float(e.get("pf_min", 1.0)),
                pf_max=float(e.get("pf_max", 1.0)),
                p_rate=float(e["p_rate_kw"]) * scale if "p_rate_kw" in e else None))
        elif kind in ("ev", "battery"):
            p_c = _profile(e, "p_charge", profile_columns, T, scale)
            if p_c is None:
                raise DeviceError(f"{kind} {dev_id} has no charging profile")
            kw = dict(
                inverter=e.get("inverter", "one_phase"),
                no_charge_periods=e.get("no_charge_periods", ()),
                p_rate=float(e["p_rate_kw"]) * scale if "p_rate_kw" in e else None,
                e_cap=float(e["e_cap_kwh"]) * scale if "e_cap_kwh" in e else None,
                e_min=float(e.get("e_min_kwh", 0.0)) * scale,
                e_0=float(e.get("e_0_kwh", 0.0)) * scale,
                eta_c=float(e.get("eta_c", 0.9)), eta_d=float(e.get("eta_d", 0.9)),
                pf=float(e.get("pf", 1.0)), omega=int(e.get("omega", 1)))
            if kind == "ev":
                evs.append(EvUnit(dev_id, conn, p_c,
                                  xi_v2g=int(e.get("xi_v2g", 0)), **kw))
            else:
                p_d = _profile(e, "p_discharge", profile_columns, T, scale)
                if p_d is None:
                    raise DeviceError(f"battery {dev_id} has no discharge profile")
                batteries.append(BatteryUnit(dev_id, conn, p_c, p_d, **kw))
        else:
            raise DeviceError(f"unknown device type {kind!r}")

    return DeviceSet(loads, pvs, evs, batteries, horizon=T)
