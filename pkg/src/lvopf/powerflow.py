"""Independent unbalanced multi-conductor power-flow oracle.

Given fixed device set-points it computes all complex voltages and currents
by a backward/forward sweep over the full conductor set: the backward pass
accumulates branch currents from ZIP-dependent device currents, the
neutral/ground subsystem is solved exactly as a small linear ladder (the
generalized current divider, recomputed every backward pass), and the forward
pass applies the voltage drops with full mutual coupling. A Newton fallback
on the complete circuit equations covers stiff grounding cases.

This module never imports the OPF model or the solver: it is the oracle they
are validated against.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .phasors import CONDUCTORS, PHASES, ref_rotor
from .network import COND_POS
from . import devices as dv


class PowerFlowError(RuntimeError):
    pass


class Injection:
    """One fixed device seen by the oracle: ZIP powers at a connection."""

    def __init__(self, bus_i, nodes, p0, q0, zip_p=(0.0, 0.0, 1.0),
                 zip_q=(0.0, 0.0, 1.0), label=""):
        self.bus_i = int(bus_i)
        self.nodes = tuple(nodes)      # ("a",) wye or ("a","b") delta
        self.p0 = np.asarray(p0, float)
        self.q0 = np.asarray(q0, float)
        self.zip_p = tuple(zip_p)
        self.zip_q = tuple(zip_q)
        self.label = label

    def voltage(self, u_bus, has_neutral):
        if len(self.nodes) == 2:
            return (u_bus[COND_POS[self.nodes[0]]]
                    - u_bus[COND_POS[self.nodes[1]]])
        u = u_bus[COND_POS[self.nodes[0]]]
        if has_neutral:
            u = u - u_bus[COND_POS["n"]]
        return u

    def power(self, vmag, t):
        p = dv.zip_active_demand(self.p0[t], vmag, self.zip_p)
        q = dv.zip_reactive_demand(self.q0[t], vmag, self.zip_q)
        return p, q

    def current(self, u_dev, t):
        """Drawn current phasor (positive current into the device)."""
        m = abs(u_dev)
        if m <= 1e-9:
            raise PowerFlowError(f"zero voltage magnitude at injection {self.label}")
        p, q = self.power(m, t)
        return dv.device_current(p, q, u_dev)


def injections_from_devices(devs, controls=None):
    """Translate a DeviceSet (plus optional OPF controls) into oracle injections.

    Without controls, devices run their original profiles: loads at nominal
    power, PVs injecting all generation at unity power factor, EVs following
    the customer charging plan, batteries following charge minus discharge.
    Controls is a dict {device_id: {...}} carrying per-period set-points
    ("p0_eff" for loads, "p_inj"/"q_pv" for PVs, "p_dem" for EVs/batteries;
    three-phase set-points are (3, T) arrays over phases a, b, c).
    """
    controls = controls or {}
    out = []

    def bus_of(d):
        return d.conn.bus

    for load in devs.loads:
        c = controls.get(load.id)
        p0 = c["p0_eff"] if c else load.nominal_profile()
        q0 = np.asarray(p0) * load.q_tangent()
        out.append(Injection(-1, load.conn.phases, p0, q0,
                             load.zip.p_triple(), load.zip.q_triple(),
                             label=load.id))
        out[-1].bus_name = bus_of(load)
    for pv in devs.pvs:
        c = controls.get(pv.id)
        if c is None:
            p = pv.s_gen.copy()
            q = np.zeros_like(p)
            per_phase = None
        else:
            p, q = np.asarray(c["p_inj"], float), np.asarray(c["q_pv"], float)
            per_phase = p.ndim == 2
        if per_phase:
            for k, z in enumerate(PHASES):
                inj = Injection(-1, (z,), -p[k], -q[k], label=f"{pv.id}:{z}")
                inj.bus_name = bus_of(pv)
                out.append(inj)
        else:
            inj = Injection(-1, pv.conn.phases, -p, -q, label=pv.id)
            inj.bus_name = bus_of(pv)
            out.append(inj)
    for ev in [*devs.evs, *devs.batteries]:
        c = controls.get(ev.id)
        if c is None:
            p = ev.p_charge.copy()
            if isinstance(ev, dv.BatteryUnit):
                p = p - ev.p_discharge
        else:
            p = np.asarray(c["p_dem"], float)
        tan = ev.q_tangent()
        if p.ndim == 2:
            for k, z in enumerate(PHASES):
                inj = Injection(-1, (z,), p[k], p[k] * tan, label=f"{ev.id}:{z}")
                inj.bus_name = bus_of(ev)
                out.append(inj)
        else:
            inj = Injection(-1, ev.conn.phases, p, p * tan, label=ev.id)
            inj.bus_name = bus_of(ev)
            out.append(inj)
    return out


def _resolve_buses(net, injections):
    for inj in injections:
        if inj.bus_i < 0:
            inj.bus_i = net.bus_index[inj.bus_name]
    return injections


class PowerFlowState:
    """Converged voltages/currents for every period, true (unrotated) frame."""

    def __init__(self, net, T):
        nb, nl = net.n_buses(), net.n_lines()
        self.u = np.zeros((nb, 5, T), complex)
        self.i_line = np.zeros((nl, 5, T), complex)
        self.i_ground = np.zeros((nb, T), complex)   # neutral->ground/clamp current
        self.converged = False
        self.iterations = 0
        self.max_mismatch = np.inf
        self.used_newton = False

    def voltage(self, bus_i, phase, t=None):
        row = self.u[bus_i, COND_POS[phase]]
        return row if t is None else row[t]


def nominal_voltages(net):
    """Flat-start complex voltages: reference rotors on phases, 0 on n/g."""
    u = np.zeros((net.n_buses(), 5), complex)
    for b, bus in enumerate(net.buses):
        for f in bus.phases:
            if f in PHASES:
                u[b, COND_POS[f]] = ref_rotor(f)
    return u


def _device_draws(net, injections, u, t):
    """Per-bus, per-conductor drawn current; plus neutral-node returns."""
    draws = np.zeros((net.n_buses(), 5), complex)
    returns = np.zeros(net.n_buses(), complex)
    has_n = net.has_neutral
    for inj in injections:
        i_dev = inj.current(inj.voltage(u[inj.bus_i], has_n), t)
        if len(inj.nodes) == 2:
            draws[inj.bus_i, COND_POS[inj.nodes[0]]] += i_dev
            draws[inj.bus_i, COND_POS[inj.nodes[1]]] -= i_dev
        else:
            draws[inj.bus_i, COND_POS[inj.nodes[0]]] += i_dev
            if has_n:
                returns[inj.bus_i] += i_dev
    return draws, returns


def _backward_phase_currents(net, draws):
    i_line = np.zeros((net.n_lines(), 5), complex)
    acc = draws.copy()
    for b in reversed(net.topo_order):
        li = net.parent_line[b]
        if li < 0:
            continue
        ln = net.lines[li]
        for f in ln.phases:
            if f in PHASES:
                i_line[li, COND_POS[f]] = acc[b, COND_POS[f]]
        acc[ln.from_i] += acc[b]
    return i_line


def _solve_return_ladder(net, i_line, returns):
    """Exact linear solve of the neutral/ground subsystem for one period.

    Unknowns: u_n, u_g per bus and i_n, i_g per line (complex). Clamped buses
    (slack and solid grounds) have their node voltages pinned to 0 and their
    KCL rows dropped; resistive groundings couple n and g through the
    admittance. Returns (u_e[bus, {n,g}], i_e[line, {n,g}], i_gr[bus]).
    """
    conds = [f for f in ("n", "g") if f in net.conductors]
    nc = len(conds)
    nb, nl = net.n_buses(), net.n_lines()
    nu = nb * nc
    unknowns = nu + nl * nc
    A = sp.lil_matrix((unknowns, unknowns), dtype=complex)
    rhs = np.zeros(unknowns, complex)
    clamped = net.clamped_buses()

    def uvar(b, k):
        return b * nc + k

    def ivar(l, k):
        return nu + l * nc + k

    row = 0
    rows = []
    # line drop equations for the return conductors
    for li, ln in enumerate(net.lines):
        Z = ln.impedance()
        for k, f in enumerate(conds):
            if f not in ln.phases:
                # absent conductor: force zero current
                A[row, ivar(li, k)] = 1.0
                rows.append(row); row += 1
                continue
            fi = COND_POS[f]
            A[row, uvar(ln.from_i, k)] = 1.0
            A[row, uvar(ln.to_i, k)] = -1.0
            for k2, f2 in enumerate(conds):
                if f2 in ln.phases:
                    A[row, ivar(li, k2)] = -Z[fi, COND_POS[f2]]
            emf = 0.0 + 0.0j
            for z in PHASES:
                if z in ln.phases:
                    emf += Z[fi, COND_POS[z]] * i_line[li, COND_POS[z]]
            rhs[row] = emf
            rows.append(row); row += 1
    # bus equations
    for b in range(nb):
        bus = net.buses[b]
        for k, f in enumerate(conds):
            if f not in bus.phases:
                A[row, uvar(b, k)] = 1.0
                rows.append(row); row += 1
                continue
            if b in clamped:
                A[row, uvar(b, k)] = 1.0   # pinned to the reference
                rows.append(row); row += 1
                continue
            # KCL: parent inflow - child outflow + device returns - grounding
            li = net.parent_line[b]
            if li >= 0 and f in net.lines[li].phases:
                A[row, ivar(li, k)] = 1.0
            for ch in net.children[b]:
                if f in net.lines[ch].phases:
                    A[row, ivar(ch, k)] += -1.0
            sign = -1.0 if f == "n" else +1.0   # grounding current n -> g
            if bus.grounding is not None and not bus.grounding.solid:
                y = bus.grounding.admittance()
                A[row, uvar(b, 0)] += sign * y
                if nc == 2:                       # n -> g conductor
                    A[row, uvar(b, 1)] += -sign * y
                # without a ground conductor the grounding connects n to the
                # zero reference and only the n term remains
            if f == "n":
                rhs[row] = -returns[b]
            rows.append(row); row += 1

    sol = spla.spsolve(A.tocsr(), rhs)
    u_e = sol[:nu].reshape(nb, nc)
    i_e = sol[nu:].reshape(nl, nc)

    # grounding / clamp currents for reporting: KCL residual at each bus's
    # neutral node equals the current delivered into the ground connection
    i_gr = np.zeros(nb, complex)
    for b in range(nb):
        bus = net.buses[b]
        if "n" not in bus.phases:
            continue
        li = net.parent_line[b]
        inflow = i_e[li, 0] if (li >= 0 and "n" in net.lines[li].phases) else 0.0
        out = sum(i_e[ch, 0] for ch in net.children[b]
                  if "n" in net.lines[ch].phases)
        i_gr[b] = inflow - out + returns[b]
    return conds, u_e, i_e, i_gr


def _forward_phase_voltages(net, u, i_line):
    for b in net.topo_order:
        li = net.parent_line[b]
        if li < 0:
            continue
        ln = net.lines[li]
        Z = ln.impedance()
        for f in ln.phases:
            if f not in PHASES:
                continue
            fi = COND_POS[f]
            drop = 0.0 + 0.0j
            for f2 in ln.phases:
                drop += Z[fi, COND_POS[f2]] * i_line[li, COND_POS[f2]]
            u[b, fi] = u[ln.from_i, fi] - drop
    return u


def solve_power_flow(net, injections, tol=1e-10, max_iter=200,
                     force_newton=False, horizon=None):
    """Fixed-point sweep power flow over every period.

    `injections` may come from :func:`injections_from_devices`. Raises
    PowerFlowError on divergence. The slack keeps {1, 1/_-120, 1/_120}.
    """
    injections = _resolve_buses(net, injections)
    if horizon is not None:
        T = int(horizon)
    else:
        T = int(injections[0].p0.shape[-1]) if injections else 24
    state = PowerFlowState(net, T)
    has_return = net.has_neutral
    total_iters = 0
    worst = 0.0

    for t in range(T):
        u = nominal_voltages(net)
        stall = 0
        prev_upd = np.inf
        ok = False
        for it in range(1, max_iter + 1):
            draws, returns = _device_draws(net, injections, u, t)
            i_line = _backward_phase_currents(net, draws)
            i_gr = np.zeros(net.n_buses(), complex)
            if has_return:
                conds, u_e, i_e, i_gr = _solve_return_ladder(net, i_line, returns)
                for k, f in enumerate(conds):
                    for b in range(net.n_buses()):
                        u[b, COND_POS[f]] = u_e[b, k]
                    for li in range(net.n_lines()):
                        i_line[li, COND_POS[f]] = i_e[li, k]
            u_new = _forward_phase_voltages(net, u.copy(), i_line)
            upd = float(np.max(np.abs(u_new - u)))
            u = u_new
            total_iters += 1
            if upd < tol:
                ok = True
                break
            if upd >= prev_upd - 1e-16:
                stall += 1
                if stall >= 5:
                    break
            else:
                stall = 0
            prev_upd = upd
        if not ok or force_newton:
            u, i_line, i_gr, nit = _newton_period(net, injections, t, u, tol,
                                                  max_iter)
            state.used_newton = True
            total_iters += nit
            upd = 0.0
        else:
            # consistency pass: store currents derived from the final
            # voltages so KCL holds to machine precision at the fixed point
            draws, returns = _device_draws(net, injections, u, t)
            i_line = _backward_phase_currents(net, draws)
            i_gr = np.zeros(net.n_buses(), complex)
            if has_return:
                conds, u_e, i_e, i_gr = _solve_return_ladder(net, i_line, returns)
                for k, f in enumerate(conds):
                    for b in range(net.n_buses()):
                        u[b, COND_POS[f]] = u_e[b, k]
                    for li in range(net.n_lines()):
                        i_line[li, COND_POS[f]] = i_e[li, k]
        state.u[:, :, t] = u
        state.i_line[:, :, t] = i_line
        state.i_ground[:, t] = i_gr
        worst = max(worst, upd)

    state.converged = True
    state.iterations = total_iters
    state.max_mismatch = worst
    return state


# --- Newton fallback -----------------------------------------------------------


def _newton_period(net, injections, t, u0, tol, max_iter):
    """Damped Newton on the full circuit equations of one period."""
    nb, nl = net.n_buses(), net.n_lines()
    clamped = net.clamped_buses()

    # unknown indexing: complex voltage per available (bus, cond) except
    # slack phases and clamped n/g nodes; complex current per (line, cond)
    u_ix = -np.ones((nb, 5), int)
    free = []
    for b, bus in enumerate(net.buses):
        for f in bus.phases:
            fi = COND_POS[f]
            if f in PHASES and b == net.slack:
                continue
            if f not in PHASES and b in clamped:
                continue
            u_ix[b, fi] = len(free)
            free.append(("u", b, fi))
    i_ix = -np.ones((nl, 5), int)
    for li, ln in enumerate(net.lines):
        for f in ln.phases:
            i_ix[li, COND_POS[f]] = len(free)
            free.append(("i", li, COND_POS[f]))
    n = len(free)

    def unpack(xv):
        u = nominal_voltages(net)
        i_line = np.zeros((nl, 5), complex)
        for k, (kind, a, fi) in enumerate(free):
            val = complex(xv[2 * k], xv[2 * k + 1])
            if kind == "u":
                u[a, fi] = val
            else:
                i_line[a, fi] = val
        return u, i_line

    def pack(u, i_line):
        xv = np.zeros(2 * n)
        for k, (kind, a, fi) in enumerate(free):
            val = u[a, fi] if kind == "u" else i_line[a, fi]
            xv[2 * k], xv[2 * k + 1] = val.real, val.imag
        return xv

    def residual_and_jac(xv):
        u, i_line = unpack(xv)
        rows, cols, vals = [], [], []
        res = []

        def add(r, c_ix, dre_dre, dre_dim, dim_dre, dim_dim):
            if c_ix < 0:
                return
            rows.extend([2 * r, 2 * r, 2 * r + 1, 2 * r + 1])
            cols.extend([2 * c_ix, 2 * c_ix + 1, 2 * c_ix, 2 * c_ix + 1])
            vals.extend([dre_dre, dre_dim, dim_dre, dim_dim])

        r = 0
        # drops
        for li, ln in enumerate(net.lines):
            Z = ln.impedance()
            for f in ln.phases:
                fi = COND_POS[f]
                drop = sum(Z[fi, COND_POS[f2]] * i_line[li, COND_POS[f2]]
                           for f2 in ln.phases)
                val = u[ln.from_i, fi] - u[ln.to_i, fi] - drop
                res.extend([val.real, val.imag])
                add(r, u_ix[ln.from_i, fi], 1, 0, 0, 1)
                add(r, u_ix[ln.to_i, fi], -1, 0, 0, -1)
                for f2 in ln.phases:
                    z = Z[fi, COND_POS[f2]]
                    add(r, i_ix[li, COND_POS[f2]], -z.real, z.imag,
                        -z.imag, -z.real)
                r += 1
        # KCL
        dev_by_bus = {}
        for inj in injections:
            dev_by_bus.setdefault(inj.bus_i, []).append(inj)
        has_n = net.has_neutral
        for b, bus in enumerate(net.buses):
            for f in bus.phases:
                fi = COND_POS[f]
                if f in PHASES and b == net.slack:
                    continue
                if f not in PHASES and b in clamped:
                    continue
                val = 0.0 + 0.0j
                li = net.parent_line[b]
                if li >= 0 and f in net.lines[li].phases:
                    val += i_line[li, fi]
                    add(r, i_ix[li, fi], 1, 0, 0, 1)
                for ch in net.children[b]:
                    if f in net.lines[ch].phases:
                        val -= i_line[ch, fi]
                        add(r, i_ix[ch, fi], -1, 0, 0, -1)
                if bus.grounding is not None and not bus.grounding.solid \
                        and f in ("n", "g"):
                    y = bus.grounding.admittance()
                    sign = -1.0 if f == "n" else 1.0
                    u_g = u[b, COND_POS["g"]] if net.has_ground else 0.0
                    ugr = u[b, COND_POS["n"]] - u_g
                    val += sign * y * ugr
                    pairs = [("n", 1.0)] + ([("g", -1.0)] if net.has_ground else [])
                    for f2, s2 in pairs:
                        c = u_ix[b, COND_POS[f2]]
                        w = sign * s2 * y
                        add(r, c, w.real, -w.imag, w.imag, w.real)
                for inj in dev_by_bus.get(b, ()):
                    sgn = 0.0
                    if f in PHASES:
                        if inj.nodes[0] == f:
                            sgn = -1.0
                        elif len(inj.nodes) == 2 and inj.nodes[1] == f:
                            sgn = +1.0
                    elif f == "n" and len(inj.nodes) == 1:
                        sgn = +1.0   # wye return current into the neutral
                    if sgn == 0.0:
                        continue
                    u_dev = inj.voltage(u[b], has_n)
                    i_dev, grads = _injection_current_jac(inj, u_dev, t)
                    val += sgn * i_dev
                    # voltage nodes: (z, +1), (n or z2, -1)
                    nodes = [(COND_POS[inj.nodes[0]], +1.0)]
                    if len(inj.nodes) == 2:
                        nodes.append((COND_POS[inj.nodes[1]], -1.0))
                    elif has_n:
                        nodes.append((COND_POS["n"], -1.0))
                    a11, a12, a21, a22 = grads
                    for nfi, ns in nodes:
                        c = u_ix[b, nfi]
                        add(r, c, sgn * ns * a11, sgn * ns * a12,
                            sgn * ns * a21, sgn * ns * a22)
                res.extend([val.real, val.imag])
                r += 1
        J = sp.coo_matrix((vals, (rows, cols)), shape=(2 * r, 2 * n)).tocsc()
        return np.asarray(res), J

    xv = pack(u0, np.zeros((nl, 5), complex))
    rnorm_prev = np.inf
    for it in range(1, max_iter + 1):
        res, J = residual_and_jac(xv)
        rnorm = float(np.max(np.abs(res))) if res.size else 0.0
        if rnorm < max(tol, 1e-12):
            u, i_line = unpack(xv)
            i_gr = _clamp_currents(net, i_line, injections, u, t)
            return u, i_line, i_gr, it
        try:
            dx = spla.spsolve(J, -res)
        except Exception as e:
            raise PowerFlowError(f"newton linear solve failed: {e}") from e
        if not np.all(np.isfinite(dx)):
            raise PowerFlowError("newton produced a non-finite step")
        alpha = 1.0
        for _ in range(6):
            trial = xv + alpha * dx
            r_t, _J = residual_and_jac(trial)
            if float(np.max(np.abs(r_t))) < rnorm or alpha < 0.05:
                break
            alpha *= 0.5
        xv = xv + alpha * dx
        rnorm_prev = rnorm
    raise PowerFlowError(f"newton power flow diverged (period {t}, "
                         f"residual {rnorm_prev:.2e})")


def _injection_current_jac(inj, u_dev, t):
    """Drawn current and its 2x2 real Jacobian wrt the device voltage."""
    p, q = u_dev.real, u_dev.imag
    m2 = p * p + q * q
    if m2 <= 1e-18:
        raise PowerFlowError(f"zero voltage at injection {inj.label}")
    m = np.sqrt(m2)
    azp, aip, app = inj.zip_p
    azq, aiq, apq = inj.zip_q
    P = inj.p0[t] * (azp * m2 + aip * m + app)
    Q = inj.q0[t] * (azq * m2 + aiq * m + apq)
    dPdm = inj.p0[t] * (2 * azp * m + aip)
    dQdm = inj.q0[t] * (2 * azq * m + aiq)
    ire = (P * p + Q * q) / m2
    iim = (P * q - Q * p) / m2
    dm_dp, dm_dq = p / m, q / m
    d_ire_dp = (dPdm * dm_dp * p + P + dQdm * dm_dp * q) / m2 \
        - 2 * p * (P * p + Q * q) / m2 ** 2
    d_ire_dq = (dPdm * dm_dq * p + dQdm * dm_dq * q + Q) / m2 \
        - 2 * q * (P * p + Q * q) / m2 ** 2
    d_iim_dp = (dPdm * dm_dp * q - dQdm * dm_dp * p - Q) / m2 \
        - 2 * p * (P * q - Q * p) / m2 ** 2
    d_iim_dq = (dPdm * dm_dq * q + P - dQdm * dm_dq * p) / m2 \
        - 2 * q * (P * q - Q * p) / m2 ** 2
    return complex(ire, iim), (d_ire_dp, d_ire_dq, d_iim_dp, d_iim_dq)


def _clamp_currents(net, i_line, injections, u, t):
    nb = net.n_buses()
    returns = np.zeros(nb, complex)
    if net.has_neutral:
        for inj in injections:
            if len(inj.nodes) == 1:
                returns[inj.bus_i] += inj.current(inj.voltage(u[inj.bus_i],
                                                              True), t)
    i_gr = np.zeros(nb, complex)
    ni = COND_POS["n"]
    for b in range(nb):
        if "n" not in net.buses[b].phases:
            continue
        li = net.parent_line[b]
        inflow = i_line[li, ni] if (li >= 0 and "n" in net.lines[li].phases) else 0.0
        out = sum(i_line[ch, ni] for ch in net.children[b]
                  if "n" in net.lines[ch].phases)
        i_gr[b] = inflow - out + returns[b]
    return i_gr


# --- checks and validation ------------------------------------------------------


def kcl_residuals(net, state, injections):
    """Max KCL residual (p.u.) over buses, conductors and periods.

    Phase rows at every non-slack bus; neutral/ground rows at every
    non-clamped bus, with resistive grounding currents (u_n - u_g) * Y
    included, so Ohm's law across the grounding is checked as well.
    """
    injections = _resolve_buses(net, injections)
    T = state.u.shape[2]
    clamped = net.clamped_buses()
    worst = 0.0
    for t in range(T):
        draws, returns = _device_draws(net, injections, state.u[:, :, t], t)
        for b, bus in enumerate(net.buses):
            for f in bus.phases:
                fi = COND_POS[f]
                if f in PHASES and b == net.slack:
                    continue
                if f not in PHASES and b in clamped:
                    continue
                li = net.parent_line[b]
                ok_parent = li >= 0 and f in net.lines[li].phases
                val = state.i_line[li, fi, t] if ok_parent else 0.0
                for ch in net.children[b]:
                    if f in net.lines[ch].phases:
                        val -= state.i_line[ch, fi, t]
                if f in PHASES:
                    val -= draws[b, fi]
                else:
                    if f == "n":
                        val += returns[b]
                    if bus.grounding is not None and not bus.grounding.solid:
                        y = bus.grounding.admittance()
                        u_g = state.u[b, COND_POS["g"], t] if net.has_ground else 0.0
                        i_gr = y * (state.u[b, COND_POS["n"], t] - u_g)
                        val += -i_gr if f == "n" else i_gr
                worst = max(worst, abs(val))
    return worst


def validate_opf_solution(net, devs, result, tol=1e-4):
    """Re-run the oracle with the OPF's controls fixed, compare voltages.

    `result` needs `.controls` (see :func:`injections_from_devices`) and
    `.voltages` as a complex (n_bus, 5, T) true-frame array. Returns a report
    dict with the maximum complex-voltage deviation and its location.
    """
    injections = injections_from_devices(devs, controls=result.controls)
    state = solve_power_flow(net, injections)
    u_ref = result.voltages
    diff = np.abs(state.u - u_ref)
    # compare only available conductors
    mask = np.zeros_like(diff, bool)
    for b, bus in enumerate(net.buses):
        for f in bus.phases:
            mask[b, COND_POS[f], :] = True
    diff = np.where(mask, diff, 0.0)
    worst = float(diff.max())
    b, fi, t = np.unravel_index(int(diff.argmax()), diff.shape)
    per_bus = diff.max(axis=(1, 2))
    return {
        "max_deviation": worst,
        "bus": net.buses[b].id,
        "phase": CONDUCTORS[fi],
        "period": int(t),
        "passed": bool(worst <= tol),
        "tolerance": tol,
        "per_bus": {net.buses[k].id: float(per_bus[k])
                    for k in range(net.n_buses())},
        "oracle_converged": state.converged,
    }
