"""Feeder representation: buses, multi-conductor lines, grounding, variants.

The network document (JSON) is ingested once, converted to per-unit, validated
(radial, single slack, symmetric impedance matrices) and frozen. Model
variants N1..N5 progressively simplify the conductor set:

    N1  grounding + neutral + mutual coupling + unbalanced (5 conductors)
    N2  no grounding (drops the ground conductor too)
    N3  neutral eliminated by Kron reduction (3 conductors)
    N4  N3 with mutual coupling zeroed
    N5  balanced single-phase equivalent (positive-sequence impedance)
"""

import json
import copy
import numpy as np

from .phasors import CONDUCTORS, PHASES, rotate, counter_rotate, ref_rotor  # noqa: F401

COND_POS = {f: k for k, f in enumerate(CONDUCTORS)}
VARIANTS = ("N1", "N2", "N3", "N4", "N5")


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network documents."""


class GroundingSpec:
    """Neutral-to-ground connection at a bus, in p.u.

    resistance = reactance = 0 encodes a perfect (solid) ground: the bus
    neutral and ground nodes are clamped to the zero reference.
    """

    def __init__(self, resistance, reactance=0.0):
        if resistance < 0:
            raise NetworkError("grounding resistance must be >= 0")
        self.resistance = float(resistance)
        self.reactance = float(reactance)

    @property
    def solid(self):
        return self.resistance == 0.0 and self.reactance == 0.0

    def admittance(self):
        """Complex grounding admittance; only defined for non-solid grounds."""
        z = complex(self.resistance, self.reactance)
        if z == 0:
            raise NetworkError("solid ground has no finite admittance")
        return 1.0 / z

    def __repr__(self):
        return f"GroundingSpec(r={self.resistance:g}, x={self.reactance:g})"


class Bus:
    def __init__(self, bus_id, is_slack=False, grounding=None, phases=None):
        self.id = bus_id
        self.is_slack = bool(is_slack)
        self.grounding = grounding
        self.phases = tuple(phases) if phases else tuple(CONDUCTORS)

    def __repr__(self):
        tag = " slack" if self.is_slack else ""
        return f"Bus({self.id!r}{tag}, phases={''.join(self.phases)})"


class Line:
    """Directed line section (parent -> child after topology processing).

    R and X are 5x5 symmetric p.u. matrices indexed in a,b,c,n,g order;
    entries of absent conductors are exactly zero and excluded from
    constraint assembly.
    """

    def __init__(self, from_bus, to_bus, R, X, phases, ampacity=None):
        self.from_bus = from_bus
        self.to_bus = to_bus
        self.R = np.asarray(R, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.phases = tuple(phases)
        self.ampacity = ampacity

    def impedance(self):
        return self.R + 1j * self.X

    def __repr__(self):
        return (f"Line({self.from_bus!r}->{self.to_bus!r}, "
                f"phases={''.join(self.phases)})")


class NetworkModel:
    """Validated radial feeder in p.u., immutable after construction."""

    def __init__(self, buses, lines, base_power_kw, base_voltage_v,
                 variant="N1", kron_approximate=False):
        self.buses = list(buses)
        self.lines = list(lines)
        self.base_power_kw = float(base_power_kw)
        self.base_voltage_v = float(base_voltage_v)
        self.variant = variant
        self.kron_approximate = kron_approximate

        self.bus_index = {b.id: k for k, b in enumerate(self.buses)}
        if len(self.bus_index) != len(self.buses):
            raise NetworkError("duplicate bus ids")
        slacks = [k for k, b in enumerate(self.buses) if b.is_slack]
        if len(slacks) != 1:
            raise NetworkError(f"exactly one slack bus required, found {len(slacks)}")
        self.slack = slacks[0]
        used = set().union(*(set(ln.phases) for ln in self.lines)) if self.lines else set()
        needed = set(PHASES) & used if used else set(PHASES)
        if not needed <= set(self.buses[self.slack].phases):
            raise NetworkError("slack bus must carry every phase present in the network")

        self._orient_radial()
        self.conductors = tuple(f for f in CONDUCTORS
                                if any(f in ln.phases for ln in self.lines))
        # bus conductor availability: union of incident lines; slack gets all
        avail = [set() for _ in self.buses]
        for ln in self.lines:
            avail[ln.from_i].update(ln.phases)
            avail[ln.to_i].update(ln.phases)
        avail[self.slack].update(self.conductors)
        for b, a in zip(self.buses, avail):
            b.phases = tuple(f for f in CONDUCTORS if f in a)
        for b in self.buses:
            if b.grounding is not None and "n" not in b.phases:
                raise NetworkError(f"grounded bus {b.id} has no neutral conductor")

    # --- derived properties -------------------------------------------------

    @property
    def z_base_ohm(self):
        return self.base_voltage_v ** 2 / (self.base_power_kw * 1e3)

    @property
    def i_base_a(self):
        return self.base_power_kw * 1e3 / self.base_voltage_v

    @property
    def has_neutral(self):
        return "n" in self.conductors

    @property
    def has_ground(self):
        return "g" in self.conductors

    def n_buses(self):
        return len(self.buses)

    def n_lines(self):
        return len(self.lines)

    def grounded_buses(self):
        """Indices of buses carrying a GroundingSpec."""
        return [k for k, b in enumerate(self.buses) if b.grounding is not None]

    def clamped_buses(self):
        """Buses whose neutral/ground nodes are pinned to the 0 reference:
        the slack plus every solidly grounded bus."""
        out = {self.slack}
        for k, b in enumerate(self.buses):
            if b.grounding is not None and b.grounding.solid:
                out.add(k)
        return out

    # --- topology ------------------------------------------------------------

    def _orient_radial(self):
        nb, nl = len(self.buses), len(self.lines)
        if nl != nb - 1:
            raise NetworkError(f"non-radial: {nb} buses need {nb - 1} lines, got {nl}")
        adj = [[] for _ in range(nb)]
        for li, ln in enumerate(self.lines):
            try:
                a = self.bus_index[ln.from_bus]
                b = self.bus_index[ln.to_bus]
            except KeyError as e:
                raise NetworkError(f"line references unknown bus {e}") from None
            adj[a].append((b, li))
            adj[b].append((a, li))
        parent = [-1] * nb
        order = [self.slack]
        seen = {self.slack}
        qi = 0
        while qi < len(order):
            u = order[qi]
            qi += 1
            for v, li in adj[u]:
                if v in seen:
                    continue
                seen.add(v)
                parent[v] = li
                ln = self.lines[li]
                if self.bus_index[ln.from_bus] != u:  # flip to parent -> child
                    ln.from_bus, ln.to_bus = ln.to_bus, ln.from_bus
                ln.from_i = self.bus_index[ln.from_bus]
                ln.to_i = self.bus_index[ln.to_bus]
                order.append(v)
        if len(seen) != nb:
            raise NetworkError("non-radial: network is disconnected or contains a loop")
        self.topo_order = order          # slack first, parents before children
        self.parent_line = parent        # line index feeding each bus (-1 at slack)
        self.children = [[] for _ in range(nb)]
        for li, ln in enumerate(self.lines):
            self.children[ln.from_i].append(li)

    def path_to_slack(self, bus_i):
        """Line indices from a bus up to the slack (uniqueness = radiality)."""
        path = []
        k = bus_i
        while self.parent_line[k] >= 0:
            li = self.parent_line[k]
            path.append(li)
            k = self.lines[li].from_i
        return path


# --- document ingestion -------------------------------------------------------


def _matrix_from_doc(entry, key, phases):
    """Read a 5x5 ohm/km matrix; absent entries default to zero.

    Accepts a full 5x5 nested list, or a dict {"ff": v, "f,theta": v} keyed by
    conductor pairs.
    """
    raw = entry.get(key)
    m = np.zeros((5, 5))
    if raw is None:
        return m
    if isinstance(raw, dict):
        for pair, v in raw.items():
            ft = pair.replace(",", "")
            f, t = ft[0], ft[1]
            m[COND_POS[f], COND_POS[t]] = v
            m[COND_POS[t], COND_POS[f]] = v
    else:
        arr = np.asarray(raw, dtype=float)
        if arr.shape != (5, 5):
            raise NetworkError(f"{key} must be 5x5, got {arr.shape}")
        m = arr
    keep = [COND_POS[f] for f in phases]
    mask = np.zeros((5, 5), bool)
    mask[np.ix_(keep, keep)] = True
    m = np.where(mask, m, 0.0)
    return m


def load_network(source):
    """Build a validated :class:`NetworkModel` from a network document.

    `source` is a path, a JSON string, or an already-parsed dict. Ohmic data
    is converted to p.u. exactly once, here.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = None
        try:
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        except (OSError, TypeError):
            text = source
        doc = json.loads(text)

    base = doc.get("base", {})
    p_kw = float(base.get("power_kw", 1.0))
    v_v = float(base.get("voltage_v", 240.0))
    z_base = v_v ** 2 / (p_kw * 1e3)
    i_base = p_kw * 1e3 / v_v

    cables = doc.get("cables", {})

    buses = []
    for b in doc.get("buses", []):
        g = b.get("grounding")
        grounding = None
        if g is not None:
            grounding = GroundingSpec(resistance=float(g.get("r_ohm", 0.0)) / z_base,
                                      reactance=float(g.get("x_ohm", 0.0)) / z_base)
        phases = tuple(b["phases"]) if "phases" in b else None
        buses.append(Bus(b["id"], is_slack=bool(b.get("slack", False)),
                         grounding=grounding, phases=phases))

    lines = []
    for e in doc.get("lines", []):
        entry = dict(cables.get(e.get("cable"), {})) if e.get("cable") else {}
        entry.update(e)
        phases = tuple(entry.get("phases", "abcng"))
        bad = set(phases) - set(CONDUCTORS)
        if bad:
            raise NetworkError(f"unknown conductors {bad} on line {e}")
        length = float(entry.get("length_km", 1.0))
        R = _matrix_from_doc(entry, "r_ohm_per_km", phases) * length / z_base
        X = _matrix_from_doc(entry, "x_ohm_per_km", phases) * length / z_base
        if not np.allclose(R, R.T) or not np.allclose(X, X.T):
            raise NetworkError(f"asymmetric impedance matrix on line {e['from']}-{e['to']}")
        for f in phases:
            if R[COND_POS[f], COND_POS[f]] <= 0:
                raise NetworkError(
                    f"non-positive self-resistance for conductor {f} on line "
                    f"{e['from']}-{e['to']}")
        amp = entry.get("ampacity_a")
        ampacity = float(amp) / i_base if amp is not None else None
        lines.append(Line(e["from"], e["to"], R, X, phases, ampacity))

    net = NetworkModel(buses, lines, p_kw, v_v, variant=doc.get("variant", "N1"))
    return net


# --- variants -----------------------------------------------------------------


def kron_reduce(Z, keep, drop):
    """Exact elimination of `drop` rows/cols: Zk = Zpp - Zpe Zee^-1 Zep.

    Z is complex symmetric, so Zep = Zpe.T.
    """
    Zpp = Z[np.ix_(keep, keep)]
    Zpe = Z[np.ix_(keep, drop)]
    Zee = Z[np.ix_(drop, drop)]
    if np.linalg.matrix_rank(Zee) < len(drop):
        raise NetworkError("Kron reduction needs a nonsingular neutral/ground block")
    return Zpp - Zpe @ np.linalg.solve(Zee, Zpe.T)


def apply_variant(net, variant):
    """Derive an N1..N5 model from a full N1 network.

    Returns a new NetworkModel; the input is left untouched. Kron reduction
    (N3/N4) is exact only when every bus has a solid neutral ground; otherwise
    the returned model is flagged ``kron_approximate``.
    """
    if variant not in VARIANTS:
        raise NetworkError(f"unknown network variant {variant!r}")
    if variant == net.variant:
        return copy.deepcopy(net)
    if net.variant != "N1":
        raise NetworkError("variants are derived from the full N1 model")

    buses = copy.deepcopy(net.buses)
    lines = copy.deepcopy(net.lines)

    def strip_conductors(drop_set):
        for ln in lines:
            rows = [COND_POS[f] for f in drop_set]
            for r in rows:
                ln.R[r, :] = 0.0
                ln.R[:, r] = 0.0
                ln.X[r, :] = 0.0
                ln.X[:, r] = 0.0
            ln.phases = tuple(f for f in ln.phases if f not in drop_set)
        for b in buses:
            b.phases = tuple(f for f in b.phases if f not in drop_set)

    kron_approximate = False

    if variant in ("N2", "N3", "N4", "N5"):
        for b in buses:
            b.grounding = None

    if variant == "N2":
        # without groundings the earth-return conductor carries no current
        strip_conductors({"g"})

    if variant in ("N3", "N4", "N5"):
        # joint elimination of the return conductors; exact iff every bus of
        # the source model had a solid neutral ground
        clamped = net.clamped_buses()
        if any(k not in clamped for k in range(net.n_buses())):
            kron_approximate = True
        for ln in lines:
            if "n" not in ln.phases:
                raise NetworkError(
                    f"Kron reduction requested but line {ln.from_bus}-{ln.to_bus} "
                    "has no neutral conductor row")
            elim = [f for f in ("n", "g") if f in ln.phases]
            Z = ln.R + 1j * ln.X
            keep_f = [f for f in ln.phases if f not in elim]
            keep = [COND_POS[f] for f in keep_f]
            drop = [COND_POS[f] for f in elim]
            Zk = kron_reduce(Z, keep, drop)
            R = np.zeros((5, 5))
            X = np.zeros((5, 5))
            for a, fa in enumerate(keep):
                for b_, fb in enumerate(keep):
                    R[fa, fb] = Zk[a, b_].real
                    X[fa, fb] = Zk[a, b_].imag
            ln.R, ln.X, ln.phases = R, X, tuple(keep_f)
        for b in buses:
            b.phases = tuple(f for f in b.phases if f not in ("n", "g"))

    if variant == "N4":
        for ln in lines:
            ln.R = np.diag(np.diag(ln.R))
            ln.X = np.diag(np.diag(ln.X))

    if variant == "N5":
        for ln in lines:
            zs = [complex(ln.R[COND_POS[f], COND_POS[f]],
                          ln.X[COND_POS[f], COND_POS[f]]) for f in ln.phases]
            zm = []
            for a in range(len(ln.phases)):
                for b_ in range(a + 1, len(ln.phases)):
                    fa, fb = COND_POS[ln.phases[a]], COND_POS[ln.phases[b_]]
                    zm.append(complex(ln.R[fa, fb], ln.X[fa, fb]))
            z1 = np.mean(zs) - (np.mean(zm) if zm else 0.0)
            R = np.zeros((5, 5))
            X = np.zeros((5, 5))
            R[0, 0], X[0, 0] = z1.real, z1.imag
            ln.R, ln.X, ln.phases = R, X, ("a",)
        for b in buses:
            b.phases = ("a",)

    out = NetworkModel(buses, lines, net.base_power_kw, net.base_voltage_v,
                       variant=variant, kron_approximate=kron_approximate)
    return out
