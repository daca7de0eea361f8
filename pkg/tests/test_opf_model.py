import numpy as np
import pytest

from lvopf import opf_model, powerflow, scenarios
from lvopf.devices import load_devices
from lvopf.network import load_network
from lvopf.opf_model import build_problem, decode_state, initial_point

from conftest import two_bus_doc


@pytest.fixture(scope="module")
def cigre_problem(cigre_net, cigre_devices):
    cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N1",
                                   controllability="S5")
    return build_problem(cigre_net, cigre_devices, scenario=cfg)


def test_empty_devices_counts():
    net = load_network(two_bus_doc(phases="abc"))
    devs = load_devices({"horizon": 1, "devices": []})
    prob = build_problem(net, devs)
    # one non-slack bus: KCL = 2 rows per present phase, drops 2 per
    # line-conductor, slack link 2 per phase
    lin = prob.eq.families[0]
    kcl_rows = [l for l in lin.labels if l[0].startswith("kcl_")]
    assert sum(c for _, _, c in kcl_rows) == 3 * 2
    drop_rows = [l for l in lin.labels if l[0].startswith("drop_")]
    assert sum(c for _, _, c in drop_rows) == 3 * 2
    assert prob.n_ineq > 0


def test_problem_size_ordering(cigre_net, cigre_devices):
    sizes = {}
    for nm in ("N1", "N2", "N3", "N4", "N5"):
        cfg = scenarios.ScenarioConfig(load_model="L1", network_model=nm,
                                       controllability="S5")
        p = build_problem(cigre_net, cigre_devices, scenario=cfg)
        sizes[nm] = (p.n_vars, p.n_eq + p.n_ineq)
    assert sizes["N1"] > sizes["N2"] > sizes["N3"] > sizes["N5"]
    assert sizes["N3"] == sizes["N4"]


def test_table7_report_has_itemized_notes(cigre_net, cigre_devices):
    rep = opf_model.table7_report(cigre_net, cigre_devices)
    assert rep["ordering_ok"]
    assert set(rep["targets"]) == {"N1", "N2", "N3", "N4", "N5"}
    assert len(rep["notes"]) == 5
    for note in rep["notes"]:
        assert "vs published" in note


def test_pf_point_satisfies_equalities(cigre_problem):
    prob = cigre_problem
    controls = opf_model.original_controls(prob)
    inj = powerflow.injections_from_devices(prob.devices, controls)
    state = powerflow.solve_power_flow(prob.net, inj)
    x0 = initial_point(prob, state, slack_margin=0.0)
    assert np.abs(prob.residual_eq(x0)).max() <= 1e-8


def test_rotated_neutral_balance_balanced_injections(cigre_net, cigre_devices):
    # identical rotated currents on all three phases of a balancing device
    # cancel in the counter-rotated neutral rows (sum of reference rotors
    # is zero), so the balance forces zero neutral current
    cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N1",
                                   controllability="S5", inverter_mode="3ph")
    prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
    ev = prob.devices.evs[0]
    d = prob.dev_index[ev.id]
    assert d["mode"] == "3ph"
    bus_id = prob.net.buses[d["bus"]].id
    lin = prob.eq.families[0]
    x = np.zeros(prob.n_vars)
    for z in d["ire"]:
        x[d["ire"][z]] = 1.0
        x[d["iim"][z]] = 0.0
    for lab, base, cnt in lin.labels:
        if lab in (f"kcl_n_re[{bus_id}]", f"kcl_n_im[{bus_id}]"):
            res = lin.A[base:base + cnt] @ x - lin.b[base:base + cnt]
            assert np.abs(res).max() <= 1e-12


def test_jacobian_matches_finite_differences(cigre_problem):
    prob = cigre_problem
    rng = np.random.default_rng(3)
    x = rng.normal(0.9, 0.1, prob.n_vars)
    for jac, res in ((prob.jac_eq, prob.residual_eq),
                     (prob.jac_ineq, prob.residual_ineq)):
        J = jac(x).tocsr()
        h = 1e-7
        cols = rng.integers(0, prob.n_vars, size=40)
        for j in cols:
            xp = x.copy()
            xp[j] += h
            xm = x.copy()
            xm[j] -= h
            fd = (res(xp) - res(xm)) / (2 * h)
            col = J[:, j].toarray().ravel()
            assert np.abs(fd - col).max() <= 1e-6 * max(1.0, np.abs(col).max())


def test_hessian_matches_finite_differences(cigre_problem):
    prob = cigre_problem
    rng = np.random.default_rng(5)
    x = rng.normal(0.9, 0.1, prob.n_vars)
    lam_e = rng.normal(size=prob.n_eq)
    lam_i = rng.normal(size=prob.n_ineq)
    H = prob.hess_lagrangian(x, lam_e, lam_i).tocsr()
    assert abs(H - H.T).max() == 0.0

    def grad(xv):
        return prob.jac_eq(xv).T @ lam_e + prob.jac_ineq(xv).T @ lam_i

    h = 1e-6
    for j in rng.integers(0, prob.n_vars, size=25):
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        fd = (grad(xp) - grad(xm)) / (2 * h)
        col = H[:, j].toarray().ravel()
        assert np.abs(fd - col).max() <= 1e-5 * max(1.0, np.abs(col).max())


def test_objective_examples(cigre_net, cigre_devices):
    # import at 10 p.u.-h total prices at c_IE = 1 EUR/kWh on the 1 kW base
    cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N3",
                                   controllability="S1")
    prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
    x = np.zeros(prob.n_vars)
    t = prob.tables
    x[t["p_imp"]["a"][:10]] = 1.0   # 10 p.u.-h of import
    assert prob.objective(x) == pytest.approx(10.0, abs=1e-6)
    # 1 p.u. of cumulative overvoltage slack adds 30 EUR
    key = next(iter(t["sig_up"]))
    x2 = np.zeros(prob.n_vars)
    x2[t["sig_up"][key][0]] = 1.0
    assert prob.objective(x2) == pytest.approx(30.0, abs=1e-6)


def test_pv_curtailment_cost(cigre_net, cigre_devices):
    # 1 p.u. of curtailed power at pf=1 adds c_PPV = 10 EUR
    cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N3",
                                   controllability="S4")
    prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
    pv = prob.devices.pvs[0]
    d = prob.dev_index[pv.id]
    tpk = int(np.argmax(pv.s_gen))
    x = np.zeros(prob.n_vars)
    x[d["pf"]] = 1.0
    x[d["p_inj"]] = pv.s_gen
    x[d["p_inj"][tpk]] = pv.s_gen[tpk] - 1.0   # curtail 1 p.u. for one hour
    base = np.zeros(prob.n_vars)
    base[d["pf"]] = 1.0
    base[d["p_inj"]] = pv.s_gen
    assert prob.objective(x) - prob.objective(base) == pytest.approx(10.0,
                                                                     abs=1e-6)


def test_scenario_bounds_s1_vs_s8(cigre_net, cigre_devices):
    lb1, ub1, p1 = opf_model.scenario_bounds(
        cigre_net, cigre_devices,
        scenarios.ScenarioConfig(load_model="L1", network_model="N3",
                                 controllability="S1"))
    # S1: no curtailment, unity pf floor, no flexibility anywhere
    for pv in p1.devices.pvs:
        d = p1.dev_index[pv.id]
        assert np.allclose(lb1[d["s_inv"]], ub1[d["s_inv"]])
        assert np.all(lb1[d["pf"]] == 1.0)
    for load in p1.devices.loads:
        d = p1.dev_index[load.id]
        assert np.all(ub1[d["od1"]] == 0.0)
    for ev in p1.devices.evs:
        d = p1.dev_index[ev.id]
        assert np.all(ub1[d["oc"]] == 0.0)

    lb8, ub8, p8 = opf_model.scenario_bounds(
        cigre_net, cigre_devices,
        scenarios.ScenarioConfig(load_model="L1", network_model="N3",
                                 controllability="S8"))
    for pv in p8.devices.pvs:
        d = p8.dev_index[pv.id]
        assert np.allclose(lb8[d["s_inv"]], 0.8 * ub8[d["s_inv"]])
        assert np.all(lb8[d["pf"]] == pytest.approx(0.7))
    for load in p8.devices.loads:
        d = p8.dev_index[load.id]
        assert np.allclose(ub8[d["od1"]], 0.3 * load.profile_flex)
    for ev in p8.devices.evs:
        d = p8.dev_index[ev.id]
        window = np.zeros(24, bool)
        window[7:15] = True   # t8..t15, 1-based inclusive
        assert np.all(ub8[d["oc"]][window] == 0.0)
        assert np.any(ub8[d["oc"]][~window] > 0.0)


def test_load_model_l7_drops_voltage_dependency(cigre_net, cigre_devices):
    cfg = scenarios.ScenarioConfig(load_model="L7", network_model="N3",
                                   controllability="S5")
    prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
    for load in prob.devices.loads:
        assert load.zip.p_triple() == pytest.approx((0.0, 0.0, 1.0))


def test_rotated_limit_matches_magnitude_on_samples(cigre_problem):
    # rotated ball with zero slack accepts u iff |u~| <= vmax and
    # Re(u~) >= vmin
    rng = np.random.default_rng(11)
    vmin, vmax = cigre_problem.v_band
    for _ in range(200):
        u = rng.uniform(0.5, 1.3) * np.exp(1j * rng.uniform(-0.3, 0.3))
        ok_ball = abs(u) <= vmax
        ok_floor = u.real >= vmin
        assert (u.real ** 2 + u.imag ** 2 <= vmax ** 2) == ok_ball
        assert (vmin - u.real <= 0) == ok_floor


def test_decode_roundtrip(cigre_problem):
    prob = cigre_problem
    x0, state = __import__("lvopf.solver", fromlist=["initialize"]).initialize(prob)
    decoded = decode_state(prob, x0)
    assert decoded["voltages"].shape == (prob.net.n_buses(), 5, prob.T)
    for load in prob.devices.loads:
        np.testing.assert_allclose(decoded["controls"][load.id]["p0_eff"],
                                   load.nominal_profile(), atol=1e-9)


def test_unknown_bus_rejected(cigre_net):
    devs = load_devices({"horizon": 24, "devices": [
        {"id": "x", "type": "load", "bus": "NOPE", "phase": "a",
         "profile": [1.0] * 24, "parts": {"fixed": 1.0}}]})
    with pytest.raises(Exception, match="unknown bus"):
        build_problem(cigre_net, devs)
