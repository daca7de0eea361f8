import numpy as np
import pytest

from lvopf import opf_model, powerflow, scenarios, solver
from lvopf.devices import load_devices
from lvopf.network import load_network
from lvopf.opf_model import build_problem

from conftest import two_bus_doc


def two_bus_problem(load_p=(1.0, 0.5), ampacity_a=None, v_band=(0.9, 1.1),
                    r_self=0.01):
    net = load_network(two_bus_doc(r_self=r_self, ampacity_a=ampacity_a))
    T = len(load_p)
    devs = load_devices({"horizon": T, "devices": [
        {"id": "l1", "type": "load", "bus": "B", "phase": "a",
         "profile": list(load_p), "parts": {"fixed": 1.0},
         "zip": {"az_p": 0, "ai_p": 0, "ap_p": 1,
                 "az_q": 0, "ai_q": 0, "ap_q": 1}, "pf": 1.0}]})
    return build_problem(net, devs, v_band=v_band)


class TestTinyProblems:
    def test_two_bus_reaches_pf_solution(self):
        prob = two_bus_problem()
        res = solver.solve(prob)
        assert res.status == "converged"
        assert res.iterations <= 15
        # the oracle point is the unique feasible point
        inj = powerflow.injections_from_devices(prob.devices)
        st = powerflow.solve_power_flow(prob.net, inj)
        assert abs(res.voltages[1, 0, 0] - st.u[1, 0, 0]) <= 1e-6
        expect = sum((st.u[0, 0, t] * np.conj(st.i_line[0, 0, t])).real
                     for t in range(2))
        assert res.objective == pytest.approx(expect, abs=1e-3)

    def test_zero_load_initial_point_optimal(self):
        prob = two_bus_problem(load_p=(0.0,))
        res = solver.solve(prob)
        assert res.status == "converged"
        assert res.objective == pytest.approx(0.0, abs=1e-5)

    def test_kkt_residuals_reported(self):
        prob = two_bus_problem()
        res = solver.solve(prob)
        assert res.kkt_residual <= 1e-6
        assert res.feasibility_residual <= 1e-6

    def test_infeasible_detected_via_iteration_cap(self):
        # demand far beyond ampacity with the relaxing slacks disabled:
        # sigma_thermal forced to zero makes the problem infeasible
        prob = two_bus_problem(load_p=(3.0,), ampacity_a=4.2)  # ~1 p.u. cap
        sig = prob.tables["sig_th"][(0, "a")]
        fixed = np.asarray(sig, int)
        res = solver.solve(prob, opts=solver.SolverOptions(max_iter=80),
                           fixed_zero=fixed)
        assert res.status != "converged"
        assert res.feasibility_residual > 1e-6


class TestInitialize:
    def test_pf_seed_beats_flat_start(self, cigre_net, cigre_devices):
        cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N3",
                                       controllability="S5")
        prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
        x_pf, state = solver.initialize(prob)
        assert state is not None
        r_pf = solver.solve(prob, x0=x_pf)
        x_flat = opf_model.initial_point(prob, None)
        r_flat = solver.solve(prob, x0=x_flat)
        assert r_pf.status == "converged"
        assert r_flat.status == "converged"
        # same optimum from both starts, fewer iterations from the seed
        assert r_pf.objective <= r_flat.objective + max(
            1e-6, 1e-4 * abs(r_flat.objective))
        assert r_pf.iterations <= r_flat.iterations

    def test_slacks_start_positive_at_violations(self, cigre_net,
                                                 cigre_devices):
        cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N1",
                                       controllability="S1")
        prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
        x0, state = solver.initialize(prob)
        t = prob.tables
        from lvopf.network import COND_POS
        vmin, _ = prob.v_band
        seen = 0
        for (b, z), idx in t["sig_dn"].items():
            mag = np.abs(state.u[b, COND_POS[z], :])
            viol = mag < vmin - 1e-9
            if viol.any():
                seen += 1
                assert np.all(x0[idx][viol] > 0)
        assert seen > 0   # the reference feeder is stressed at the EV peak


class TestPruning:
    def test_unstressed_feeder_prunes_everything(self):
        prob = two_bus_problem(load_p=(0.5, 0.2))
        x0, state = solver.initialize(prob)
        fixed = solver.prune_slacks(prob, state, margin=0.05)
        n_slack = sum(len(v) for k in ("sig_up", "sig_dn", "sig_th")
                      for v in prob.tables[k].values())
        assert len(fixed) == n_slack
        # barrier tails scale with the final mu, so drive both solves tight
        # before comparing
        opts = solver.SolverOptions(opt_tol=1e-9, feas_tol=1e-9)
        r_pruned = solver.solve_with_pruning(prob, opts=opts)
        r_full = solver.solve(prob, opts=opts)
        assert r_pruned.status == r_full.status == "converged"
        assert r_pruned.objective == pytest.approx(r_full.objective, abs=1e-8)

    def test_stressed_feeder_keeps_violated_slacks(self, cigre_net,
                                                   cigre_devices):
        cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N1",
                                       controllability="S1")
        prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
        x0, state = solver.initialize(prob)
        fixed = solver.prune_slacks(prob, state, margin=0.05)
        n_slack = sum(len(np.asarray(v).ravel())
                      for k in ("sig_up", "sig_dn", "sig_th")
                      for v in prob.tables[k].values())
        assert 0 < len(fixed) < n_slack

    def test_readd_round_restores_feasibility(self):
        # pruning with a huge margin fixes every slack; the violated ones
        # must be re-added and the final solution feasible
        prob = two_bus_problem(load_p=(3.0,), ampacity_a=6.0, r_self=0.02)
        x0, state = solver.initialize(prob)
        fixed = solver.prune_slacks(prob, state, margin=-10.0)  # prune all
        n_slack = sum(len(v) for k in ("sig_up", "sig_dn", "sig_th")
                      for v in prob.tables[k].values())
        assert len(fixed) == n_slack
        opts = solver.SolverOptions(prune_margin=-10.0)
        res = solver.solve_with_pruning(prob, opts=opts)
        assert res.status == "converged"
        assert res.feasibility_residual <= 1e-6
        assert np.max(prob.residual_ineq(res.x_opt)) <= 1e-6


class TestTimeShiftRounding:
    def test_block_lands_on_exactly_a_periods(self):
        net = load_network(two_bus_doc(r_self=0.01))
        T = 6
        tsh = [0.0, 0.8, 0.8, 0.8, 0.0, 0.0]
        devs = load_devices({"horizon": T, "devices": [
            {"id": "l1", "type": "load", "bus": "B", "phase": "a",
             "profile_fixed": [0.3] * T, "profile_flex": [0.0] * T,
             "profile_tshift": tsh, "p_sl_kw": 0.8, "active_periods": 3,
             "zip": {"az_p": 0, "ai_p": 0, "ap_p": 1,
                     "az_q": 0, "ai_q": 0, "ap_q": 1}}]})
        prob = build_problem(net, devs)
        res = solver.solve_schedule(prob, prune=False)
        assert res.status == "converged"
        assert "l1" in res.rounding
        assert len(res.rounding["l1"]) == 3
        d = prob.dev_index["l1"]
        delta = res.x_opt[d["delta"]]
        assert np.all((delta < 1e-6) | (delta > 1 - 1e-6))
        assert delta.sum() == pytest.approx(3.0, abs=1e-6)


class TestDeterminism:
    def test_identical_runs_bitwise_equal(self):
        prob1 = two_bus_problem()
        prob2 = two_bus_problem()
        r1 = solver.solve(prob1)
        r2 = solver.solve(prob2)
        assert r1.iterations == r2.iterations
        assert np.array_equal(r1.x_opt, r2.x_opt)
        assert r1.objective == r2.objective


class TestIndependentKkt:
    def test_multipliers_reproduce_dual_residual(self, cigre_net,
                                                 cigre_devices):
        cfg = scenarios.ScenarioConfig(load_model="L1", network_model="N3",
                                       controllability="S5")
        prob = build_problem(cigre_net, cigre_devices, scenario=cfg)
        res = solver.solve(prob)
        assert res.status == "converged"
        m = res.multipliers
        sc = res.scaling
        # rebuild the scaled dual residual from the raw evaluators
        g = sc["objective"] * prob.gradient()
        g = g + prob.jac_eq(res.x_opt).T @ m["y_eq"]
        g = g + prob.jac_ineq(res.x_opt).T @ m["y_ineq"]
        free = res.free_mask
        gf = g[free] - m["z_l"] + m["z_u"]
        mults = (np.abs(m["y_eq"]).sum() + np.abs(m["y_ineq"]).sum()
                 + m["z_l"].sum() + m["z_u"].sum())
        s_d = max(100.0, mults / max(1, len(gf) + len(m["y_eq"])
                                     + len(m["y_ineq"]))) / 100.0
        assert np.abs(gf).max() / s_d <= 1e-5
        assert np.abs(prob.residual_eq(res.x_opt)).max() <= 1e-6
        assert np.max(prob.residual_ineq(res.x_opt)) <= 1e-6
