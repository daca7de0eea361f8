"""Case runner: single solves, Monte Carlo sweeps and paired comparisons.

Each Monte Carlo draw scales every load and PV profile by an independent
uniform factor in [1-p, 1+p], rebuilds and solves the problem from a
power-flow-seeded start, validates the solution against the oracle, and
aggregates. Fixed seeds make reports reproducible regardless of worker
count: run k always draws from SeedSequence([seed, k]).
"""

import json
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import devices as dv
from . import network as nw
from . import opf_model, powerflow, profiles, scenarios, solver
from .phasors import PHASES
from .network import COND_POS


def load_documents(net_doc, dev_doc, profiles_path=None):
    """Resolve document arguments (paths, JSON strings or dicts)."""
    net = net_doc if isinstance(net_doc, nw.NetworkModel) \
        else nw.load_network(net_doc)
    if isinstance(dev_doc, dv.DeviceSet):
        return net, dev_doc
    doc = dev_doc
    if not isinstance(doc, dict):
        try:
            with open(doc, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, TypeError):
            doc = json.loads(doc)
    cols = None
    ref = profiles_path or doc.get("profiles_csv")
    if ref:
        import os
        if profiles_path is None and not os.path.isabs(ref) \
                and isinstance(dev_doc, str) and os.path.exists(dev_doc):
            ref = os.path.join(os.path.dirname(os.path.abspath(dev_doc)), ref)
        try:
            cols = profiles.read_profile_table(ref)
        except OSError:
            cols = None
    devs = dv.load_devices(doc, profile_columns=cols,
                           base_power_kw=net.base_power_kw)
    return net, devs


class RunReport:
    """Per-run metrics plus aggregates over the converged runs."""

    def __init__(self, config, runs, detail=None):
        self.config = config
        self.runs = runs
        self.detail = detail
        conv = [r for r in runs if r["status"] == "converged"]
        self.n_runs = len(runs)
        self.n_converged = len(conv)
        self.n_validated = sum(1 for r in conv if r["validation_passed"])

        def agg(key):
            vals = np.array([r[key] for r in conv]) if conv else np.zeros(0)
            if not vals.size:
                return {"mean": None, "std": None}
            return {"mean": float(vals.mean()), "std": float(vals.std())}

        self.aggregates = {
            "objective": agg("objective"),
            "solve_time": agg("solve_time"),
            "average_voltage": agg("average_voltage"),
            "cumulative_violations": agg("cumulative_violations"),
            "average_demand": agg("average_demand"),
            "validation_deviation": agg("validation_deviation"),
        }

    @property
    def all_converged(self):
        return self.n_converged == self.n_runs

    @property
    def all_validated(self):
        return self.n_validated == self.n_runs

    def mean_objective(self):
        return self.aggregates["objective"]["mean"]

    def to_dict(self):
        return {
            "scenario": self.config.to_dict(),
            "n_runs": self.n_runs,
            "n_converged": self.n_converged,
            "n_validated": self.n_validated,
            "aggregates": self.aggregates,
            "runs": self.runs,
        }

    def canonical(self):
        """Deterministic serialization: identical for identical inputs and
        seeds (wall-clock timing fields are excluded)."""
        d = self.to_dict()
        d["aggregates"] = {k: v for k, v in d["aggregates"].items()
                           if k != "solve_time"}
        d["runs"] = [{k: v for k, v in r.items() if k != "solve_time"}
                     for r in d["runs"]]
        return json.dumps(d, sort_keys=True, default=str)


def _run_metrics(problem, res, report_v):
    mags = opf_model.rotated_voltage_magnitudes(problem, res.x_opt)
    decoded = opf_model.decode_state(problem, res.x_opt)
    served = []
    for load in problem.devices.loads:
        d = problem.dev_index[load.id]
        m = res.x_opt[d["m"]]
        az, ai, ap = load.zip.p_triple()
        p0 = decoded["controls"][load.id]["p0_eff"]
        served.append(p0 * (az * m ** 2 + ai * m + ap))
    avg_demand = float(np.mean(served)) if served else 0.0
    return {
        "status": res.status,
        "objective": res.objective,
        "cost_breakdown": res.cost_breakdown,
        "iterations": res.iterations,
        "solve_time": res.wall_time,
        "kkt_residual": res.kkt_residual,
        "feasibility_residual": res.feasibility_residual,
        "cumulative_violations": res.violation_total,
        "average_voltage": float(np.nanmean(mags)),
        "min_voltage": float(np.nanmin(mags)),
        "max_voltage": float(np.nanmax(mags)),
        "average_demand": avg_demand,
        "validation_passed": bool(report_v["passed"]) if report_v else False,
        "validation_deviation": (float(report_v["max_deviation"])
                                 if report_v else float("nan")),
    }


def run_one(net, devs, config, run_index, opts=None, validation_tol=1e-4,
            keep_detail=False):
    """One Monte Carlo draw: perturb, build, solve, validate."""
    rng = np.random.default_rng(np.random.SeedSequence([config.mc_seed,
                                                        run_index]))
    devs_k = scenarios.perturb_profiles(devs, rng, config.mc_perturbation)
    problem = opf_model.build_problem(net, devs_k, scenario=config)
    res = solver.solve_schedule(problem, opts=opts)
    report_v = None
    if res.status == "converged":
        report_v = powerflow.validate_opf_solution(problem.net,
                                                   problem.devices, res,
                                                   tol=validation_tol)
    rec = _run_metrics(problem, res, report_v)
    rec["run"] = run_index
    detail = None
    if keep_detail:
        detail = {
            "problem": problem,
            "result": res,
            "decoded": opf_model.decode_state(problem, res.x_opt),
            "magnitudes": opf_model.rotated_voltage_magnitudes(problem,
                                                               res.x_opt),
            "validation": report_v,
        }
    return rec, detail


def _worker(args):
    net_doc, dev_doc, profiles_path, config_dict, run_index, tol = args
    net, devs = load_documents(net_doc, dev_doc, profiles_path)
    config = scenarios.ScenarioConfig.from_dict(config_dict)
    rec, _ = run_one(net, devs, config, run_index, validation_tol=tol)
    return rec


def run_case(config, net_doc, dev_doc, profiles_path=None, workers=1,
             opts=None, validation_tol=1e-4):
    """Monte Carlo scenario study; returns a RunReport.

    The last run keeps full solution detail for report rendering.
    """
    net, devs = load_documents(net_doc, dev_doc, profiles_path)
    runs = []
    detail = None
    if workers > 1 and config.mc_runs > 1:
        args = [(net_doc, dev_doc, profiles_path, config.to_dict(), k,
                 validation_tol) for k in range(config.mc_runs - 1)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_worker, args))
        rec, detail = run_one(net, devs, config, config.mc_runs - 1,
                              opts=opts, validation_tol=validation_tol,
                              keep_detail=True)
        runs.append(rec)
    else:
        for k in range(config.mc_runs):
            keep = k == config.mc_runs - 1
            rec, det = run_one(net, devs, config, k, opts=opts,
                               validation_tol=validation_tol, keep_detail=keep)
            runs.append(rec)
            if keep:
                detail = det
    runs.sort(key=lambda r: r["run"])
    return RunReport(config, runs, detail)


def compare_inverter_modes(config, net_doc, dev_doc, profiles_path=None,
                           workers=1, opts=None):
    """Same scenario under single-phase vs balancing inverters.

    The balancing run uses the modified setup: unity PV power factor and the
    import/export price increased tenfold to reward self-sufficiency.
    """
    one = scenarios.ScenarioConfig.from_dict(
        dict(config.to_dict(), inverter_mode="1ph"))
    three = scenarios.ScenarioConfig.from_dict(
        dict(config.to_dict(), inverter_mode="3ph", ie_price_factor=10.0))
    rep1 = run_case(one, net_doc, dev_doc, profiles_path, workers, opts)
    rep3 = run_case(three, net_doc, dev_doc, profiles_path, workers, opts)
    v1 = rep1.aggregates["cumulative_violations"]["mean"]
    v3 = rep3.aggregates["cumulative_violations"]["mean"]
    return {
        "one_phase": rep1,
        "three_phase": rep3,
        "violations_1ph": v1,
        "violations_3ph": v3,
        "violation_ratio": (v3 / v1 if v1 else None),
    }


def compare_v2g_vs_balancing(net_doc, dev_doc, profiles_path=None,
                             config=None, workers=1, opts=None,
                             export_price=20.0):
    """V2G on single-phase inverters versus pure phase balancing.

    Idealized availability: EV no-charge windows are cleared and rescheduling
    enabled in both runs; the export price is raised to reward
    self-sufficiency. Returns remuneration costs and per-phase average
    voltage trajectories.
    """
    base = config or scenarios.ScenarioConfig(
        load_model="L1", network_model="N2", controllability="S6")
    over = {"reschedule": True, "t_nc_clear": True}
    v2g = scenarios.ScenarioConfig.from_dict(dict(
        base.to_dict(), inverter_mode="1ph",
        cost_overrides=dict(base.cost_overrides, c_export=export_price)))
    v2g.ev_overrides = dict(over, xi_v2g=1)
    bal = scenarios.ScenarioConfig.from_dict(dict(
        base.to_dict(), inverter_mode="3ph",
        cost_overrides=dict(base.cost_overrides, c_export=export_price)))
    bal.ev_overrides = dict(over, xi_v2g=0)
    rep_v2g = run_case(v2g, net_doc, dev_doc, profiles_path, workers, opts)
    rep_bal = run_case(bal, net_doc, dev_doc, profiles_path, workers, opts)

    def phase_trajectories(rep):
        if rep.detail is None:
            return None
        mags = rep.detail["magnitudes"]
        return {z: np.nanmean(mags[:, k, :], axis=0).tolist()
                for k, z in enumerate(PHASES)}

    def remuneration(rep):
        conv = [r for r in rep.runs if r["status"] == "converged"]
        if not conv:
            return None
        return float(np.mean([r["cost_breakdown"]["ev_rescheduling"]
                              + r["cost_breakdown"]["load_alteration"]
                              + r["cost_breakdown"]["pv_curtailment"]
                              + r["cost_breakdown"]["pv_reactive"]
                              for r in conv]))

    return {
        "v2g": rep_v2g,
        "balancing": rep_bal,
        "remuneration_v2g": remuneration(rep_v2g),
        "remuneration_balancing": remuneration(rep_bal),
        "voltage_by_phase_v2g": phase_trajectories(rep_v2g),
        "voltage_by_phase_balancing": phase_trajectories(rep_bal),
    }
