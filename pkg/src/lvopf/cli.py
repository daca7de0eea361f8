"""Command-line front end.

Subcommands: solve, pf, sweep, compare-inverters, compare-v2g, transform.
Every flag can also come from a JSON config file (--config); explicit flags
win. Exit codes: 0 all runs converged and validated, 2 converged but
validation failed, 3 convergence failures present.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import bundled, network, opf_model, powerflow, report, runner
from . import scenarios, synthetic
from .network import COND_POS
from .phasors import PHASES


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _scenario_from_arg(arg, args):
    """--scenario accepts a JSON file or a shorthand like L1,N3,S5,1ph."""
    d = {}
    if arg:
        if os.path.exists(arg):
            d = _load_json(arg)
        else:
            for tok in arg.split(","):
                tok = tok.strip()
                if tok.upper().startswith("L"):
                    d["load_model"] = tok.upper()
                elif tok.upper().startswith("N"):
                    d["network_model"] = tok.upper()
                elif tok.upper().startswith("S"):
                    d["controllability"] = tok.upper()
                elif tok.lower() in ("1ph", "3ph"):
                    d["inverter_mode"] = tok.lower()
                elif tok.lower() in ("wye", "delta", "mixed"):
                    d["connection_override"] = tok.lower()
                else:
                    raise SystemExit(f"unrecognized scenario token {tok!r}")
    mc = d.setdefault("monte_carlo", {})
    if args.runs is not None:
        mc["runs"] = args.runs
    if args.seed is not None:
        mc["seed"] = args.seed
    if args.perturbation is not None:
        mc["perturbation"] = args.perturbation
    return scenarios.ScenarioConfig.from_dict(d)


def _common(sub, with_scenario=True):
    sub.add_argument("--net", default=None, help="network document (JSON)")
    sub.add_argument("--devices", default=None, help="device document (JSON)")
    sub.add_argument("--profiles", default=None,
                     help="profile table (CSV, kW columns per device)")
    if with_scenario:
        sub.add_argument("--scenario", default=None,
                         help="scenario JSON file or shorthand, e.g. L1,N3,S5,1ph")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--runs", type=int, default=None)
    sub.add_argument("--perturbation", type=float, default=None,
                     help="Monte Carlo profile scaling fraction (e.g. 0.1)")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--format", choices=("csv", "json"), default="csv")
    sub.add_argument("--config", default=None,
                     help="JSON file mirroring any flag")


def _apply_config(args):
    if getattr(args, "config", None):
        cfg = _load_json(args.config)
        for k, v in cfg.items():
            key = k.replace("-", "_")
            if getattr(args, key, None) in (None, False):
                setattr(args, key, v)
    if args.net is None:
        args.net = bundled.default_network_path()
    if args.devices is None:
        args.devices = bundled.default_devices_path()
    return args


def _exit_code(*reports):
    runs = [r for rep in reports for r in rep.runs]
    if any(r["status"] != "converged" for r in runs):
        return 3
    if any(not r["validation_passed"] for r in runs):
        return 2
    return 0


def cmd_solve(args):
    args = _apply_config(args)
    config = _scenario_from_arg(args.scenario, args)
    if args.stats:
        net, devs = runner.load_documents(args.net, args.devices, args.profiles)
        prob = opf_model.build_problem(net, devs, scenario=config)
        payload = {"problem": prob.stats(),
                   "reference_comparison": opf_model.table7_report(net, devs)}
        with open(args.stats, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        print(f"wrote {args.stats}")
        if args.stats_only:
            return 0
    rep = runner.run_case(config, args.net, args.devices, args.profiles,
                          workers=args.workers)
    if args.out:
        report.export_results(rep, fmt=args.format, outdir=args.out)
    agg = rep.aggregates
    print(f"runs {rep.n_runs} converged {rep.n_converged} "
          f"validated {rep.n_validated}")
    if agg["objective"]["mean"] is not None:
        print(f"objective {agg['objective']['mean']:.2f} EUR "
              f"+- {agg['objective']['std']:.2f} | "
              f"violations {agg['cumulative_violations']['mean']:.4f} p.u. | "
              f"avg voltage {agg['average_voltage']['mean']:.4f} p.u.")
    return _exit_code(rep)


def cmd_pf(args):
    args = _apply_config(args)
    config = _scenario_from_arg(args.scenario, args)
    net, devs = runner.load_documents(args.net, args.devices, args.profiles)
    if net.variant != config.network_model:
        net = network.apply_variant(net, config.network_model)
    devs = scenarios.apply_load_model(devs, config.load_model)
    if net.variant == "N5":
        from .devices import collapse_to_single_phase
        devs = collapse_to_single_phase(devs)
    inj = powerflow.injections_from_devices(devs)
    state = powerflow.solve_power_flow(net, inj)
    kcl = powerflow.kcl_residuals(net, state, inj)
    mags = np.abs(state.u[:, :3, :])
    avail = np.array([[f in b.phases for f in PHASES] for b in net.buses])
    mm = np.where(avail[:, :, None], mags, np.nan)
    print(f"power flow converged in {state.iterations} sweep iterations "
          f"(newton used: {state.used_newton})")
    print(f"kcl residual {kcl:.2e} p.u. | voltage range "
          f"[{np.nanmin(mm):.4f}, {np.nanmax(mm):.4f}] p.u.")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rows = []
        for b, bus in enumerate(net.buses):
            for k, z in enumerate(PHASES):
                if not avail[b, k]:
                    continue
                for t in range(state.u.shape[2]):
                    u = state.u[b, COND_POS[z], t]
                    rows.append([bus.id, z, t, f"{abs(u):.8f}",
                                 f"{u.real:.8f}", f"{u.imag:.8f}"])
        with open(os.path.join(args.out, "pf_voltages.csv"), "w",
                  encoding="utf-8", newline="") as fh:
            import csv as _csv
            w = _csv.writer(fh)
            w.writerow(["bus", "phase", "period", "magnitude_pu", "re", "im"])
            w.writerows(rows)
        print(f"wrote {args.out}/pf_voltages.csv")
    return 0


CASES = {
    "1": [dict(load_model=lm, network_model="N3", controllability="S5")
          for lm in scenarios.LOAD_MODELS],
    "2": [dict(load_model="L1", network_model=nm, controllability="S5")
          for nm in ("N1", "N2", "N3", "N4", "N5")],
    "3": [dict(load_model="L1", network_model="N2", controllability=s,
               inverter_mode=mode)
          for s in scenarios.CONTROLLABILITY
          for mode in ("1ph", "3ph")],
}


def cmd_sweep(args):
    args = _apply_config(args)
    reports = {}
    code = 0
    for spec in CASES[args.case]:
        base = _scenario_from_arg(args.scenario, args).to_dict()
        base.update(spec)
        if spec.get("inverter_mode") == "3ph":
            base["ie_price_factor"] = 10.0
        config = scenarios.ScenarioConfig.from_dict(base)
        key = "-".join([config.load_model, config.network_model,
                        config.controllability, config.inverter_mode])
        rep = runner.run_case(config, args.net, args.devices, args.profiles,
                              workers=args.workers)
        reports[key] = rep
        code = max(code, _exit_code(rep))
        agg = rep.aggregates["objective"]
        obj = "n/a" if agg["mean"] is None else f"{agg['mean']:.2f}"
        print(f"{key}: converged {rep.n_converged}/{rep.n_runs} "
              f"objective {obj} EUR")
        if args.out:
            report.export_results(rep, fmt=args.format,
                                  outdir=os.path.join(args.out, key))
    if args.out:
        summary = {k: r.to_dict() for k, r in reports.items()}
        with open(os.path.join(args.out, "sweep.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
    return code


def cmd_compare_inverters(args):
    args = _apply_config(args)
    config = _scenario_from_arg(args.scenario, args)
    cmp_ = runner.compare_inverter_modes(config, args.net, args.devices,
                                         args.profiles, workers=args.workers)
    print(f"violations 1ph {cmp_['violations_1ph']:.4f} p.u. vs "
          f"3ph {cmp_['violations_3ph']:.4f} p.u.")
    if args.out:
        report.export_comparison(cmp_, args.out, fmt=args.format)
    return _exit_code(cmp_["one_phase"], cmp_["three_phase"])


def cmd_compare_v2g(args):
    args = _apply_config(args)
    config = _scenario_from_arg(args.scenario, args)
    cmp_ = runner.compare_v2g_vs_balancing(args.net, args.devices,
                                           args.profiles, config=config,
                                           workers=args.workers,
                                           export_price=args.export_price)
    print(f"remuneration: v2g {cmp_['remuneration_v2g']:.2f} EUR vs "
          f"balancing {cmp_['remuneration_balancing']:.2f} EUR")
    if args.out:
        report.export_comparison(cmp_, args.out, fmt=args.format)
    return _exit_code(cmp_["v2g"], cmp_["balancing"])


def cmd_transform(args):
    args = _apply_config(args)
    if not args.multiphase:
        raise SystemExit("only --multiphase transforms are available")
    net_doc = _load_json(args.net)
    with open(args.devices, "r", encoding="utf-8") as fh:
        dev_doc = json.load(fh)
    if args.profiles or dev_doc.get("profiles_csv"):
        # inline the profiles so the transformed document stands alone
        from .profiles import read_profile_table
        ref = args.profiles or dev_doc.get("profiles_csv")
        if not os.path.isabs(ref) and not os.path.exists(ref):
            ref = os.path.join(os.path.dirname(os.path.abspath(args.devices)),
                               ref)
        cols = read_profile_table(ref)
        for e in dev_doc["devices"]:
            for key in ("profile", "p_charge", "p_discharge", "s_gen"):
                col = e.pop(f"{key}_col", None)
                if col:
                    e[key] = cols[col].tolist()
        dev_doc.pop("profiles_csv", None)
    net2, dev2 = synthetic.transform_multiphase(net_doc, dev_doc,
                                                seed=args.seed or 0)
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    np_ = os.path.join(outdir, "network_multiphase.json")
    dp = os.path.join(outdir, "devices_multiphase.json")
    with open(np_, "w", encoding="utf-8") as fh:
        json.dump(net2, fh, indent=1)
    with open(dp, "w", encoding="utf-8") as fh:
        json.dump(dev2, fh, indent=1)
    print(f"wrote {np_} and {dp}")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="opf",
        description="Multi-period OPF for unbalanced LV feeders with "
                    "residential flexibility")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="single scenario (optionally Monte Carlo)")
    _common(s)
    s.add_argument("--stats", default=None,
                   help="write problem statistics JSON to this path")
    s.add_argument("--stats-only", action="store_true")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("pf", help="power-flow oracle at original profiles")
    _common(s)
    s.set_defaults(func=cmd_pf)

    s = sub.add_parser("sweep", help="multi-scenario case study")
    s.add_argument("--case", choices=("1", "2", "3"), required=True)
    _common(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare-inverters",
                       help="single-phase vs balancing inverters")
    _common(s)
    s.set_defaults(func=cmd_compare_inverters)

    s = sub.add_parser("compare-v2g", help="V2G vs phase balancing")
    _common(s)
    s.add_argument("--export-price", type=float, default=20.0)
    s.set_defaults(func=cmd_compare_v2g)

    s = sub.add_parser("transform", help="document transforms")
    s.add_argument("--multiphase", action="store_true")
    _common(s, with_scenario=False)
    s.set_defaults(func=cmd_transform)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
