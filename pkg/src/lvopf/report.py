"""Result export: delimited tables, JSON and rendered figures.

Every export writes (a) the per-run metrics table, (b) per-period per-bus
rotated voltage magnitudes of the detail run, (c) the cost breakdown and
(d) device schedules before/after optimization, plus PNG figures alongside.
Columns are documented in OUTPUT_SCHEMA.md at the repository root. All
output is UTF-8 with a deterministic column order.
"""

import csv
import json
import os

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .phasors import PHASES

RUN_COLUMNS = ["run", "status", "objective", "iterations", "solve_time",
               "kkt_residual", "feasibility_residual",
               "cumulative_violations", "average_voltage", "min_voltage",
               "max_voltage", "average_demand", "validation_passed",
               "validation_deviation"]

COST_COLUMNS = ["run", "import_export", "pv_curtailment", "pv_reactive",
                "load_alteration", "ev_rescheduling", "violations", "total"]


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def export_results(report, fmt="csv", outdir="out"):
    """Write a RunReport to `outdir`; returns the list of files written."""
    os.makedirs(outdir, exist_ok=True)
    written = []

    def path(name):
        p = os.path.join(outdir, name)
        written.append(p)
        return p

    run_rows = [[_fmt(r.get(c)) for c in RUN_COLUMNS] for r in report.runs]
    cost_rows = [[r["run"]] + [_fmt(r["cost_breakdown"][c])
                               for c in COST_COLUMNS[1:]]
                 for r in report.runs]

    detail = report.detail
    voltage_rows = []
    schedule_rows = []
    if detail is not None:
        problem = detail["problem"]
        mags = detail["magnitudes"]
        net = problem.net
        for b, bus in enumerate(net.buses):
            for k, z in enumerate(PHASES):
                if np.isnan(mags[b, k, 0]):
                    continue
                for t in range(problem.T):
                    voltage_rows.append([bus.id, z, t,
                                         f"{mags[b, k, t]:.8f}"])
        bk = net.base_power_kw
        demands = detail["decoded"]["demands"]
        for dev in problem.devices.all_devices():
            before = dev.nominal_profile() if hasattr(dev, "nominal_profile") \
                else None
            if before is None:
                if hasattr(dev, "p_discharge"):
                    before = dev.p_charge - dev.p_discharge
                elif hasattr(dev, "p_charge"):
                    before = dev.p_charge
                else:
                    before = dev.s_gen
            after = demands[dev.id]
            kind = type(dev).__name__
            if kind == "PvUnit":
                after = -np.asarray(after)   # report injection as positive
            for t in range(problem.T):
                schedule_rows.append([dev.id, kind, t,
                                      f"{before[t] * bk:.6f}",
                                      f"{float(np.asarray(after)[t]) * bk:.6f}"])

    if fmt == "json":
        with open(path("report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        with open(path("runs.json"), "w", encoding="utf-8") as fh:
            json.dump(report.runs, fh, indent=1, sort_keys=True)
        with open(path("voltages.json"), "w", encoding="utf-8") as fh:
            json.dump([{"bus": r[0], "phase": r[1], "period": r[2],
                        "magnitude_pu": float(r[3])} for r in voltage_rows],
                      fh, indent=1)
        with open(path("schedules.json"), "w", encoding="utf-8") as fh:
            json.dump([{"device": r[0], "type": r[1], "period": r[2],
                        "before_kw": float(r[3]), "after_kw": float(r[4])}
                       for r in schedule_rows], fh, indent=1)
    else:
        _write_csv(path("runs.csv"), RUN_COLUMNS, run_rows)
        _write_csv(path("costs.csv"), COST_COLUMNS, cost_rows)
        _write_csv(path("voltages.csv"),
                   ["bus", "phase", "period", "magnitude_pu"], voltage_rows)
        _write_csv(path("schedules.csv"),
                   ["device", "type", "period", "before_kw", "after_kw"],
                   schedule_rows)
        with open(path("report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)

    written += render_figures(report, outdir)
    return written


def render_figures(report, outdir):
    """Voltage trajectories, schedules and cost breakdown as PNG files."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    detail = report.detail
    if detail is not None:
        problem = detail["problem"]
        mags = detail["magnitudes"]
        T = problem.T
        fig, ax = plt.subplots(figsize=(8, 4.5))
        hours = np.arange(T)
        for k, z in enumerate(PHASES):
            col = mags[:, k, :]
            if np.all(np.isnan(col)):
                continue
            mean = np.nanmean(col, axis=0)
            ax.plot(hours, mean, label=f"phase {z}")
            ax.fill_between(hours, np.nanmin(col, axis=0),
                            np.nanmax(col, axis=0), alpha=0.15)
        vmin, vmax = problem.v_band
        ax.axhline(vmin, color="r", ls="--", lw=0.8)
        ax.axhline(vmax, color="r", ls="--", lw=0.8)
        ax.set_xlabel("hour")
        ax.set_ylabel("voltage magnitude (p.u.)")
        ax.set_title("Per-phase voltage range across buses")
        ax.legend()
        fig.tight_layout()
        p = os.path.join(outdir, "voltages.png")
        fig.savefig(p, dpi=130)
        plt.close(fig)
        written.append(p)

        bk = problem.net.base_power_kw
        demands = detail["decoded"]["demands"]
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for dev in problem.devices.all_devices():
            if hasattr(dev, "nominal_profile"):
                before = dev.nominal_profile()
            elif hasattr(dev, "p_discharge"):
                before = dev.p_charge - dev.p_discharge
            elif hasattr(dev, "p_charge"):
                before = dev.p_charge
            else:
                before = dev.s_gen
            after = np.asarray(demands[dev.id], float)
            if type(dev).__name__ == "PvUnit":
                after = -after
            line, = ax.plot(hours, after * bk, lw=1.4)
            ax.plot(hours, np.asarray(before) * bk, lw=0.9, ls=":",
                    color=line.get_color(), alpha=0.8)
        ax.set_xlabel("hour")
        ax.set_ylabel("power (kW)")
        ax.set_title("Device schedules: optimized (solid) vs original (dotted)")
        fig.tight_layout()
        p = os.path.join(outdir, "schedules.png")
        fig.savefig(p, dpi=130)
        plt.close(fig)
        written.append(p)

    conv = [r for r in report.runs if r["status"] == "converged"]
    if conv:
        keys = COST_COLUMNS[1:-1]
        means = [float(np.mean([r["cost_breakdown"][k] for r in conv]))
                 for k in keys]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(range(len(keys)), means)
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=30, ha="right")
        ax.set_ylabel("mean cost (EUR)")
        ax.set_title("Cost breakdown over converged runs")
        fig.tight_layout()
        p = os.path.join(outdir, "costs.png")
        fig.savefig(p, dpi=130)
        plt.close(fig)
        written.append(p)
    return written


def export_comparison(comparison, outdir, names=("a", "b"), fmt="csv"):
    """Write two paired RunReports to subdirectories plus a summary JSON."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    summary = {}
    for key, val in comparison.items():
        if isinstance(val, (int, float, str, type(None), dict, list)) \
                and not hasattr(val, "to_dict"):
            summary[key] = val
    reports = [(k, v) for k, v in comparison.items() if hasattr(v, "to_dict")]
    for k, rep in reports:
        sub = os.path.join(outdir, k)
        written += export_results(rep, fmt=fmt, outdir=sub)
        summary[k] = {"aggregates": rep.aggregates,
                      "n_converged": rep.n_converged,
                      "n_runs": rep.n_runs}
    p = os.path.join(outdir, "comparison.json")
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True, default=str)
    written.append(p)
    return written
