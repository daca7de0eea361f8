"""Primal-dual interior-point solver for the assembled problem.

Monotone barrier reduction (Fiacco-McCormick) with fraction-to-boundary step
control, Newton steps on the perturbed KKT system via sparse LU, and a
primal/dual regularization ladder standing in for inertia correction (scipy's
LU exposes no inertia; indefiniteness shows up as factorization failure,
non-finite steps or stalled residual reduction and is answered by raising the
primal shift). Variable bounds are handled natively, general inequalities
through nonnegative slacks.

Also here: the power-flow-seeded initializer, the slack-pruning wrapper and
the relax-round-resolve loop for time-shiftable binaries.
"""

import time

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import opf_model
from . import powerflow as pfm


class SolverOptions:
    def __init__(self, opt_tol=1e-6, feas_tol=1e-6, max_iter=500, mu0=0.1,
                 mu_linear=0.2, mu_exponent=1.5, tau_min=0.99, kappa_eps=10.0,
                 s_max=100.0, init_all_slacks=False, prune_margin=0.05,
                 max_prune_rounds=3, verbose=False):
        self.opt_tol = opt_tol
        self.feas_tol = feas_tol
        self.max_iter = max_iter
        self.mu0 = mu0
        self.mu_linear = mu_linear
        self.mu_exponent = mu_exponent
        self.tau_min = tau_min
        self.kappa_eps = kappa_eps
        self.s_max = s_max
        self.init_all_slacks = init_all_slacks
        self.prune_margin = prune_margin
        self.max_prune_rounds = max_prune_rounds
        self.verbose = verbose


class SolveResult:
    def __init__(self, **kw):
        self.__dict__.update(kw)

    def summary(self):
        return {
            "status": self.status,
            "objective": self.objective,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "kkt_residual": self.kkt_residual,
            "feasibility_residual": self.feasibility_residual,
            "cost_breakdown": self.cost_breakdown,
        }


def initialize(problem, pf_tol=1e-10):
    """Power-flow-seeded starting point; flat start if the oracle diverges."""
    controls = opf_model.original_controls(problem)
    try:
        inj = pfm.injections_from_devices(problem.devices, controls)
        state = pfm.solve_power_flow(problem.net, inj, tol=pf_tol,
                                     horizon=problem.T)
    except pfm.PowerFlowError:
        state = None
    x0 = opf_model.initial_point(problem, state, slack_margin=1e-4)
    return x0, state


def prune_slacks(problem, pf_state, margin=0.05):
    """Indices of slack variables whose constraint holds with margin at the
    power-flow point; fixing them to zero shrinks the barrier problem."""
    if pf_state is None:
        return np.zeros(0, int)
    t_ = problem.tables
    vmin, vmax = problem.v_band
    from .network import COND_POS
    fixed = []
    for (b, z), idx in t_["sig_up"].items():
        mag = np.abs(pf_state.u[b, COND_POS[z], :])
        sel = mag <= vmax - margin
        fixed.append(idx[sel])
    for (b, z), idx in t_["sig_dn"].items():
        mag = np.abs(pf_state.u[b, COND_POS[z], :])
        sel = mag >= vmin + margin
        fixed.append(idx[sel])
    for (li, z), idx in t_["sig_th"].items():
        mag = np.abs(pf_state.i_line[li, COND_POS[z], :])
        sel = mag <= t_["amp"][li] * (1.0 - margin)
        fixed.append(idx[sel])
    return np.concatenate(fixed) if fixed else np.zeros(0, int)


def solve(problem, x0=None, opts=None, fixed_zero=None, bounds=None):
    """Interior-point solve; `fixed_zero` pins additional variables at 0 and
    `bounds` overrides (lb, ub) wholesale (copies are taken)."""
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    n = problem.n_vars
    lb = (bounds[0] if bounds else problem.lb).copy()
    ub = (bounds[1] if bounds else problem.ub).copy()
    if fixed_zero is not None and len(fixed_zero):
        lb[fixed_zero] = 0.0
        ub[fixed_zero] = 0.0
    if x0 is None:
        x0, _ = initialize(problem)
    x = np.clip(np.asarray(x0, float).copy(), lb, ub)

    free = (ub - lb) > 1e-12
    nf = int(free.sum())
    fl = np.flatnonzero(free)
    x[~free] = lb[~free]

    has_l = np.isfinite(lb[free])
    has_u = np.isfinite(ub[free])
    l_f = lb[free]
    u_f = ub[free]

    # strict interior push
    xf = x[free]
    gap = np.where(has_l & has_u, u_f - l_f, np.inf)
    push_l = np.where(has_l, np.minimum(1e-2 * np.maximum(1, np.abs(l_f)),
                                        1e-2 * np.where(np.isfinite(gap), gap, 1.0)),
                      0.0)
    push_u = np.where(has_u, np.minimum(1e-2 * np.maximum(1, np.abs(u_f)),
                                        1e-2 * np.where(np.isfinite(gap), gap, 1.0)),
                      0.0)
    xf = np.minimum(np.maximum(xf, np.where(has_l, l_f + push_l, -np.inf)),
                    np.where(has_u, u_f - push_u, np.inf))
    x[fl] = xf

    m_e = problem.n_eq
    m_i = problem.n_ineq

    # row scaling from the initial Jacobians, objective scaled to O(1)
    Je0 = problem.jac_eq(x)
    Ji0 = problem.jac_ineq(x)
    row_inf = lambda A: np.maximum(1.0, abs(A).max(axis=1).toarray().ravel()) \
        if A.shape[0] else np.zeros(0)
    d_e = 1.0 / row_inf(Je0)
    d_i = 1.0 / row_inf(Ji0)
    f0 = problem.objective(x)
    s_f = 1.0 / max(1.0, abs(f0))
    g_obj = s_f * problem.gradient()[free]

    De = sp.diags(d_e)
    Di = sp.diags(d_i)

    def eval_all(xv):
        ce = d_e * problem.residual_eq(xv)
        ci = d_i * problem.residual_ineq(xv)
        Je = (De @ problem.jac_eq(xv)).tocsr()[:, fl]
        Ji = (Di @ problem.jac_ineq(xv)).tocsr()[:, fl]
        return ce, ci, Je, Ji

    ce, ci, Je, Ji = eval_all(x)
    s = np.maximum(-ci, 1e-4)
    y_e = np.zeros(m_e)
    y_i = np.full(m_i, 1e-2)
    mu = opts.mu0
    z_l = np.where(has_l, np.clip(mu / np.maximum(x[fl] - l_f, 1e-8),
                                  1e-8, 1e8), 0.0)
    z_u = np.where(has_u, np.clip(mu / np.maximum(u_f - x[fl], 1e-8),
                                  1e-8, 1e8), 0.0)

    def hess(xv, ye, yi):
        H = problem.hess_lagrangian(xv, d_e * ye, d_i * yi)
        return H[fl][:, fl]

    def kkt_error(xv, sv, ye, yi, zl, zu, Je_, Ji_, ce_, ci_, mu_):
        xfv = xv[fl]
        r_d = g_obj + Je_.T @ ye + Ji_.T @ yi - zl + zu
        s_d = max(opts.s_max,
                  (np.abs(ye).sum() + np.abs(yi).sum() + zl.sum() + zu.sum())
                  / max(1, m_e + m_i + nf)) / opts.s_max
        s_c = max(opts.s_max,
                  (zl.sum() + zu.sum() + yi.sum()) / max(1, nf + m_i)) / opts.s_max
        comp = []
        if m_i:
            comp.append(sv * yi - mu_)
        if has_l.any():
            comp.append((xfv[has_l] - l_f[has_l]) * zl[has_l] - mu_)
        if has_u.any():
            comp.append((u_f[has_u] - xfv[has_u]) * zu[has_u] - mu_)
        comp = np.concatenate(comp) if comp else np.zeros(0)
        err_d = np.abs(r_d).max() / s_d if nf else 0.0
        err_p = max(np.abs(ce_).max() if m_e else 0.0,
                    np.abs(ci_ + sv).max() if m_i else 0.0)
        err_c = (np.abs(comp).max() / s_c) if comp.size else 0.0
        return max(err_d, err_p, err_c), err_d, err_p, err_c, r_d

    def merit(xv, sv, ye, yi, zl, zu, ce_, ci_, Je_, Ji_, mu_):
        e, *_ = kkt_error(xv, sv, ye, yi, zl, zu, Je_, Ji_, ce_, ci_, mu_)
        return e

    delta_w = 0.0
    delta_w_last = 0.0
    status = "iteration_limit"
    it = 0
    forced = 0
    e_best = np.inf
    since_best = 0
    mu_prev = mu
    for it in range(1, opts.max_iter + 1):
        E_mu, err_d, err_p, err_c, r_d = kkt_error(x, s, y_e, y_i, z_l, z_u,
                                                   Je, Ji, ce, ci, mu)
        E_0, *_ = kkt_error(x, s, y_e, y_i, z_l, z_u, Je, Ji, ce, ci, 0.0)
        feas_unscaled = max(
            np.abs(problem.residual_eq(x)).max() if m_e else 0.0,
            np.maximum(problem.residual_ineq(x), 0.0).max() if m_i else 0.0)
        if opts.verbose:
            print(f"  it {it:3d} mu {mu:.1e} E0 {E_0:.2e} "
                  f"(d {err_d:.1e} p {err_p:.1e} c {err_c:.1e}) "
                  f"feas {feas_unscaled:.2e} dw {delta_w:.1e}")
        if E_0 <= opts.opt_tol and feas_unscaled <= opts.feas_tol:
            status = "converged"
            break
        while E_mu <= opts.kappa_eps * mu and mu > opts.opt_tol / 10.0:
            mu = max(opts.opt_tol / 10.0,
                     min(opts.mu_linear * mu, mu ** opts.mu_exponent))
            E_mu, err_d, err_p, err_c, r_d = kkt_error(
                x, s, y_e, y_i, z_l, z_u, Je, Ji, ce, ci, mu)
        if mu != mu_prev:
            e_best = np.inf
            since_best = 0
            mu_prev = mu
        # stall watchdog: cycling near nonconvex curvature is broken by
        # damping the Hessian (inertia-correction stand-in)
        if E_mu < 0.99 * e_best:
            e_best = E_mu
            since_best = 0
        else:
            since_best += 1
            if since_best >= 10:
                delta_w = max(3.0 * max(delta_w_last, delta_w), 1e-6)
                delta_w_last = delta_w
                since_best = 0
        tau = max(opts.tau_min, 1.0 - mu)

        xfv = x[fl]
        dist_l = np.maximum(xfv - l_f, 1e-14)
        dist_u = np.maximum(u_f - xfv, 1e-14)
        sig_l = np.where(has_l, z_l / dist_l, 0.0)
        sig_u = np.where(has_u, z_u / dist_u, 0.0)
        grad_phi = g_obj.copy()
        grad_phi[has_l] -= mu / dist_l[has_l]
        grad_phi[has_u] += mu / dist_u[has_u]
        rhs1 = -(grad_phi + Je.T @ y_e + Ji.T @ y_i)
        rhs2 = -ce
        rhs3 = -(ci + mu / y_i) if m_i else np.zeros(0)

        solved = False
        for attempt in range(8):
            delta_c = 1e-8 * max(mu, 1e-6)
            # objective is linear; the Lagrangian Hessian is constraint-only
            W = hess(x, y_e, y_i)
            Wd = W + sp.diags(sig_l + sig_u + delta_w)
            blocks = [[Wd, Je.T, Ji.T if m_i else None],
                      [Je, -delta_c * sp.identity(m_e), None],
                      [Ji if m_i else None, None,
                       -sp.diags(s / y_i + delta_c) if m_i else None]]
            if m_i == 0:
                blocks = [[Wd, Je.T], [Je, -delta_c * sp.identity(m_e)]]
            K = sp.bmat(blocks, format="csc")
            rhs = np.concatenate([rhs1, rhs2, rhs3])
            try:
                lu = spla.splu(K, permc_spec="COLAMD",
                               options=dict(SymmetricMode=True))
                d = lu.solve(rhs)
            except Exception:
                d = np.full(K.shape[0], np.nan)
            if np.all(np.isfinite(d)):
                solved = True
                break
            delta_w = max(1e-8, 10.0 * max(delta_w, delta_w_last))
        if not solved:
            status = "linear_solve_breakdown"
            break

        dx = d[:nf]
        dy_e = d[nf:nf + m_e]
        dy_i = d[nf + m_e:]
        ds = -(ci + s) - Ji @ dx if m_i else np.zeros(0)
        dz_l = np.where(has_l, mu / dist_l - z_l - sig_l * dx, 0.0)
        dz_u = np.where(has_u, mu / dist_u - z_u + sig_u * dx, 0.0)

        # fraction-to-boundary limits
        def max_step(v, dv, lo):
            bad = dv < 0
            if not bad.any():
                return 1.0
            return min(1.0, float(np.min(-tau * (v[bad] - lo[bad]) / dv[bad])))

        a_pri = 1.0
        if has_l.any():
            a_pri = min(a_pri, max_step(xfv[has_l], dx[has_l], l_f[has_l]))
        if has_u.any():
            a_pri = min(a_pri, max_step(-xfv[has_u], -dx[has_u], -u_f[has_u]))
        if m_i:
            a_pri = min(a_pri, max_step(s, ds, np.zeros(m_i)))
        a_dual = 1.0
        if has_l.any():
            a_dual = min(a_dual, max_step(z_l[has_l], dz_l[has_l],
                                          np.zeros(int(has_l.sum()))))
        if has_u.any():
            a_dual = min(a_dual, max_step(z_u[has_u], dz_u[has_u],
                                          np.zeros(int(has_u.sum()))))
        if m_i:
            a_dual = min(a_dual, max_step(y_i, dy_i, np.zeros(m_i)))

        phi0 = merit(x, s, y_e, y_i, z_l, z_u, ce, ci, Je, Ji, mu)
        alpha = a_pri
        accepted = False
        for _bt in range(8):
            x_t = x.copy()
            x_t[fl] = xfv + alpha * dx
            s_t = s + alpha * ds if m_i else s
            y_e_t = y_e + a_dual * dy_e
            y_i_t = y_i + a_dual * dy_i if m_i else y_i
            z_l_t = z_l + a_dual * dz_l
            z_u_t = z_u + a_dual * dz_u
            ce_t, ci_t, Je_t, Ji_t = eval_all(x_t)
            phi_t = merit(x_t, s_t, y_e_t, y_i_t, z_l_t, z_u_t, ce_t, ci_t,
                          Je_t, Ji_t, mu)
            if phi_t <= (1.0 - 1e-4 * alpha) * phi0 or alpha < 1e-3:
                accepted = phi_t <= (1.0 - 1e-4 * alpha) * phi0
                break
            alpha *= 0.5
        xf_t = x_t[fl]
        if has_u.any():
            ub_in = u_f[has_u]
            xf_t[has_u] = np.minimum(xf_t[has_u],
                                     ub_in - 1e-13 * np.maximum(1.0, np.abs(ub_in)))
        if has_l.any():
            lb_in = l_f[has_l]
            xf_t[has_l] = np.maximum(xf_t[has_l],
                                     lb_in + 1e-13 * np.maximum(1.0, np.abs(lb_in)))
        x_t[fl] = xf_t
        x, s = x_t, s_t
        y_e, y_i, z_l, z_u = y_e_t, y_i_t, z_l_t, z_u_t
        ce, ci, Je, Ji = ce_t, ci_t, Je_t, Ji_t
        z_l = np.where(has_l, np.clip(z_l, 1e-12, 1e12), 0.0)
        z_u = np.where(has_u, np.clip(z_u, 1e-12, 1e12), 0.0)
        if m_i:
            y_i = np.clip(y_i, 1e-12, 1e12)
            s = np.maximum(s, 1e-12)
        if accepted:
            forced = 0
            delta_w_last = delta_w
            delta_w = 0.0
        else:
            forced += 1
            if forced >= 2:
                delta_w = max(1e-8, 10.0 * max(delta_w, delta_w_last, 1e-8))
                forced = 0

    E_0, err_d, err_p, err_c, _ = kkt_error(x, s, y_e, y_i, z_l, z_u, Je, Ji,
                                            ce, ci, 0.0)
    feas = max(np.abs(problem.residual_eq(x)).max() if m_e else 0.0,
               np.maximum(problem.residual_ineq(x), 0.0).max() if m_i else 0.0)
    if status == "iteration_limit" and E_0 <= opts.opt_tol and feas <= opts.feas_tol:
        status = "converged"

    decoded = opf_model.decode_state(problem, x)
    result = SolveResult(
        x_opt=x,
        objective=problem.objective(x),
        cost_breakdown=problem.cost_breakdown(x),
        kkt_residual=float(E_0),
        dual_residual=float(err_d),
        feasibility_residual=float(feas),
        complementarity=float(err_c),
        iterations=it,
        wall_time=time.perf_counter() - t_start,
        status=status,
        mu_final=mu,
        controls=decoded["controls"],
        voltages=decoded["voltages"],
        line_currents=decoded["line_currents"],
        demands=decoded["demands"],
        multipliers={"y_eq": d_e * y_e, "y_ineq": d_i * y_i,
                     "z_l": z_l, "z_u": z_u},
        scaling={"rows_eq": d_e, "rows_ineq": d_i, "objective": s_f},
        free_mask=free,
        violation_total=problem.violation_total(x),
    )
    return result


def solve_with_pruning(problem, opts=None, x0=None, pf_state=None,
                       bounds=None):
    """PF-screened slack pruning with violated-slack re-addition rounds."""
    opts = opts or SolverOptions()
    if x0 is None:
        x0, pf_state = initialize(problem)
    fixed = prune_slacks(problem, pf_state, margin=opts.prune_margin)
    slack_of_row = problem.tables["ineq_slack"]
    rounds = 0
    while True:
        res = solve(problem, x0=x0, opts=opts, fixed_zero=fixed, bounds=bounds)
        rounds += 1
        if rounds > opts.max_prune_rounds or not len(fixed):
            break
        viol_rows = np.flatnonzero(problem.residual_ineq(res.x_opt)
                                   > opts.feas_tol)
        if not len(viol_rows):
            break
        bad_slacks = slack_of_row[viol_rows]
        bad_slacks = bad_slacks[bad_slacks >= 0]
        refix = np.setdiff1d(fixed, bad_slacks)
        if len(refix) == len(fixed):
            break
        fixed = refix
        x0 = res.x_opt
    res.prune_rounds = rounds
    res.pruned_slacks = int(len(fixed))
    return res


def solve_schedule(problem, opts=None, x0=None, pf_state=None, prune=True):
    """Full solve including the relax-round-resolve pass for time-shiftable
    load binaries: solve the continuous relaxation, round the A largest
    activations to one, fix, re-solve."""
    opts = opts or SolverOptions()
    runner = solve_with_pruning if prune else (
        lambda p, opts=None, x0=None, pf_state=None, bounds=None:
        solve(p, x0=x0, opts=opts, bounds=bounds))
    res = runner(problem, opts=opts, x0=x0, pf_state=pf_state)
    tshift = [(load, problem.dev_index[load.id]["delta"])
              for load in problem.devices.loads
              if problem.dev_index[load.id]["delta"] is not None]
    if not tshift:
        return res
    lb = problem.lb.copy()
    ub = problem.ub.copy()
    x0b = res.x_opt.copy()
    for load, idx in tshift:
        a = problem.dev_index[load.id]["block"].active_periods
        vals = res.x_opt[idx]
        order = np.lexsort((np.arange(len(vals)), -vals))
        chosen = np.sort(order[:a])
        fix = np.zeros(len(vals))
        fix[chosen] = 1.0
        lb[idx] = fix
        ub[idx] = fix
        x0b[idx] = fix
    res2 = runner(problem, opts=opts, x0=x0b, pf_state=pf_state,
                  bounds=(lb, ub))
    res2.rounding = {load.id: np.flatnonzero(lb[idx] > 0.5).tolist()
                     for load, idx in tshift}
    res2.relaxation_objective = res.objective
    return res2
