"""Vectorized constraint families with analytic first and second derivatives.

Each family owns a contiguous row range of the equality or inequality vector
and produces residuals, Jacobian triplets (fixed sparsity, values re-evaluated)
and the Lagrangian-Hessian triplets for its rows. Voltage expressions are
affine forms over up to four voltage variables so wye (phase-neutral), delta
(phase-phase) and rotated-frame rotor constants all reduce to coefficients.
"""

import numpy as np
import scipy.sparse as sp


class LinearBuilder:
    """Accumulates rows of a big sparse linear system A x (=|<=) b.

    Per-period blocks add T rows at once: columns are (T,) index arrays and
    coefficients scalars or (T,) arrays.
    """

    def __init__(self, T):
        self.T = int(T)
        self._r = []
        self._c = []
        self._v = []
        self._rhs = []
        self.nrows = 0
        self.labels = []

    def add_block(self, terms, rhs=0.0, label=""):
        T = self.T
        base = self.nrows
        self.nrows += T
        rows = np.arange(base, base + T)
        for idx, coeff in terms:
            idx = np.broadcast_to(np.asarray(idx, int), (T,))
            co = np.broadcast_to(np.asarray(coeff, float), (T,))
            keep = idx >= 0
            if np.all(co == 0.0):
                continue
            self._r.append(rows[keep])
            self._c.append(idx[keep])
            self._v.append(co[keep])
        self._rhs.append(np.broadcast_to(np.asarray(rhs, float), (T,)))
        self.labels.append((label, base, T))
        return rows

    def add_row(self, cols, coeffs, rhs=0.0, label=""):
        r = self.nrows
        self.nrows += 1
        cols = np.asarray(cols, int)
        coeffs = np.asarray(coeffs, float)
        keep = cols >= 0
        self._r.append(np.full(int(keep.sum()), r))
        self._c.append(cols[keep])
        self._v.append(coeffs[keep])
        self._rhs.append(np.asarray([rhs], float))
        self.labels.append((label, r, 1))
        return r

    def build(self, n_vars):
        rows = np.concatenate(self._r) if self._r else np.zeros(0, int)
        cols = np.concatenate(self._c) if self._c else np.zeros(0, int)
        vals = np.concatenate(self._v) if self._v else np.zeros(0)
        A = sp.coo_matrix((vals, (rows, cols)),
                          shape=(self.nrows, n_vars)).tocsr()
        b = np.concatenate(self._rhs) if self._rhs else np.zeros(0)
        return LinearFamily(A, b, self.labels)


class LinearFamily:
    """r(x) = A x - b, used for both equalities and <=0 inequalities."""

    has_hessian = False

    def __init__(self, A, b, labels=()):
        self.A = A
        self.b = b
        self.nrows = A.shape[0]
        self.labels = list(labels)
        coo = A.tocoo()
        self._jr, self._jc, self._jv = coo.row, coo.col, coo.data

    def residual(self, x):
        return self.A @ x - self.b

    def jac_triplets(self, x):
        return self._jr, self._jc, self._jv

    def hess_triplets(self, x, lam):
        return None


class VoltageForm:
    """Affine complex form U = sum_k (CR + j CI)[k-th coefficient] * x[JV[k]].

    JV entries of -1 are inactive. Shared by several families.
    """

    def __init__(self, JV, CR, CI):
        self.JV = np.array(JV, int)
        self.CR = np.array(CR, float)
        self.CI = np.array(CI, float)
        self.CR[self.JV < 0] = 0.0
        self.CI[self.JV < 0] = 0.0
        self._JVs = np.maximum(self.JV, 0)

    def value(self, x):
        xv = x[self._JVs]
        return (self.CR * xv).sum(axis=1), (self.CI * xv).sum(axis=1)


class VmagFamily:
    """m^2 - Ure^2 - Uim^2 = 0 rows defining device voltage magnitudes."""

    has_hessian = True

    def __init__(self, jm, form):
        self.jm = np.asarray(jm, int)
        self.form = form
        self.nrows = len(self.jm)
        n, K = form.JV.shape
        rows = np.arange(n)
        self._jrows = np.concatenate([rows, np.repeat(rows, K)])
        self._jcols = np.concatenate([self.jm, form._JVs.ravel()])
        # hessian pattern: (m,m) plus the KxK voltage block
        hr, hc = [], []
        hr.append(self.jm); hc.append(self.jm)
        for a in range(K):
            for b in range(K):
                hr.append(form._JVs[:, a]); hc.append(form._JVs[:, b])
        self._hr = np.concatenate(hr)
        self._hc = np.concatenate(hc)

    def residual(self, x):
        ure, uim = self.form.value(x)
        return x[self.jm] ** 2 - ure ** 2 - uim ** 2

    def jac_triplets(self, x):
        ure, uim = self.form.value(x)
        dv = -2.0 * (ure[:, None] * self.form.CR + uim[:, None] * self.form.CI)
        dv[self.form.JV < 0] = 0.0
        vals = np.concatenate([2.0 * x[self.jm], dv.ravel()])
        return self._jrows, self._jcols, vals

    def hess_triplets(self, x, lam):
        n, K = self.form.JV.shape
        blocks = [2.0 * lam]
        for a in range(K):
            for b in range(K):
                w = -2.0 * lam * (self.form.CR[:, a] * self.form.CR[:, b]
                                  + self.form.CI[:, a] * self.form.CI[:, b])
                blocks.append(w)
        return self._hr, self._hc, np.concatenate(blocks)


class PowerLinkFamily:
    """F(x) * Z(m) - B(U, I) = 0 rows tying device power to voltage/current.

    F = f0 + sum fc[k] x[JF[k]] is the affine effective power (flexibility
    variables enter here), Z(m) = az m^2 + ai m + ap the ZIP polynomial in
    the device voltage magnitude (az=ai=0, ap=1 when no magnitude variable),
    and B the bilinear power form: active (sel=0) Ure*Ire + Uim*Iim, reactive
    (sel=1) Uim*Ire - Ure*Iim.
    """

    has_hessian = True

    def __init__(self, f0, JF, FC, az, ai, ap, jm, form, jire, jiim, sel):
        self.f0 = np.asarray(f0, float)
        self.JF = np.array(JF, int)
        self.FC = np.array(FC, float)
        self.FC[self.JF < 0] = 0.0
        self._JFs = np.maximum(self.JF, 0)
        self.az = np.asarray(az, float)
        self.ai = np.asarray(ai, float)
        self.ap = np.asarray(ap, float)
        self.jm = np.asarray(jm, int)
        self._jms = np.maximum(self.jm, 0)
        self.form = form
        self.jire = np.asarray(jire, int)
        self.jiim = np.asarray(jiim, int)
        self.sel = np.asarray(sel, bool)
        self.nrows = len(self.f0)
        n = self.nrows
        W = self.JF.shape[1]
        K = form.JV.shape[1]
        rows = np.arange(n)
        self._jrows = np.concatenate([np.repeat(rows, W), rows,
                                      np.repeat(rows, K), rows, rows])
        self._jcols = np.concatenate([self._JFs.ravel(), self._jms,
                                      form._JVs.ravel(), self.jire, self.jiim])
        hr, hc = [], []
        for k in range(W):                       # JF x m
            hr += [self._JFs[:, k], self._jms]
            hc += [self._jms, self._JFs[:, k]]
        hr.append(self._jms); hc.append(self._jms)   # m x m
        for k in range(K):                       # JV x I
            hr += [form._JVs[:, k], self.jire, form._JVs[:, k], self.jiim]
            hc += [self.jire, form._JVs[:, k], self.jiim, form._JVs[:, k]]
        self._hr = np.concatenate(hr)
        self._hc = np.concatenate(hc)
        self._has_m = self.jm >= 0

    def _terms(self, x):
        F = self.f0 + (self.FC * x[self._JFs]).sum(axis=1)
        m = np.where(self._has_m, x[self._jms], 1.0)
        Z = np.where(self._has_m, self.az * m ** 2 + self.ai * m + self.ap, 1.0)
        dZ = np.where(self._has_m, 2 * self.az * m + self.ai, 0.0)
        d2Z = np.where(self._has_m, 2 * self.az, 0.0)
        return F, m, Z, dZ, d2Z

    def residual(self, x):
        F, m, Z, _, _ = self._terms(x)
        ure, uim = self.form.value(x)
        ire, iim = x[self.jire], x[self.jiim]
        B = np.where(self.sel, uim * ire - ure * iim, ure * ire + uim * iim)
        return F * Z - B

    def jac_triplets(self, x):
        F, m, Z, dZ, _ = self._terms(x)
        ure, uim = self.form.value(x)
        ire, iim = x[self.jire], x[self.jiim]
        dF = self.FC * Z[:, None]
        dm = F * dZ
        # dB/dJV[k] = CR*ire + CI*iim (active) | CI*ire - CR*iim (reactive)
        s = self.sel[:, None]
        dV = -np.where(s, self.form.CI * ire[:, None] - self.form.CR * iim[:, None],
                       self.form.CR * ire[:, None] + self.form.CI * iim[:, None])
        dV[self.form.JV < 0] = 0.0
        dire = -np.where(self.sel, uim, ure)
        diim = -np.where(self.sel, -ure, uim)
        vals = np.concatenate([dF.ravel(), dm, dV.ravel(), dire, diim])
        return self._jrows, self._jcols, vals

    def hess_triplets(self, x, lam):
        F, m, Z, dZ, d2Z = self._terms(x)
        W = self.JF.shape[1]
        K = self.form.JV.shape[1]
        blocks = []
        for k in range(W):
            w = lam * self.FC[:, k] * dZ
            blocks += [w, w]
        blocks.append(lam * F * d2Z)
        s = self.sel
        for k in range(K):
            wre = -lam * np.where(s, self.form.CI[:, k], self.form.CR[:, k])
            wim = -lam * np.where(s, -self.form.CR[:, k], self.form.CI[:, k])
            blocks += [wre, wre, wim, wim]
        return self._hr, self._hc, np.concatenate(blocks)


class ProductFamily:
    """x[jp] - x[ja] * x[jb] = 0 (power-factor definition rows)."""

    has_hessian = True

    def __init__(self, jp, ja, jb):
        self.jp = np.asarray(jp, int)
        self.ja = np.asarray(ja, int)
        self.jb = np.asarray(jb, int)
        self.nrows = len(self.jp)
        rows = np.arange(self.nrows)
        self._jrows = np.concatenate([rows, rows, rows])
        self._jcols = np.concatenate([self.jp, self.ja, self.jb])
        self._hr = np.concatenate([self.ja, self.jb])
        self._hc = np.concatenate([self.jb, self.ja])

    def residual(self, x):
        return x[self.jp] - x[self.ja] * x[self.jb]

    def jac_triplets(self, x):
        ones = np.ones(self.nrows)
        vals = np.concatenate([ones, -x[self.jb], -x[self.ja]])
        return self._jrows, self._jcols, vals

    def hess_triplets(self, x, lam):
        return self._hr, self._hc, np.concatenate([-lam, -lam])


class PccFamily:
    """x[jq]^2 + x[jp]^2 - x[js]^2 = 0 (production capability circle)."""

    has_hessian = True

    def __init__(self, jq, jp, js):
        self.jq = np.asarray(jq, int)
        self.jp = np.asarray(jp, int)
        self.js = np.asarray(js, int)
        self.nrows = len(self.jq)
        rows = np.arange(self.nrows)
        self._jrows = np.concatenate([rows, rows, rows])
        self._jcols = np.concatenate([self.jq, self.jp, self.js])
        self._hr = self._jcols
        self._hc = self._jcols

    def residual(self, x):
        return x[self.jq] ** 2 + x[self.jp] ** 2 - x[self.js] ** 2

    def jac_triplets(self, x):
        vals = np.concatenate([2 * x[self.jq], 2 * x[self.jp], -2 * x[self.js]])
        return self._jrows, self._jcols, vals

    def hess_triplets(self, x, lam):
        two = 2.0 * lam
        return self._hr, self._hc, np.concatenate([two, two, -two])


class BallFamily:
    """w*(x[ja]^2 + x[jb]^2 - (cap + x[js])^2) <= 0 (voltage/thermal ball).

    Rows are conditioned by w = 1/max(1, cap)^2 so residual magnitudes stay
    O(1) even for generous ampacities.
    """

    has_hessian = True

    def __init__(self, ja, jb, js, cap):
        self.ja = np.asarray(ja, int)
        self.jb = np.asarray(jb, int)
        self.js = np.asarray(js, int)
        self.cap = np.asarray(cap, float)
        self.w = 1.0 / np.maximum(1.0, self.cap) ** 2
        self.nrows = len(self.ja)
        self._has_s = self.js >= 0
        self._jss = np.maximum(self.js, 0)
        rows = np.arange(self.nrows)
        self._jrows = np.concatenate([rows, rows, rows])
        self._jcols = np.concatenate([self.ja, self.jb, self._jss])
        self._hr = self._jcols
        self._hc = self._jcols

    def residual(self, x):
        s = np.where(self._has_s, x[self._jss], 0.0)
        return self.w * (x[self.ja] ** 2 + x[self.jb] ** 2
                         - (self.cap + s) ** 2)

    def jac_triplets(self, x):
        s = np.where(self._has_s, x[self._jss], 0.0)
        ds = np.where(self._has_s, -2.0 * self.w * (self.cap + s), 0.0)
        vals = np.concatenate([2 * self.w * x[self.ja],
                               2 * self.w * x[self.jb], ds])
        return self._jrows, self._jcols, vals

    def hess_triplets(self, x, lam):
        two = 2.0 * lam * self.w
        dss = np.where(self._has_s, -two, 0.0)
        return self._hr, self._hc, np.concatenate([two, two, dss])


class FamilyStack:
    """Equality or inequality side of the problem: families in row order."""

    def __init__(self, families):
        self.families = [f for f in families if f.nrows > 0]
        self.offsets = np.cumsum([0] + [f.nrows for f in self.families])
        self.nrows = int(self.offsets[-1]) if self.families else 0

    def residual(self, x):
        if not self.families:
            return np.zeros(0)
        return np.concatenate([f.residual(x) for f in self.families])

    def jacobian(self, x, n_vars):
        rows, cols, vals = [], [], []
        for off, f in zip(self.offsets, self.families):
            r, c, v = f.jac_triplets(x)
            rows.append(np.asarray(r) + off)
            cols.append(c)
            vals.append(v)
        if not rows:
            return sp.csr_matrix((0, n_vars))
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.nrows, n_vars)).tocsr()

    def hess_triplets(self, x, lam):
        rows, cols, vals = [], [], []
        for off, f in zip(self.offsets, self.families):
            if not f.has_hessian:
                continue
            out = f.hess_triplets(x, lam[off:off + f.nrows])
            if out is None:
                continue
            r, c, v = out
            rows.append(r)
            cols.append(c)
            vals.append(v)
        return rows, cols, vals
