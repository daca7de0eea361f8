"""Flat variable vector layout for the multi-period problem.

Every variable carries a kind, an owner label, a phase tag and a period, and
is allocated in homogeneous blocks. The bijection (kind, owner, phase, t)
<-> flat position backs the statistics dump and the state decoder.
"""

import numpy as np

KINDS = (
    "voltage_re", "voltage_im", "bus_vmag",
    "current_re", "current_im",
    "dev_current_re", "dev_current_im", "dev_vmag",
    "S_inv", "P_inj", "Q_PV", "pf", "Q_PV_pos", "Q_PV_neg",
    "P_Od1", "P_Ud1", "P_Od2", "P_Ud2", "delta_ts",
    "P_demand", "P_Oc", "P_Uc", "P_ds", "P_Ods", "P_Uds",
    "P_import", "P_export", "Q_import", "Q_export",
    "sigma_up", "sigma_down", "sigma_thermal",
)
KIND_CODE = {k: i for i, k in enumerate(KINDS)}


class VariableSpace:
    def __init__(self, horizon):
        self.T = int(horizon)
        self.n = 0
        self._lb = []
        self._ub = []
        self._kind = []
        self._owner = []
        self._phase = []
        self._period = []

    def add(self, kind, count, lb, ub, owner="", phase="", periods=None):
        """Allocate `count` contiguous variables of one kind.

        lb/ub may be scalars or arrays of length `count`; `periods` is the
        period tag per variable (defaults to 0..count-1 when count == T).
        Returns the flat index array.
        """
        code = KIND_CODE[kind]
        idx = np.arange(self.n, self.n + count)
        self.n += count
        self._lb.append(np.broadcast_to(np.asarray(lb, float), (count,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, float), (count,)).copy())
        self._kind.append(np.full(count, code, np.int16))
        self._owner.extend([owner] * count)
        self._phase.extend([phase] * count)
        if periods is None:
            periods = np.arange(count) if count == self.T else np.zeros(count, int)
        self._period.append(np.broadcast_to(np.asarray(periods, int), (count,)).copy())
        return idx

    def add_per_period(self, kind, lb, ub, owner="", phase=""):
        """One variable per period; bounds may be (T,) arrays."""
        return self.add(kind, self.T, lb, ub, owner, phase,
                        periods=np.arange(self.T))

    def finalize(self):
        self.lb = np.concatenate(self._lb) if self._lb else np.zeros(0)
        self.ub = np.concatenate(self._ub) if self._ub else np.zeros(0)
        self.kind = np.concatenate(self._kind) if self._kind else np.zeros(0, np.int16)
        self.period = np.concatenate(self._period) if self._period else np.zeros(0, int)
        self.owner = np.asarray(self._owner, object)
        self.phase = np.asarray(self._phase, object)
        if np.any(self.lb > self.ub + 1e-15):
            bad = int(np.argmax(self.lb > self.ub + 1e-15))
            raise ValueError(
                f"inconsistent bounds at var {bad} "
                f"({KINDS[self.kind[bad]]}/{self.owner[bad]}): "
                f"[{self.lb[bad]}, {self.ub[bad]}]")
        return self

    def counts_by_kind(self):
        out = {}
        for code, name in enumerate(KINDS):
            c = int(np.sum(self.kind == code))
            if c:
                out[name] = c
        return out
