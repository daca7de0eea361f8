import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lvopf.devices import (BatteryUnit, Connection, DeviceError, EvUnit,
                           FlexLoad, PvUnit, ZipCoefficients, battery_block,
                           device_current, ev_block, flex_load_block,
                           nominal_reactive, pv_block, zip_active_demand)


def make_ev(**kw):
    p_c = np.zeros(24)
    p_c[19:22] = 8.0
    args = dict(p_rate=8.0, e_cap=24.0)
    args.update(kw)
    return EvUnit("ev", Connection("B", "a"), p_c, **args)


class TestZip:
    def test_sums_validated(self):
        with pytest.raises(DeviceError):
            ZipCoefficients(0.5, 0.5, 0.5)
        with pytest.raises(DeviceError):
            ZipCoefficients(1.2, -0.4, 0.2)

    def test_identity_at_nominal_voltage(self):
        z = ZipCoefficients(0.3, 0.3, 0.4)
        assert zip_active_demand(1.0, 1.0, z) == pytest.approx(1.0)

    def test_node15_coefficients(self):
        # direct evaluation with the node-15 flexible-load triple
        z = ZipCoefficients(0.6, 0.1, 0.3)
        assert zip_active_demand(2.0, 0.95, z) == pytest.approx(1.8730)

    def test_constant_power_component_only(self):
        z = ZipCoefficients(0.0, 0.0, 1.0)
        for u in (0.5, 0.9, 1.3):
            assert zip_active_demand(1.0, u, z) == pytest.approx(1.0)

    def test_restriction_renormalizes(self):
        z = ZipCoefficients(0.6, 0.1, 0.3).restricted_to(("P",))
        assert z.p_triple() == pytest.approx((0.0, 0.0, 1.0))
        z2 = ZipCoefficients(0.6, 0.1, 0.3).restricted_to(("Z", "I"))
        assert sum(z2.p_triple()) == pytest.approx(1.0)
        assert z2.p_triple()[2] == 0.0

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_identity_property(self, a, b):
        if a + b > 1:
            a, b = a / (a + b), b / (a + b)
        z = ZipCoefficients(a, b, max(0.0, 1 - a - b))
        assert zip_active_demand(3.7, 1.0, z) == pytest.approx(3.7, rel=1e-9)


class TestReactive:
    def test_unity_pf(self):
        assert nominal_reactive(1.0, 1.0, +1) == pytest.approx(0.0)

    def test_reference_pf(self):
        q = nominal_reactive(1.0, 0.95, +1)
        assert q == pytest.approx(0.3286841051788631, rel=1e-9)

    def test_leading_sign(self):
        q = nominal_reactive(1.0, 0.95, -1)
        assert q == pytest.approx(-0.3286841051788631, rel=1e-9)

    def test_rejects_bad_pf(self):
        with pytest.raises(DeviceError):
            nominal_reactive(1.0, 0.0)


class TestDeviceCurrent:
    def test_pure_active_nominal(self):
        assert device_current(1.0, 0.0, 1 + 0j) == pytest.approx(1 + 0j)

    def test_pure_reactive(self):
        assert device_current(0.0, 1.0, 1 + 0j) == pytest.approx(0 - 1j)

    def test_depressed_voltage(self):
        i = device_current(1.0, 0.32868, 0.95 + 0j)
        assert i.real == pytest.approx(1.0 * 0.95 / 0.9025)
        assert i.imag == pytest.approx(-0.32868 * 0.95 / 0.9025)

    def test_zero_voltage_rejected(self):
        with pytest.raises(DeviceError):
            device_current(1.0, 0.0, 0j)

    @given(st.floats(-10, 10), st.floats(-10, 10),
           st.complex_numbers(min_magnitude=1e-3, max_magnitude=10,
                              allow_nan=False, allow_infinity=False))
    def test_power_recovery(self, p, q, u):
        i = device_current(p, q, u)
        p_back = u.real * i.real + u.imag * i.imag
        q_back = u.imag * i.real - u.real * i.imag
        assert p_back == pytest.approx(p, abs=1e-9 * max(1, abs(p)) * 10)
        assert q_back == pytest.approx(q, abs=1e-9 * max(1, abs(q)) * 10)


class TestFlexLoadBlock:
    def make(self, m_fl=0.1, eshift=False, tshift=False):
        T = 24
        fixed = np.full(T, 0.5)
        flex = np.full(T, 0.5)
        esh = np.full(T, 0.2) if eshift else None
        tsh = None
        p_sl, A = 0.0, 0
        if tshift:
            tsh = np.zeros(T)
            tsh[[3, 10, 20]] = 0.8
            p_sl, A = 0.8, 3
        return FlexLoad("fl", Connection("B", "a"), fixed, flex, esh, tsh,
                        p_sl=p_sl, active_periods=A, m_fl=m_fl)

    def test_zero_alteration_when_inflexible(self):
        blk = flex_load_block(self.make(m_fl=0.0))
        assert np.all(blk.od1_ub == 0.0)
        assert np.all(blk.ud1_ub == 0.0)

    def test_eshift_net_zero_holds_for_constructed_alterations(self):
        blk = flex_load_block(self.make(eshift=True))
        od2 = np.zeros(24)
        ud2 = np.zeros(24)
        od2[2], ud2[7] = 0.01, 0.01
        assert np.sum(od2 - ud2) == pytest.approx(0.0)
        assert np.all(od2 <= blk.od2_ub + 1e-12)

    def test_tshift_carries_block_exactly_a_periods(self):
        blk = flex_load_block(self.make(tshift=True))
        assert blk.has_tshift
        assert blk.active_periods == 3
        delta = np.zeros(24)
        delta[[1, 2, 3]] = 1.0
        eff = blk.effective_nominal(delta=delta)
        on = eff - blk.base
        assert np.count_nonzero(on) == 3
        assert np.allclose(on[on > 0], blk.p_sl)

    def test_too_many_active_periods_rejected(self):
        load = self.make()
        load.active_periods = 25
        load.p_sl = 0.8
        with pytest.raises(DeviceError):
            flex_load_block(load)


class TestPvBlock:
    def make(self, inverter="one_phase", m_pv=0.2):
        s = np.zeros(24)
        s[8:16] = 4.0
        return PvUnit("pv", Connection("B", "a"), s, inverter=inverter,
                      m_pv=m_pv, pf_min=0.7, p_rate=4.0)

    def test_pcc_pythagoras(self):
        # S=5, P=4 on the capability circle leaves |Q| = 3
        q = math.sqrt(5.0 ** 2 - 4.0 ** 2)
        assert q == pytest.approx(3.0)

    def test_unity_pf_no_reactive(self):
        s_inv, pf = 4.0, 1.0
        p_inj = pf * s_inv
        q2 = s_inv ** 2 - p_inj ** 2
        assert q2 == pytest.approx(0.0)

    def test_curtailment_window(self):
        blk = pv_block(self.make())
        assert np.all(blk.s_lo == 0.8 * blk.s_hi)

    def test_three_phase_balancing_bounds(self):
        blk = pv_block(self.make(inverter="three_phase"))
        assert blk.inj_lo == pytest.approx(-4.0 / 3.0)
        assert blk.inj_hi == pytest.approx(+4.0 / 3.0)
        # at night the per-phase window stays open for circulation
        assert blk.s_hi[0] == 0.0


class TestEvBlock:
    def test_follows_profile_without_rescheduling(self):
        blk = ev_block(make_ev(reschedule=False))
        assert np.all(blk.oc_ub == 0.0)
        assert np.all(blk.uc_ub == 0.0)
        assert blk.neutrality_residual(np.zeros(24), np.zeros(24),
                                       np.zeros(24)) == pytest.approx(0.0)

    def test_neutrality_direct_evaluation(self):
        blk = ev_block(make_ev(reschedule=True, eta_c=0.9))
        oc = np.zeros(24)
        uc = np.zeros(24)
        oc[2], uc[20] = 1.0, 1.0
        assert blk.neutrality_residual(oc, uc, np.zeros(24)) \
            == pytest.approx(0.9 * (1.0 - 1.0))

    def test_demand_bounds_node11(self):
        blk = ev_block(make_ev(xi_v2g=0))
        free = ~blk.nc_mask
        assert np.all(blk.dem_lo[free] == 0.0)
        assert np.all(blk.dem_hi[free] == 8.0)

    def test_no_charge_window_zeroes_everything(self):
        ev = make_ev(no_charge_periods=range(8, 15), reschedule=True)
        blk = ev_block(ev)
        assert np.all(blk.oc_ub[8:15] == 0.0)
        assert np.all(blk.dem_hi[8:15] == 0.0)

    def test_infeasible_energy_window(self):
        ev = make_ev(no_charge_periods=[t for t in range(24) if not 19 <= t <= 21],
                     reschedule=True)
        ev.no_charge_periods = frozenset(range(0, 19)) | frozenset({22, 23})
        ev.p_rate = 2.0   # 3 free hours x 2 kW < 24 kWh scheduled
        with pytest.raises(DeviceError, match="energy"):
            ev_block(ev)

    def test_profile_charging_inside_window_rejected(self):
        with pytest.raises(DeviceError):
            make_ev(no_charge_periods=[20])


class TestBatteryBlock:
    def make(self, **kw):
        p_c = np.zeros(24)
        p_d = np.zeros(24)
        p_c[11:14] = 2.0
        p_d[19:22] = 2.0
        return BatteryUnit("bat", Connection("B", "a"), p_c, p_d,
                           p_rate=3.0, e_cap=8.0, **kw)

    def test_total_exchange_preserved_without_deviation(self):
        blk = battery_block(self.make(reschedule=True))
        z = np.zeros(24)
        assert blk.neutrality_residual(z, z, ods=z, uds=z) == pytest.approx(0.0)

    def test_under_discharge_bounded_by_profile(self):
        blk = battery_block(self.make(reschedule=True))
        assert np.all(blk.uds_ub <= blk.p_dis + 1e-12)
        assert blk.uds_ub[20] == pytest.approx(2.0)
        assert blk.uds_ub[2] == pytest.approx(0.0)

    def test_efficiency_weighted_neutrality(self):
        blk = battery_block(self.make(reschedule=True, eta_c=0.9, eta_d=0.9))
        oc = np.zeros(24)
        ods = np.zeros(24)
        oc[12] = 1.0            # extra charge 0.9 kWh stored
        ods[20] = 0.81          # extra discharge 0.81/0.9 = 0.9 kWh drawn
        z = np.zeros(24)
        assert blk.neutrality_residual(oc, z, ods=ods, uds=z) \
            == pytest.approx(0.0, abs=1e-12)
