import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smrgrid.dynamics import (
    BessParams,
    BessState,
    DeviceSet,
    Event,
    LoadStep,
    MachineParams,
    SimConfig,
    SmrParams,
    apply_load_limiter,
    bess_power,
    bus_frequency_estimate,
    compute_droop,
    default_machines,
    governor_power_correction,
    rk4_step,
    run_transient,
    smr_flows_from_power,
    turbine_mechanical_power,
    write_result_csv,
)
from smrgrid.powerflow import solve
from smrgrid.network import build_ybus


SMR = SmrParams()


class TestTurbinePower:
    def test_zero_flows(self):
        assert turbine_mechanical_power(0.9, 1100, 850, 0, 0) == 0.0

    def test_unit_arithmetic(self):
        # 1000 kJ/kg * 50 kg/s = 50 MW at unity efficiency
        assert turbine_mechanical_power(1.0, 1000, 0, 50, 0) == pytest.approx(50.0)

    def test_linearity(self):
        p1 = turbine_mechanical_power(0.9, 1100, 850, 20, 10)
        p2 = turbine_mechanical_power(0.9, 1100, 850, 40, 20)
        assert p2 == pytest.approx(2 * p1)

    def test_negative_flow_rejected(self):
        with pytest.raises(ValueError):
            turbine_mechanical_power(0.9, 1100, 850, -1, 0)

    def test_flow_inversion_round_trip(self):
        m_hp, m_lp = smr_flows_from_power(50.0, SMR)
        back = turbine_mechanical_power(SMR.eta_t, SMR.dh_hp, SMR.dh_lp, m_hp, m_lp)
        assert back == pytest.approx(50.0, abs=1e-9)

    def test_declared_hp_split(self):
        m_hp, _ = smr_flows_from_power(50.0, SMR)
        expected = SMR.hp_fraction * (50_000.0 / SMR.eta_t) / SMR.dh_hp
        assert m_hp == pytest.approx(expected)


class TestDroop:
    def test_lower_boundary(self):
        assert compute_droop(0.0, 0.0, SMR) == SMR.m_min

    def test_upper_boundary(self):
        assert compute_droop(SMR.p_max, SMR.q_dot_max, SMR) == SMR.m_max

    def test_linear_midpoint(self):
        m = compute_droop(0.5 * SMR.p_max, 0.5 * SMR.q_dot_max, SMR)
        assert m == pytest.approx(0.5 * (SMR.m_min + SMR.m_max))

    def test_negative_input_rejected(self):
        with pytest.raises(ValueError):
            compute_droop(-1.0, 0.0, SMR)

    @given(
        p1=st.floats(0, SMR.p_max), p2=st.floats(0, SMR.p_max),
        q=st.floats(0, SMR.q_dot_max),
    )
    @settings(max_examples=200)
    def test_monotone_in_electrical_load(self, p1, p2, q):
        lo, hi = sorted([p1, p2])
        assert compute_droop(lo, q, SMR) <= compute_droop(hi, q, SMR)

    @given(
        q1=st.floats(0, SMR.q_dot_max), q2=st.floats(0, SMR.q_dot_max),
        p=st.floats(0, SMR.p_max),
    )
    @settings(max_examples=200)
    def test_monotone_in_thermal_load(self, q1, q2, p):
        lo, hi = sorted([q1, q2])
        assert compute_droop(p, lo, SMR) <= compute_droop(p, hi, SMR)

    @given(p=st.floats(0, SMR.p_max), q=st.floats(0, SMR.q_dot_max))
    @settings(max_examples=200)
    def test_range(self, p, q):
        assert SMR.m_min <= compute_droop(p, q, SMR) <= SMR.m_max


class TestGovernor:
    def test_zero_deviation(self):
        assert governor_power_correction(0.0, 0.05, 0.0) == 0.0

    def test_under_frequency_raises_power(self):
        assert governor_power_correction(-0.01, 0.05, 0.0) == pytest.approx(0.2)

    def test_deadband_suppresses(self):
        assert governor_power_correction(0.0002, 0.05, 0.0003) == 0.0

    def test_invalid_droop(self):
        with pytest.raises(ValueError):
            governor_power_correction(0.01, 0.0, 0.0)


class TestLoadLimiter:
    def test_within_band_unchanged(self):
        assert apply_load_limiter(0.50005, 0.5, 0.02, 0.005) == pytest.approx(0.50005)

    def test_upward_clamp(self):
        assert apply_load_limiter(0.9, 0.5, 0.02, 0.005) == pytest.approx(0.5001)

    def test_downward_clamp_symmetric(self):
        assert apply_load_limiter(0.1, 0.5, 0.02, 0.005) == pytest.approx(0.4999)

    def test_output_bounded_to_unit_interval(self):
        assert apply_load_limiter(5.0, 0.9999999, 100.0, 1.0) == 1.0
        assert apply_load_limiter(-5.0, 1e-9, 100.0, 1.0) == 0.0


class TestBess:
    def test_zero_signal_zero_output(self):
        state = BessState()
        params = BessParams()
        for _ in range(100):
            p, state = bess_power(0.0, state, params, 0.005)
            assert p == 0.0

    def test_pure_proportional(self):
        p, _ = bess_power(0.01, BessState(), BessParams(k_p=20, k_i=0), 0.005)
        assert p == pytest.approx(0.2)

    def test_pure_integral_closed_form(self):
        # Constant deviation 0.01 held 1 s, trapezoidal from a zero state:
        # integrator after n steps = 0.01*(n - 0.5)*dt.
        params = BessParams(k_p=0, k_i=5)
        dt = 0.005
        state = BessState()
        n = round(1.0 / dt)
        for _ in range(n):
            p, state = bess_power(0.01, state, params, dt)
        exact = 5 * 0.01 * (n - 0.5) * dt
        assert p == pytest.approx(exact, abs=1e-12)
        assert p == pytest.approx(0.05, abs=5 * 0.01 * dt)  # dt-order gap

    def test_saturation(self):
        p, _ = bess_power(0.5, BessState(), BessParams(k_p=20, k_i=5), 0.005)
        assert p == 1.0
        p, _ = bess_power(-0.5, BessState(), BessParams(k_p=20, k_i=5), 0.005)
        assert p == -1.0

    @given(
        st.lists(st.floats(-0.2, 0.2), min_size=1, max_size=300),
        st.floats(0.0, 50.0),
        st.floats(0.0, 20.0),
    )
    @settings(max_examples=100)
    def test_saturation_and_antiwindup_invariants(self, signal, k_p, k_i):
        params = BessParams(k_p=k_p, k_i=k_i)
        state = BessState()
        dt = 0.005
        for df in signal:
            prev_int = state.integrator
            p, state = bess_power(df, state, params, dt)
            assert abs(p) <= 1.0
            assert abs(state.integrator) <= params.integrator_limit + 1e-15
            if abs(p) == 1.0:
                # frozen integrator while saturated
                assert state.integrator == prev_int


class TestBusFrequency:
    def test_constant_angle(self):
        theta = np.zeros(200)
        f = bus_frequency_estimate(theta, 0.05, 0.005)
        assert np.max(np.abs(f)) == 0.0

    def test_ramp_converges_to_slope(self):
        dt = 0.005
        t = np.arange(0, 2, dt)
        theta = 2 * np.pi * 0.1 * t
        f = bus_frequency_estimate(theta, 0.05, dt)
        assert f[-1] == pytest.approx(0.1, abs=1e-6)

    def test_step_response_discrete_closed_form(self):
        # A single angle step produces one raw-derivative impulse; the filter
        # output then decays geometrically by (1 - dt/tc) each sample.
        dt, tc = 0.005, 0.05
        step = 0.3
        theta = np.concatenate([np.zeros(1), np.full(100, step)])
        f = bus_frequency_estimate(theta, tc, dt)
        a = dt / tc
        impulse = step / dt / (2 * np.pi)
        expected = a * impulse * (1 - a) ** np.arange(100)
        assert np.allclose(f[1:], expected, atol=1e-12)

    def test_wraparound_handled(self):
        dt = 0.005
        t = np.arange(0, 2, dt)
        theta = np.mod(2 * np.pi * 0.1 * t + np.pi, 2 * np.pi) - np.pi
        f = bus_frequency_estimate(theta, 0.05, dt)
        assert f[-1] == pytest.approx(0.1, abs=1e-6)

    def test_too_short(self):
        with pytest.raises(ValueError):
            bus_frequency_estimate(np.zeros(1), 0.05, 0.005)


class TestRk4:
    def test_exact_on_cubic(self):
        # RK4 integrates polynomials up to degree 4 in t exactly.
        f = lambda t, x: np.array([3 * t**2])
        x = rk4_step(f, 0.0, np.array([0.0]), 0.5)
        assert x[0] == pytest.approx(0.5**3, abs=1e-14)

    def test_fourth_order_on_linear_system(self):
        # Undamped oscillator with analytic solution; halving dt must shrink
        # the global error by at least 2^4 = 16 (allow margin: >= 12).
        w = 2 * np.pi

        def f(_t, x):
            return np.array([x[1], -(w**2) * x[0]])

        def global_error(dt):
            x = np.array([1.0, 0.0])
            n = round(1.0 / dt)
            for k in range(n):
                x = rk4_step(f, k * dt, x, dt)
            return abs(x[0] - np.cos(w * 1.0))

        ratio = global_error(0.01) / global_error(0.005)
        assert ratio >= 12.0


@pytest.fixture(scope="module")
def snapshot(case118):
    sol = solve(case118)
    assert sol.converged
    return sol


class TestRunTransient:
    def test_equilibrium_hold(self, case118, snapshot):
        devices = DeviceSet(machines=default_machines(case118))
        cfg = SimConfig(dt=0.005, t_end=5.0, monitor_buses=(25,))
        res = run_transient(case118, snapshot, devices, [], cfg)
        assert res.max_state_drift <= 1e-6
        v25 = res.v_mag[25]
        assert np.max(np.abs(v25 - v25[0])) <= 1e-6
        assert np.max(np.abs(res.freq_dev[25])) <= 1e-6

    def test_zero_load_step_is_equilibrium(self, case118, snapshot):
        devices = DeviceSet(machines=default_machines(case118))
        cfg = SimConfig(dt=0.005, t_end=4.0, monitor_buses=(25,))
        res = run_transient(
            case118, snapshot, devices,
            [Event(1.0, LoadStep(25, 0.0, 0.0))], cfg,
        )
        assert res.max_state_drift <= 1e-6

    def test_load_step_perturbs_then_logs(self, case118, snapshot):
        devices = DeviceSet(machines=default_machines(case118))
        cfg = SimConfig(dt=0.005, t_end=4.0, monitor_buses=(25,))
        res = run_transient(
            case118, snapshot, devices,
            [Event(1.0, LoadStep(25, 40.0, 10.0))], cfg,
        )
        assert res.max_state_drift > 1e-4
        assert len(res.event_log) == 1
        assert res.event_log[0]["t"] == pytest.approx(1.0)
        v25 = res.v_mag[25]
        k = int(1.0 / cfg.dt)
        assert np.max(np.abs(v25[:k] - v25[0])) < 1e-8  # flat before the event
        assert v25[-1] < v25[0]  # extra load depresses the bus voltage

    def test_t_end_must_cover_events(self, case118, snapshot):
        devices = DeviceSet(machines=default_machines(case118))
        with pytest.raises(ValueError):
            run_transient(
                case118, snapshot, devices,
                [Event(5.0, LoadStep(25, 1.0))],
                SimConfig(t_end=4.0),
            )

    def test_csv_export_layout(self, case118, snapshot, tmp_path):
        devices = DeviceSet(machines=default_machines(case118))
        cfg = SimConfig(dt=0.01, t_end=1.0, monitor_buses=(25,))
        res = run_transient(case118, snapshot, devices, [], cfg)
        path = tmp_path / "out.csv"
        write_result_csv(res, path)
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "t_s"
        assert "bus_25_vmag_pu" in header
        assert "bus_25_fdev_hz" in header
        # Device columns appear only when an SMR/BESS is present.
        assert "smr_pmech_mw" not in header
        assert "bess_p_mw" not in header
        assert len(lines) == 1 + len(res.t)
