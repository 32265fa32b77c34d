import math
from dataclasses import replace

import numpy as np
import pytest

from eodbench.profiles import CurrentProfile
from eodbench.simulator import (
    BatteryState, DegradationParams, SimConfig, VoltageCurve, eod_time, ocv, simulate, step,
    terminal_voltage,
)

from oracles import ideal_eod_time, ocv_ref, simulate_ref

CFG = SimConfig()

# frozen from the plain-Python oracle (tests/oracles.py)
OCV_AT_1 = 4.194721380325689
OCV_AT_002 = 3.029797699457186


def test_ocv_frozen_values():
    assert ocv(1.0) == pytest.approx(OCV_AT_1, abs=1e-12)
    assert ocv(0.02) == pytest.approx(OCV_AT_002, abs=1e-12)
    assert ocv_ref(1.0) == pytest.approx(OCV_AT_1, abs=1e-15)
    assert round(ocv(1.0), 3) == 4.195
    assert round(ocv(0.02), 2) == 3.03


@pytest.mark.parametrize("x", [0.0, 0.005, 0.3, 0.77, 1.0, 1.005, 2.0])
def test_ocv_matches_oracle(x):
    assert ocv(x) == pytest.approx(ocv_ref(x), abs=1e-13)


def test_ocv_monotone_and_domain():
    assert ocv(0.5) < ocv(0.9)
    xs = np.linspace(0.01, 1.0, 200)
    assert np.all(np.diff([ocv(x) for x in xs]) > 0)
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(ValueError):
            ocv(bad)


def test_step_equilibrium_fixed_point():
    p = DegradationParams(6000, 0.1)
    s = BatteryState.full(p, CFG)
    s2 = step(s, 0.0, 0.1, p, CFG)
    assert (s2.q_surface, s2.q_bulk, s2.v_lag) == (s.q_surface, s.q_bulk, s.v_lag)
    assert s2.t == pytest.approx(0.1)


def test_step_decoupled_drain():
    p = DegradationParams(6000, 0.1)
    cfg = replace(CFG, d_diff=0.0)
    s = BatteryState(1000.0, 3000.0)
    s2 = step(s, 1.0, 1.0, p, cfg)
    assert s2.q_surface == 999.0
    assert s2.q_bulk == 3000.0


@pytest.mark.parametrize("qs,qb,i", [(1200.0, 4800.0, 1.0), (300.0, 4000.0, 2.5), (900.0, 100.0, 0.5)])
def test_step_conserves_charge(qs, qb, i):
    p = DegradationParams(6000, 0.1)
    s2 = step(BatteryState(qs, qb), i, 0.1, p, CFG)
    assert (s2.q_surface + s2.q_bulk) - (qs + qb) == pytest.approx(-i * 0.1, abs=1e-9)


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step(BatteryState(1, 1), 1.0, 0.0, DegradationParams(6000, 0.1), CFG)


def test_terminal_voltage_examples():
    p = DegradationParams(6000, 0.1)
    full = BatteryState.full(p, CFG)
    assert terminal_voltage(full, 0.0, p, CFG) == pytest.approx(OCV_AT_1, abs=1e-12)
    lagged = replace(full, v_lag=0.05)
    assert terminal_voltage(lagged, 1.0, p, CFG) == pytest.approx(4.044721380325689, abs=1e-12)
    assert round(terminal_voltage(lagged, 1.0, p, CFG), 3) == 4.045
    va = terminal_voltage(full, 1.5, DegradationParams(6000, 0.05), CFG)
    vb = terminal_voltage(full, 1.5, DegradationParams(6000, 0.2), CFG)
    assert va - vb == pytest.approx(1.5 * 0.15, abs=1e-12)


def test_simulate_matches_python_reference():
    profile = CurrentProfile(np.array([1.2, 2.7, 0.8]), np.array([401.3, 1000.0, 6000.0]))
    p = DegradationParams(5500.0, 0.08)
    curve = simulate(profile, p, CFG)
    ref, reached = simulate_ref(profile.segment_values, profile.segment_end_times, p.q_max, p.r0,
                                n_samples=3001)
    assert reached == curve.eod_reached
    assert len(ref) == len(curve.v)
    np.testing.assert_allclose(curve.v, ref, atol=1e-10, rtol=0)


def test_simulate_ideal_config_matches_root():
    cfg = CFG.ideal()
    curve = simulate(CurrentProfile.constant(1.0, 20000), DegradationParams(6000, 0.1), cfg)
    expected = ideal_eod_time(1.0, 6000, 0.1)
    assert abs(eod_time(curve, 3.0) - expected) <= 2 * cfg.sampling_period


def test_simulate_two_amps_faster():
    p = DegradationParams(6500, 0.05)
    t1 = eod_time(simulate(CurrentProfile.constant(1.0, 20000), p), 3.0)
    t2 = eod_time(simulate(CurrentProfile.constant(2.0, 20000), p), 3.0)
    assert t2 < t1


def test_simulate_charge_drawn_below_capacity():
    profile = CurrentProfile(np.array([2.0, 0.6, 1.4]), np.array([1000.0, 3000.0, 20000.0]))
    p = DegradationParams(6000, 0.05)
    curve = simulate(profile, p)
    assert curve.eod_reached
    t = curve.times
    drawn = sum(float(v) * (min(e, t[-1]) - s) for v, s, e in
                zip(profile.segment_values, np.r_[0.0, profile.segment_end_times[:-1]],
                    profile.segment_end_times) if s < t[-1])
    assert drawn < p.q_max


def test_simulate_deterministic_and_bounded():
    profile = CurrentProfile(np.array([0.5, 3.0]), np.array([2000.0, 20000.0]))
    p = DegradationParams(7000, 0.3)
    a, b = simulate(profile, p), simulate(profile, p)
    assert np.array_equal(a.v, b.v)
    assert np.all(a.v > 0) and np.all(a.v <= CFG.v_full + 0.05)


def test_simulate_cutoff_sample_included():
    curve = simulate(CurrentProfile.constant(1.0, 20000), DegradationParams(5000, 0.017215))
    assert curve.eod_reached
    assert curve.v[-1] <= 3.0 < curve.v[-2]


def test_simulate_horizon_limits_length():
    curve = simulate(CurrentProfile.constant(0.5, 100.0), DegradationParams(8000, 0.02))
    assert len(curve.v) == 51 and not curve.eod_reached


def test_simulate_rejects_non_positive_horizon():
    with pytest.raises(ValueError):
        simulate(CurrentProfile.constant(1.0, 10.0), DegradationParams(6000, 0.1),
                 replace(CFG, max_duration=0.0))


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(inner_step=0.3)
    with pytest.raises(ValueError):
        SimConfig(v_cutoff=4.5)
    with pytest.raises(ValueError):
        DegradationParams(0.0, 0.1)
    with pytest.raises(ValueError):
        DegradationParams(100.0, -0.1)


def test_eod_time_examples():
    c = VoltageCurve(0.0, 2.0, np.array([4.0, 3.5, 3.0]), True)
    assert eod_time(c, 3.0) == 4.0
    assert eod_time(c, 2.0) is None
    assert eod_time(c, 4.1) == 0.0
