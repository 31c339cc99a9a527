import math

import numpy as np
import pytest

from entnet.errors import (ConfigError, InsufficientData, InvalidTelemetry,
                           LoopUnstable)
from entnet.pointing import (DisturbanceConfig, PidConfig, PointingConfig,
                             QuadCellSample, Telemetry, estimate_stability,
                             open_loop_variance, simulate_loop,
                             write_telemetry_csv)


def test_zero_disturbance_all_quiet():
    cfg = PointingConfig(disturbance=DisturbanceConfig(rms_urad=0.0, corner_hz=1.0))
    tel = simulate_loop(cfg, 2.0, seed=0)
    assert np.all(tel.v_diff_x == 0.0) and np.all(tel.v_diff_y == 0.0)
    assert np.all(tel.dem_x == 0.0) and np.all(tel.dem_y == 0.0)


def test_step_disturbance_integrator_nulls_error():
    cfg = PointingConfig(pid=PidConfig(kp=0.0, ki=20_000.0, kd=0.0, loop_rate_hz=1000.0))
    n = 2000
    step = np.full(n, 50.0)   # 50 urad step
    tel = simulate_loop(cfg, n / 1000.0, seed=0, disturbance_urad=step)
    # integral action: steady-state error goes to zero
    assert abs(tel.v_diff_x[0]) > 1e-3
    assert abs(np.mean(tel.v_diff_x[-200:])) < 1e-5
    assert np.mean(tel.dem_x[-200:]) == pytest.approx(50e-6 / cfg.fsm_rad_per_v, rel=1e-3)


def test_stability_formula_on_5mv_telemetry():
    # deterministic square wave with population std of exactly 5 mV
    n = 1000
    v = np.where(np.arange(n) % 2 == 0, 5e-3, -5e-3)
    tel = Telemetry(np.arange(n) / 1000.0, v, v, np.full(n, 0.6),
                    np.zeros(n), np.zeros(n))
    cfg = PointingConfig()
    est = estimate_stability(tel, cfg)
    assert est.theta_rms_x_urad == pytest.approx(16.0, abs=1e-9)
    assert est.theta_rms_y_urad == pytest.approx(16.0, abs=1e-9)


def test_stability_zero_variance():
    n = 500
    tel = Telemetry(np.arange(n) / 1000.0, np.full(n, 2e-3), np.zeros(n),
                    np.full(n, 0.6), np.zeros(n), np.zeros(n))
    est = estimate_stability(tel, PointingConfig())
    # constant bias does not count (up to float roundoff in the std)
    assert est.theta_rms_x_urad == pytest.approx(0.0, abs=1e-9)


def test_stability_linearity_and_bias_invariance():
    rng = np.random.default_rng(1)
    n = 5000
    v = rng.normal(0.0, 3e-3, n)
    cfg = PointingConfig()
    base = estimate_stability(
        Telemetry(np.arange(n) / 1e3, v, v, np.full(n, 0.6), np.zeros(n), np.zeros(n)), cfg)
    doubled = estimate_stability(
        Telemetry(np.arange(n) / 1e3, 2 * v, 2 * v, np.full(n, 0.6), np.zeros(n), np.zeros(n)), cfg)
    biased = estimate_stability(
        Telemetry(np.arange(n) / 1e3, v + 0.01, v + 0.01, np.full(n, 0.6),
                  np.zeros(n), np.zeros(n)), cfg)
    assert doubled.theta_rms_x_urad == pytest.approx(2 * base.theta_rms_x_urad, rel=1e-9)
    assert biased.theta_rms_x_urad == pytest.approx(base.theta_rms_x_urad, rel=1e-9)


def test_default_loop_calibration_16urad():
    cfg = PointingConfig()
    tel = simulate_loop(cfg, 60.0, seed=0)
    est = estimate_stability(tel, cfg)
    assert est.theta_rms_x_urad == pytest.approx(16.0, abs=0.5)
    assert est.theta_rms_y_urad == pytest.approx(16.0, abs=0.5)


def test_roundtrip_recovers_measured_residual():
    cfg = PointingConfig()
    tel = simulate_loop(cfg, 20.0, seed=3)
    est = estimate_stability(tel, cfg)
    expected_x = np.std(tel.v_diff_x) / cfg.v_sum * cfg.spot_radius_m / cfg.efl_m * 1e6
    assert est.theta_rms_x_urad == pytest.approx(expected_x, rel=1e-9)


def test_closed_loop_beats_open_loop_over_grid():
    grid = [PidConfig(kp, ki, 0.0, 1000.0)
            for kp in (1.0, 5.0, 10.0) for ki in (5_000.0, 20_000.0, 40_000.0)]
    for pid in grid:
        cfg = PointingConfig(pid=pid)
        tel = simulate_loop(cfg, 20.0, seed=4)
        closed = float(np.var(tel.v_diff_x))
        open_var, _ = open_loop_variance(cfg, 20.0, seed=4)
        assert closed < open_var


def test_unstable_gains_reported_with_time():
    # an aggressive proportional gain beyond the discrete stability limit
    cfg = PointingConfig(pid=PidConfig(kp=80.0, ki=0.0, kd=0.0, loop_rate_hz=1000.0))
    with pytest.raises(LoopUnstable) as err:
        simulate_loop(cfg, 10.0, seed=5)
    assert err.value.t_s is not None and err.value.t_s >= 0.0


def test_telemetry_validation():
    cfg = PointingConfig()
    with pytest.raises(InsufficientData):
        estimate_stability([QuadCellSample(0.0, 0.0, 0.0, 0.6, 0.0, 0.0)] * 50, cfg)
    n = 200
    bad = Telemetry(np.arange(n) / 1e3, np.zeros(n), np.zeros(n),
                    np.zeros(n), np.zeros(n), np.zeros(n))   # v_sum == 0
    with pytest.raises(InvalidTelemetry):
        estimate_stability(bad, cfg)


def test_loop_rate_vs_corner_guard():
    with pytest.raises(ConfigError):
        PointingConfig(pid=PidConfig(loop_rate_hz=5.0),
                       disturbance=DisturbanceConfig(rms_urad=10.0, corner_hz=1.0))


def test_samples_iteration_and_csv(tmp_path):
    cfg = PointingConfig()
    tel = simulate_loop(cfg, 1.0, seed=6)
    samples = list(tel)
    assert len(samples) == 1000
    assert samples[0].v_sum == pytest.approx(0.6)
    est_from_list = estimate_stability(samples, cfg)
    est_from_tel = estimate_stability(tel, cfg)
    assert est_from_list == est_from_tel
    write_telemetry_csv(tmp_path / "t.csv", tel)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t_s,v_diff_x,v_diff_y,dem_x,dem_y"
    assert len(lines) == 1001
