"""QuadCell + fine-steering-mirror feedback loop and pointing-stability
estimation from telemetry.

Small-signal quadrant-cell model: a pointing error theta displaces the
focal spot by x = efl * theta, producing a difference voltage
v_diff = v_sum * x / spot_radius. The loop closes through a discrete PID
whose output voltage drives the mirror at fsm_rad_per_v. Disturbance is
first-order low-pass filtered white noise. X and Y run as independent
copies of the same dynamics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, InsufficientData, InvalidTelemetry, LoopUnstable


@dataclass(frozen=True)
class PidConfig:
    kp: float = 5.0
    ki: float = 20_000.0
    kd: float = 0.0
    loop_rate_hz: float = 1000.0

    def __post_init__(self):
        if self.loop_rate_hz <= 0:
            raise ConfigError("loop_rate_hz must be positive")


@dataclass(frozen=True)
class DisturbanceConfig:
    # rms tuned so the default closed loop leaves ~5 mV of residual v_diff
    rms_urad: float = 136.7
    corner_hz: float = 1.0

    def __post_init__(self):
        if self.rms_urad < 0 or self.corner_hz <= 0:
            raise ConfigError("disturbance parameters must be positive")


@dataclass(frozen=True)
class PointingConfig:
    beam_diameter_m: float = 0.08
    power_w: float = 0.6e-3
    gain_v_per_w: float = 1000.0
    efl_m: float = 0.5
    spot_radius_m: float = 0.96e-3   # calibration constant of the volts-to-angle map
    fsm_rad_per_v: float = 1.0e-4
    pid: PidConfig = field(default_factory=PidConfig)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)

    def __post_init__(self):
        for name in ("beam_diameter_m", "power_w", "gain_v_per_w", "efl_m",
                     "spot_radius_m", "fsm_rad_per_v"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.pid.loop_rate_hz < 10.0 * self.disturbance.corner_hz:
            raise ConfigError("loop rate must be at least 10x the disturbance corner")

    @property
    def v_sum(self):
        return self.power_w * self.gain_v_per_w

    def v_diff_per_rad(self):
        return self.v_sum * self.efl_m / self.spot_radius_m


@dataclass(frozen=True)
class QuadCellSample:
    t_s: float
    v_diff_x: float
    v_diff_y: float
    v_sum: float
    dem_x: float
    dem_y: float


@dataclass
class Telemetry:
    t_s: np.ndarray
    v_diff_x: np.ndarray
    v_diff_y: np.ndarray
    v_sum: np.ndarray
    dem_x: np.ndarray
    dem_y: np.ndarray

    def __len__(self):
        return self.t_s.size

    def __iter__(self):
        for k in range(len(self)):
            yield QuadCellSample(float(self.t_s[k]), float(self.v_diff_x[k]),
                                 float(self.v_diff_y[k]), float(self.v_sum[k]),
                                 float(self.dem_x[k]), float(self.dem_y[k]))


def _disturbance_series(n, dt, cfg, rng):
    """AR(1) realization of low-pass filtered white noise, in radians."""
    rms = cfg.rms_urad * 1e-6
    if rms == 0.0:
        return np.zeros(n)
    a = math.exp(-2.0 * math.pi * cfg.corner_hz * dt)
    drive = rms * math.sqrt(1.0 - a * a)
    w = rng.normal(0.0, 1.0, n)
    out = np.empty(n)
    state = rng.normal(0.0, rms)   # start in the stationary distribution
    for k in range(n):
        state = a * state + drive * w[k]
        out[k] = state
    return out


def _axis_loop(theta_d, cfg, dt):
    """One axis of the closed loop; returns (v_diff, dem) series.

    Positive v_diff means the spot leads the mirror, so the PID acts on
    +v_diff and the mirror command chases the disturbance (negative
    feedback through the plant's theta_c -> -v_diff gain).
    """
    pid = cfg.pid
    v_per_rad = cfg.v_diff_per_rad()
    v_limit = cfg.v_sum            # beyond this the spot has left the cell
    integ = 0.0
    prev_err = 0.0
    theta_c = 0.0
    v_diff = np.empty(theta_d.size)
    dem = np.empty(theta_d.size)
    for k in range(theta_d.size):
        v = (theta_d[k] - theta_c) * v_per_rad
        if abs(v) > v_limit:
            raise LoopUnstable(f"quadcell signal left its linear range at t = {k * dt:.3f} s",
                               t_s=k * dt)
        err = v
        integ += err * dt
        deriv = (err - prev_err) / dt if k else 0.0
        prev_err = err
        u = pid.kp * err + pid.ki * integ + pid.kd * deriv
        v_diff[k] = v
        dem[k] = u
        theta_c = cfg.fsm_rad_per_v * u
    return v_diff, dem


def simulate_loop(cfg, duration_s, seed=0, disturbance_urad=None):
    """Run the closed loop and return QuadCell telemetry at the loop rate.

    disturbance_urad optionally injects a deterministic disturbance series
    (same on both axes) instead of the filtered-noise model.
    """
    if duration_s <= 0:
        raise ContractViolation("duration must be positive")
    dt = 1.0 / cfg.pid.loop_rate_hz
    n = int(round(duration_s * cfg.pid.loop_rate_hz))
    rng = np.random.default_rng(seed)
    if disturbance_urad is not None:
        theta = np.asarray(disturbance_urad, dtype=float) * 1e-6
        if theta.size != n:
            raise ContractViolation("disturbance series length must match the loop rate")
        vx, dx = _axis_loop(theta, cfg, dt)
        vy, dy = _axis_loop(theta, cfg, dt)
    else:
        vx, dx = _axis_loop(_disturbance_series(n, dt, cfg.disturbance, rng), cfg, dt)
        vy, dy = _axis_loop(_disturbance_series(n, dt, cfg.disturbance, rng), cfg, dt)
    t = dt * np.arange(n)
    return Telemetry(t, vx, vy, np.full(n, cfg.v_sum), dx, dy)


def _telemetry_arrays(samples):
    if isinstance(samples, Telemetry):
        return samples
    samples = list(samples)
    return Telemetry(np.array([s.t_s for s in samples]),
                     np.array([s.v_diff_x for s in samples]),
                     np.array([s.v_diff_y for s in samples]),
                     np.array([s.v_sum for s in samples]),
                     np.array([s.dem_x for s in samples]),
                     np.array([s.dem_y for s in samples]))


@dataclass(frozen=True)
class StabilityEstimate:
    theta_rms_x_urad: float
    theta_rms_y_urad: float


def estimate_stability(samples, cfg):
    """Pointing stability from telemetry.

    theta_rms = std(v_diff) / (power * gain) * spot_radius / efl per axis,
    reported in microradians. Uses the population standard deviation, so a
    constant bias on v_diff does not contribute.
    """
    tel = _telemetry_arrays(samples)
    if len(tel) < 100:
        raise InsufficientData("need at least 100 telemetry samples")
    if np.any(tel.v_sum <= 0):
        raise InvalidTelemetry("telemetry contains non-positive sum-voltage samples")
    scale = cfg.spot_radius_m / (cfg.power_w * cfg.gain_v_per_w * cfg.efl_m) * 1e6
    return StabilityEstimate(float(np.std(tel.v_diff_x) * scale),
                             float(np.std(tel.v_diff_y) * scale))


def open_loop_variance(cfg, duration_s, seed=0):
    """Variance of v_diff with the controller disabled (same disturbance)."""
    open_cfg = PointingConfig(
        beam_diameter_m=cfg.beam_diameter_m, power_w=cfg.power_w,
        gain_v_per_w=cfg.gain_v_per_w, efl_m=cfg.efl_m,
        spot_radius_m=cfg.spot_radius_m, fsm_rad_per_v=cfg.fsm_rad_per_v,
        pid=PidConfig(0.0, 0.0, 0.0, cfg.pid.loop_rate_hz),
        disturbance=cfg.disturbance)
    tel = simulate_loop(open_cfg, duration_s, seed)
    return float(np.var(tel.v_diff_x)), float(np.var(tel.v_diff_y))


def write_telemetry_csv(path, samples):
    tel = _telemetry_arrays(samples)
    with open(path, "w") as fh:
        fh.write("t_s,v_diff_x,v_diff_y,dem_x,dem_y\n")
        for k in range(len(tel)):
            fh.write(f"{tel.t_s[k]:.6f},{tel.v_diff_x[k]:.9f},{tel.v_diff_y[k]:.9f},"
                     f"{tel.dem_x[k]:.9f},{tel.dem_y[k]:.9f}\n")
