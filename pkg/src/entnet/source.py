"""Phenomenological entangled photon-pair source.

Pairs are emitted as a homogeneous Poisson process. The two-photon
polarization state is summarized by a single visibility parameter V: the
joint outcome distribution at analyzer angles (a, b) is

    P(o_a, o_b) = 1/4 * (1 + o_a * o_b * V * cos 2(a - b))

which gives unbiased marginals and correlation E = V * cos 2(a - b).
Outcomes are never stored on the pair; they are sampled jointly at
measurement time. Multi-pair contamination is represented implicitly by
independent pairs landing in the same coincidence window.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, ResourceLimit

MAX_PAIR_RATE_HZ = 1e7          # full-brightness emission rate
_EVENT_BUDGET = 1e9             # desk-scale guard on expected pair count


@dataclass(frozen=True)
class SourceConfig:
    pair_rate_hz: float
    state_visibility: float = 1.0
    correlation_width_sigma_ps: float = 400.0   # intrinsic signal-idler width
    heralding_efficiency: float = 1.0
    brightness_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.pair_rate_hz < 0:
            raise ConfigError("pair_rate_hz must be >= 0")
        if not 0.0 <= self.state_visibility <= 1.0:
            raise ConfigError("state_visibility must lie in [0, 1]")
        if not 0.0 < self.heralding_efficiency <= 1.0:
            raise ConfigError("heralding_efficiency must lie in (0, 1]")
        if self.correlation_width_sigma_ps < 0:
            raise ConfigError("correlation_width_sigma_ps must be >= 0")
        if self.brightness_fraction is not None and not 0.0 < self.brightness_fraction <= 1.0:
            raise ConfigError("brightness_fraction must lie in (0, 1]")

    @classmethod
    def from_brightness(cls, fraction, **kwargs):
        """Preset constructor: pair rate = fraction of the 10^7 pairs/s maximum."""
        return cls(pair_rate_hz=fraction * MAX_PAIR_RATE_HZ,
                   brightness_fraction=fraction, **kwargs)

    def rng(self):
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class PairEvent:
    emission_time_ps: int
    idler_delay_ps: int
    state_visibility: float


class PairEnsemble:
    """Columnar container for emitted pairs (times, idler delays, shared V)."""

    __slots__ = ("emission_time_ps", "idler_delay_ps", "state_visibility")

    def __init__(self, emission_time_ps, idler_delay_ps, state_visibility):
        self.emission_time_ps = np.asarray(emission_time_ps, dtype=np.int64)
        self.idler_delay_ps = np.asarray(idler_delay_ps, dtype=np.int64)
        self.state_visibility = float(state_visibility)
        if self.emission_time_ps.shape != self.idler_delay_ps.shape:
            raise ContractViolation("emission times and idler delays must match")

    def __len__(self):
        return self.emission_time_ps.size

    def __getitem__(self, i):
        return PairEvent(int(self.emission_time_ps[i]), int(self.idler_delay_ps[i]),
                         self.state_visibility)

    def shifted(self, dt_ps):
        return PairEnsemble(self.emission_time_ps + np.int64(dt_ps),
                            self.idler_delay_ps, self.state_visibility)


@dataclass
class PhotonStream:
    """One arm of an ensemble in flight: pair indices plus arrival times."""

    pair_index: np.ndarray
    time_ps: np.ndarray

    def __post_init__(self):
        self.pair_index = np.asarray(self.pair_index, dtype=np.int64)
        self.time_ps = np.asarray(self.time_ps, dtype=np.int64)

    def __len__(self):
        return self.pair_index.size


def generate_pairs(duration_ps, cfg, rng=None):
    """Emit a Poisson pair ensemble over [0, duration_ps), sorted in time."""
    if duration_ps <= 0:
        raise ContractViolation("duration must be positive")
    mean = cfg.pair_rate_hz * duration_ps * 1e-12
    if mean > _EVENT_BUDGET:
        raise ResourceLimit(f"expected {mean:.3g} pairs exceeds the 1e9 desk-scale budget")
    gen = rng if rng is not None else cfg.rng()
    n = int(gen.poisson(mean))
    times = np.sort(gen.integers(0, duration_ps, size=n, dtype=np.int64))
    if cfg.correlation_width_sigma_ps > 0:
        delays = np.rint(gen.normal(0.0, cfg.correlation_width_sigma_ps, n)).astype(np.int64)
    else:
        delays = np.zeros(n, dtype=np.int64)
    return PairEnsemble(times, delays, cfg.state_visibility)


def arm_streams(pairs, cfg, rng):
    """Split an ensemble into signal/idler photon streams.

    Heralding efficiency is applied here as independent per-photon thinning;
    the idler arm carries the intrinsic correlation-width delay.
    """
    n = len(pairs)
    idx = np.arange(n, dtype=np.int64)
    keep_s = rng.random(n) < cfg.heralding_efficiency
    keep_i = rng.random(n) < cfg.heralding_efficiency
    signal = PhotonStream(idx[keep_s], pairs.emission_time_ps[keep_s])
    idler = PhotonStream(idx[keep_i],
                         pairs.emission_time_ps[keep_i] + pairs.idler_delay_ps[keep_i])
    return signal, idler


def sample_surviving_arms(duration_ps, cfg, p_signal, p_idler, rng):
    """Thinned equivalent of generate_pairs + arm_streams + downstream loss.

    p_signal / p_idler are the total per-photon survival probabilities of
    each arm (heralding x channel x detector efficiency). Because the
    per-photon survivals are independent Bernoulli thinnings of a Poisson
    process, the surviving both/signal-only/idler-only populations are
    independent Poisson processes with i.i.d. uniform emission times; only
    those photons are materialized, which keeps large runs cheap. Returns
    (ensemble, signal_stream, idler_stream) ready for analyze_and_detect
    with unit detector efficiency.
    """
    if not (0.0 <= p_signal <= 1.0 and 0.0 <= p_idler <= 1.0):
        raise ConfigError("arm survival probabilities must lie in [0, 1]")
    lam = cfg.pair_rate_hz * duration_ps * 1e-12
    if lam > _EVENT_BUDGET:
        raise ResourceLimit(f"expected {lam:.3g} pairs exceeds the 1e9 desk-scale budget")
    n_both = int(rng.poisson(lam * p_signal * p_idler))
    n_sonly = int(rng.poisson(lam * p_signal * (1.0 - p_idler)))
    n_ionly = int(rng.poisson(lam * p_idler * (1.0 - p_signal)))

    t_both = rng.integers(0, duration_ps, size=n_both, dtype=np.int64)
    t_sonly = rng.integers(0, duration_ps, size=n_sonly, dtype=np.int64)
    t_ionly = rng.integers(0, duration_ps, size=n_ionly, dtype=np.int64)

    n_total = n_both + n_sonly + n_ionly
    emission = np.concatenate((t_both, t_sonly, t_ionly))
    if cfg.correlation_width_sigma_ps > 0:
        delays = np.rint(rng.normal(0.0, cfg.correlation_width_sigma_ps,
                                    n_total)).astype(np.int64)
    else:
        delays = np.zeros(n_total, dtype=np.int64)
    ensemble = PairEnsemble(emission, delays, cfg.state_visibility)

    sig_ids = np.concatenate((np.arange(n_both, dtype=np.int64),
                              np.arange(n_both, n_both + n_sonly, dtype=np.int64)))
    sig_t = np.concatenate((t_both, t_sonly))
    order = np.argsort(sig_t, kind="stable")
    signal = PhotonStream(sig_ids[order], sig_t[order])

    idl_ids = np.concatenate((np.arange(n_both, dtype=np.int64),
                              np.arange(n_both + n_sonly, n_total, dtype=np.int64)))
    idl_t = emission[idl_ids] + delays[idl_ids]
    order = np.argsort(idl_t, kind="stable")
    idler = PhotonStream(idl_ids[order], idl_t[order])
    return ensemble, signal, idler


def joint_outcomes(visibility, delta_rad, n, rng):
    """Vectorized joint polarization outcomes for n pairs.

    delta_rad may be a scalar or a per-pair array of analyzer-angle
    differences (a - b). Returns two +/-1 int arrays.
    """
    delta = np.broadcast_to(np.asarray(delta_rad, dtype=float), (n,))
    o_a = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
    p_b_plus = 0.5 * (1.0 + o_a * visibility * np.cos(2.0 * delta))
    o_b = np.where(rng.random(n) < p_b_plus, 1, -1).astype(np.int8)
    return o_a, o_b


def joint_measure(pair, angle_a_rad, angle_b_rad, rng):
    """Sample one joint measurement of a pair at the given analyzer angles."""
    o_a, o_b = joint_outcomes(pair.state_visibility, angle_a_rad - angle_b_rad, 1, rng)
    return int(o_a[0]), int(o_b[0])


def predicted_car(cfg, eta_s, eta_i, noise_s_hz, noise_i_hz, window_ps):
    """Closed-form coincidence-to-accidental ratio (R_true + R_acc) / R_acc.

    R_true = B * eta_s * eta_i; singles are S_x = B * eta_x + noise_x; the
    accidental rate is S_s * S_i * window. Uncorrelated streams give CAR = 1.
    """
    if not (0.0 < eta_s <= 1.0 and 0.0 < eta_i <= 1.0):
        raise ConfigError("efficiencies must lie in (0, 1]")
    if window_ps <= 0:
        raise ConfigError("window must be positive")
    b = cfg.pair_rate_hz
    r_true = b * eta_s * eta_i
    s_s = b * eta_s + noise_s_hz
    s_i = b * eta_i + noise_i_hz
    r_acc = s_s * s_i * window_ps * 1e-12
    if r_acc == 0.0:
        warnings.warn("accidental rate is zero; CAR is undefined (returning inf)")
        return math.inf
    return (r_true + r_acc) / r_acc
