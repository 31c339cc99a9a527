"""Entanglement figures of merit from windowed coincidence counts.

Port conventions: outcomes +1 map to ports H and D, -1 to V and A; H/V is
the measured basis, D/A the conjugate one. Correct (key-carrying)
combinations under this labeling are the equal-port pairs HH, VV, DD, AA.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .errors import ConfigError, ContractViolation, FitConvergenceError, UndefinedValue

PORT_OUTCOME = {"H": +1, "V": -1, "D": +1, "A": -1}
PORT_BASIS = {"H": "hv", "V": "hv", "D": "da", "A": "da"}

# Standard optimal CHSH analyzer set: a, a' on one arm; b, b' on the other.
CHSH_ANGLES = (0.0, math.pi / 4.0, math.pi / 8.0, 3.0 * math.pi / 8.0)

TARGET_COMBOS = (("H", "H"), ("V", "V"), ("D", "D"), ("A", "A"))

TSIRELSON = 2.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class ScanPoint:
    angle_a_rad: float
    angle_b_rad: float
    counts: dict          # (port_a, port_b) -> int
    duration_s: float = 30.0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")


@dataclass(frozen=True)
class VisibilityResult:
    visibility: float
    phase_rad: float
    basis: str
    fit_residual: float


def _outcome_counts(counts):
    """Normalize a counts mapping to outcome-sign keys (+1/-1 pairs)."""
    out = {(1, 1): 0, (1, -1): 0, (-1, 1): 0, (-1, -1): 0}
    for key, n in counts.items():
        ka, kb = key
        oa = PORT_OUTCOME[ka] if isinstance(ka, str) else int(ka)
        ob = PORT_OUTCOME[kb] if isinstance(kb, str) else int(kb)
        out[(oa, ob)] += n
    return out


def correlation_E(counts):
    """Correlation estimator E = (N++ + N-- - N+- - N-+) / N_total.

    Keys may be outcome signs or port labels (resolved via PORT_OUTCOME).
    """
    c = _outcome_counts(counts)
    total = sum(c.values())
    if total == 0:
        raise UndefinedValue("correlation undefined for zero total counts")
    return (c[(1, 1)] + c[(-1, -1)] - c[(1, -1)] - c[(-1, 1)]) / total


def _fringe(delta, offset, visibility, phase):
    return offset * (1.0 + visibility * np.cos(2.0 * delta + phase))


def fit_visibility(scan, combos=(("H", "H"),)):
    """Least-squares fringe fit offset*(1 + V cos(2*delta + phase)).

    ``combos`` selects which coincidence combinations are summed into the
    fitted curve (default: the HH channel pair). Needs at least 4 distinct
    angle differences spanning half a fringe period.
    """
    deltas = np.array([p.angle_a_rad - p.angle_b_rad for p in scan], dtype=float)
    if np.unique(np.round(deltas, 12)).size < 4:
        raise ContractViolation("need at least 4 distinct analyzer-angle differences")
    if deltas.max() - deltas.min() < math.pi / 2.0 - 1e-9:
        raise ContractViolation("scan must span at least half a fringe period")
    y = np.array([sum(p.counts.get(c, 0) for c in combos) for p in scan], dtype=float)

    basis = PORT_BASIS[combos[0][0]]
    offset0 = max(y.mean(), 1.0)
    spread = (y.max() - y.min()) / max(y.max() + y.min(), 1.0)
    v0 = min(max(spread, 0.05), 0.99)
    phase0 = 0.0 if y[int(np.argmin(np.abs(deltas)))] >= offset0 else math.pi
    yerr = np.sqrt(np.clip(y, 1.0, None))
    try:
        popt, _ = curve_fit(_fringe, deltas, y, p0=[offset0, v0, phase0],
                            sigma=yerr, absolute_sigma=True,
                            bounds=([0.0, 0.0, -2.0 * math.pi],
                                    [np.inf, 1.0, 2.0 * math.pi]),
                            xtol=1e-12, ftol=1e-12, gtol=1e-12,
                            maxfev=500 * 5)
    except RuntimeError as exc:
        raise FitConvergenceError(f"visibility fit did not converge: {exc}") from exc
    resid = float(np.sqrt(np.mean(((y - _fringe(deltas, *popt)) / yerr) ** 2)))
    return VisibilityResult(visibility=float(popt[1]),
                            phase_rad=float(math.remainder(popt[2], 2.0 * math.pi)),
                            basis=basis, fit_residual=resid)


def qber(counts, basis="hv"):
    """Quantum bit error rate in one basis: wrong-combination counts / total.

    Only combinations with both ports in the requested basis contribute;
    wrong means opposite outcome signs under the package port convention.
    """
    wrong = 0
    total = 0
    for (ka, kb), n in counts.items():
        if PORT_BASIS.get(ka) != basis or PORT_BASIS.get(kb) != basis:
            continue
        total += n
        if PORT_OUTCOME[ka] * PORT_OUTCOME[kb] < 0:
            wrong += n
    if total == 0:
        raise UndefinedValue(f"no coincidences in basis {basis!r}")
    return wrong / total


def chsh_S(e_ab, e_ab_prime, e_aprime_b, e_aprime_bprime):
    """CHSH statistic S = |E(a,b) - E(a,b') + E(a',b) + E(a',b')|."""
    return abs(e_ab - e_ab_prime + e_aprime_b + e_aprime_bprime)


def setting_counts(combo_counts):
    """Split 16 port-combination counts into the four CHSH settings.

    With both analyzers in passive-basis mode, the arm a photon exits (H/V
    vs D/A) selects between angle a and a' per side, so one run yields all
    four settings. Returns {(side_a, side_b): outcome-counts dict} with side
    labels "hv"/"da".
    """
    settings = {}
    for (ca, cb), n in combo_counts.items():
        key = (PORT_BASIS[ca], PORT_BASIS[cb])
        sub = settings.setdefault(key, {})
        ok = (PORT_OUTCOME[ca], PORT_OUTCOME[cb])
        sub[ok] = sub.get(ok, 0) + n
    return settings


def chsh_from_counts(combo_counts):
    """S value from one passive-basis run at the standard CHSH angles."""
    settings = setting_counts(combo_counts)
    needed = [("hv", "hv"), ("hv", "da"), ("da", "hv"), ("da", "da")]
    missing = [s for s in needed if s not in settings]
    if missing:
        raise UndefinedValue(f"no coincidences for settings {missing}")
    e = {s: correlation_E(settings[s]) for s in needed}
    s_val = chsh_S(e[("hv", "hv")], e[("hv", "da")],
                   e[("da", "hv")], e[("da", "da")])
    return s_val, e


def chsh_from_matches(matches):
    return chsh_from_counts(matches.combo_counts())


def secret_key_rate(per_combo_rates_hz, extraction_eff=0.56):
    """Secret key rate: sum of the target-combination coincidence rates
    times the key extraction efficiency factor."""
    rates = list(per_combo_rates_hz)
    if any(r < 0 for r in rates):
        raise ConfigError("rates must be >= 0")
    if not 0.0 < extraction_eff <= 1.0:
        raise ConfigError("extraction_eff must lie in (0, 1]")
    return sum(rates) * extraction_eff


def write_scan_csv(path, scan):
    with open(path, "w") as fh:
        fh.write("angle_a_deg,angle_b_deg,combo,counts\n")
        for p in scan:
            for (ca, cb), n in sorted(p.counts.items()):
                fh.write(f"{math.degrees(p.angle_a_rad):.3f},"
                         f"{math.degrees(p.angle_b_rad):.3f},{ca}{cb},{int(n)}\n")


def metrics_dict(visibility=None, qber_value=None, s_value=None, skr=None):
    out = {}
    if visibility is not None:
        out["visibility"] = visibility
    if qber_value is not None:
        out["qber"] = qber_value
    if s_value is not None:
        out["S"] = s_value
    if skr is not None:
        out["skr_bits_per_s"] = skr
    return out
