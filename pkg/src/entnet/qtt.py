"""Two-way time transfer from bidirectional coincidence correlations.

Downlink and uplink correlation peaks give the latencies tau_dl and tau_ul;
their half-sum is the time of flight and their half-difference the clock
offset (sign convention: delta = clock_B - clock_A). Estimator convergence
is characterized by re-estimating on disjoint sub-windows and fitting
sigma(t) = A / sqrt(t) + floor.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .coinc import (DEFAULT_BIN_WIDTH_PS, DEFAULT_RANGE_PS, correlate_times,
                    fit_peak, peak_argmax)
from .errors import CannotEstimate, ContractViolation, EntnetError, FitConvergenceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TwoWayMeasurement:
    tau_dl_ps: float
    tau_ul_ps: float
    t_ab_ps: float
    delta_ps: float
    integration_s: float
    sigma_delta_ps: float


@dataclass(frozen=True)
class ConvergencePoint:
    integration_s: float
    sigma_delta_ps: float
    n_windows: int


@dataclass(frozen=True)
class ConvergenceFit:
    points: tuple
    a_ps_sqrt_s: float
    floor_ps: float


def _peak_position(hist, estimator):
    if estimator == "argmax":
        return hist.static_delay_ps + peak_argmax(hist), hist.bin_width_ps / math.sqrt(12.0)
    fit = fit_peak(hist)
    return hist.static_delay_ps + fit.center_ps, fit.center_err_ps


def estimate_offset(dl_corr, ul_corr, integration_s=0.0, estimator="fit"):
    """Solve the two-way identities from the two correlation peaks.

    tau_dl and tau_ul are the absolute peak latencies (static delay plus the
    fitted center); t_ab = (tau_dl + tau_ul)/2 and delta = (tau_dl -
    tau_ul)/2 hold exactly by construction. sigma_delta combines the two
    center uncertainties in quadrature over 2.
    """
    try:
        tau_dl, se_dl = _peak_position(dl_corr, estimator)
        tau_ul, se_ul = _peak_position(ul_corr, estimator)
    except EntnetError as exc:
        raise CannotEstimate(f"missing correlation peak: {exc}") from exc
    t_ab = 0.5 * (tau_dl + tau_ul)
    delta = 0.5 * (tau_dl - tau_ul)
    sigma = 0.5 * math.sqrt(se_dl ** 2 + se_ul ** 2)
    return TwoWayMeasurement(tau_dl, tau_ul, t_ab, delta, integration_s, sigma)


def _select(times, lo, hi):
    t = np.asarray(times, dtype=np.int64)
    return t[(t >= lo) & (t < hi)]


def convergence_curve(dl_tags, ul_tags, integration_times_s,
                      bin_width_ps=DEFAULT_BIN_WIDTH_PS, range_ps=DEFAULT_RANGE_PS,
                      static_delay_ps=0, estimator="fit"):
    """Clock-offset scatter versus integration time.

    dl_tags and ul_tags are (local_times, remote_times) timestamp pairs for
    the two directions. For each integration time the run is split into
    disjoint windows, delta is estimated per window, and sigma is the sample
    standard deviation across windows; integration times with fewer than two
    usable windows are omitted with a warning. The points are then fitted to
    sigma(t) = A / sqrt(t) + floor.
    """
    integration_times_s = sorted(integration_times_s)
    if len(integration_times_s) < 5:
        raise ContractViolation("need at least 5 integration times")
    dl_a, dl_b = (np.asarray(x, dtype=np.int64) for x in dl_tags)
    ul_a, ul_b = (np.asarray(x, dtype=np.int64) for x in ul_tags)
    t_end = max(x.max() for x in (dl_a, dl_b, ul_a, ul_b) if x.size)
    total_s = (int(t_end) + 1) / 1e12
    if total_s < max(integration_times_s):
        raise ContractViolation("total duration must cover the longest integration time")

    points = []
    for t_int in integration_times_s:
        win_ps = int(t_int * 1e12)
        n_win = int(t_end // win_ps) + 1
        deltas = []
        for k in range(n_win):
            lo, hi = k * win_ps, (k + 1) * win_ps
            sel = [_select(x, lo, hi) for x in (dl_a, dl_b, ul_a, ul_b)]
            if min(s.size for s in sel) == 0:
                continue
            try:
                dl_h = correlate_times(sel[0], sel[1], bin_width_ps, range_ps, static_delay_ps)
                ul_h = correlate_times(sel[2], sel[3], bin_width_ps, range_ps, static_delay_ps)
                m = estimate_offset(dl_h, ul_h, t_int, estimator)
            except EntnetError:
                continue
            deltas.append(m.delta_ps)
        if len(deltas) < 2:
            log.warning("integration time %.3g s yields %d usable window(s); omitted",
                        t_int, len(deltas))
            continue
        points.append(ConvergencePoint(t_int, float(np.std(deltas, ddof=1)), len(deltas)))

    if len(points) < 3:
        raise CannotEstimate("too few usable integration times for a convergence fit")
    x = np.array([p.integration_s for p in points])
    y = np.array([p.sigma_delta_ps for p in points])

    def model(t, a, floor):
        return a / np.sqrt(t) + floor

    try:
        popt, _ = curve_fit(model, x, y, p0=[max(y[0] - y[-1], 1.0), y[-1]],
                            bounds=([0.0, 0.0], [np.inf, np.inf]), maxfev=2000)
    except RuntimeError as exc:
        raise FitConvergenceError(f"convergence fit failed: {exc}") from exc
    return ConvergenceFit(tuple(points), float(popt[0]), float(popt[1]))


def write_convergence_csv(path, result):
    with open(path, "w") as fh:
        fh.write("integration_s,sigma_delta_ps\n")
        for p in result.points:
            fh.write(f"{p.integration_s:g},{p.sigma_delta_ps:.3f}\n")


def write_convergence_fit_json(path, result):
    with open(path, "w") as fh:
        json.dump({"A_ps_sqrt_s": result.a_ps_sqrt_s, "floor_ps": result.floor_ps},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
