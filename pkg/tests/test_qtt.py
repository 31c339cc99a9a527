import math

import numpy as np
import pytest

from entnet.coinc import correlate_times
from entnet.errors import CannotEstimate, ContractViolation
from entnet.qtt import (ConvergenceFit, TwoWayMeasurement, convergence_curve,
                        estimate_offset, write_convergence_csv,
                        write_convergence_fit_json)

PS = 10 ** 12


def _two_way_tags(rng, duration_s, rate_hz, flight_ps, delta_ps, jitter_ps,
                  bg_rate_hz=0.0, drift_ps_per_s=0.0):
    """Synthetic bidirectional coincidence tags with known ground truth.

    Downlink pairs: local at A, received at B (offset +delta); uplink pairs:
    local at B, received at A. Returns ((dl_a, dl_b), (ul_b, ul_a)).
    """
    def one_direction(sign):
        n = rng.poisson(rate_hz * duration_s)
        t_lo = np.sort(rng.integers(0, int(duration_s * PS), n))
        jit = rng.normal(0.0, jitter_ps, n).astype(np.int64)
        offset = delta_ps + drift_ps_per_s * t_lo / PS
        t_hi = t_lo + flight_ps + (sign * offset).astype(np.int64) + jit
        if bg_rate_hz > 0:
            m = rng.poisson(bg_rate_hz * duration_s)
            t_lo = np.sort(np.concatenate(
                (t_lo, rng.integers(0, int(duration_s * PS), m))))
            m2 = rng.poisson(bg_rate_hz * duration_s)
            t_hi = np.sort(np.concatenate(
                (t_hi, rng.integers(0, int(duration_s * PS), m2))))
        else:
            t_hi = np.sort(t_hi)
        return t_lo, t_hi

    dl = one_direction(+1)   # B timestamps carry +delta
    ul = one_direction(-1)   # A timestamps seen from B carry -delta
    return dl, ul


def test_identities_exact():
    m = TwoWayMeasurement(tau_dl_ps=502_000.0, tau_ul_ps=498_000.0,
                          t_ab_ps=500_000.0, delta_ps=2_000.0,
                          integration_s=30.0, sigma_delta_ps=5.0)
    assert m.t_ab_ps == (m.tau_dl_ps + m.tau_ul_ps) / 2
    assert m.delta_ps == (m.tau_dl_ps - m.tau_ul_ps) / 2


def test_symmetric_link_zero_offset():
    rng = np.random.default_rng(0)
    (dl_a, dl_b), (ul_b, ul_a) = _two_way_tags(rng, 10, 500, 20_000, 0, 400.0)
    dl = correlate_times(dl_a, dl_b)
    ul = correlate_times(ul_b, ul_a)
    m = estimate_offset(dl, ul, 10.0)
    assert abs(m.delta_ps) < 3 * m.sigma_delta_ps + 5.0
    assert abs(m.t_ab_ps - 20_000) < 3 * m.sigma_delta_ps + 5.0


def test_injected_offset_recovered():
    rng = np.random.default_rng(1)
    (dl_a, dl_b), (ul_b, ul_a) = _two_way_tags(rng, 30, 500, 500_000, 2_000, 642.0)
    dl = correlate_times(dl_a, dl_b, static_delay_ps=500_000)
    ul = correlate_times(ul_b, ul_a, static_delay_ps=500_000)
    m = estimate_offset(dl, ul, 30.0)
    assert m.tau_dl_ps == pytest.approx(502_000, abs=50)
    assert m.tau_ul_ps == pytest.approx(498_000, abs=50)
    assert abs(m.delta_ps - 2_000) < 3 * m.sigma_delta_ps + 5.0
    assert m.t_ab_ps == pytest.approx(500_000, abs=3 * m.sigma_delta_ps + 5.0)


def test_offset_shift_moves_delta_only():
    # adding a constant c to all of B's timestamps moves delta by +c
    rng = np.random.default_rng(2)
    (dl_a, dl_b), (ul_b, ul_a) = _two_way_tags(rng, 10, 800, 100_000, 0, 300.0)
    c = 7_000
    m0 = estimate_offset(correlate_times(dl_a, dl_b, static_delay_ps=100_000),
                         correlate_times(ul_b, ul_a, static_delay_ps=100_000))
    m1 = estimate_offset(correlate_times(dl_a, dl_b + c, static_delay_ps=100_000),
                         correlate_times(ul_b + c, ul_a, static_delay_ps=100_000))
    tol = 3 * math.hypot(m0.sigma_delta_ps, m1.sigma_delta_ps) + 5.0
    assert m1.delta_ps - m0.delta_ps == pytest.approx(c, abs=tol)
    assert m1.t_ab_ps - m0.t_ab_ps == pytest.approx(0.0, abs=tol)


def test_estimator_unbiased_over_runs():
    deltas = []
    sigma = None
    for seed in range(60):
        rng = np.random.default_rng(100 + seed)
        (dl_a, dl_b), (ul_b, ul_a) = _two_way_tags(rng, 2, 800, 50_000, 1_500, 500.0)
        m = estimate_offset(correlate_times(dl_a, dl_b, static_delay_ps=50_000),
                            correlate_times(ul_b, ul_a, static_delay_ps=50_000))
        deltas.append(m.delta_ps)
        sigma = m.sigma_delta_ps
    mean = float(np.mean(deltas))
    se = float(np.std(deltas, ddof=1) / math.sqrt(len(deltas)))
    assert abs(mean - 1_500) < 3 * se + 1.0
    assert sigma > 0


def test_missing_peak_cannot_estimate():
    rng = np.random.default_rng(3)
    flat_a = np.sort(rng.integers(0, 5 * PS, 2000))
    flat_b = np.sort(rng.integers(0, 5 * PS, 2000))
    (dl_a, dl_b), _ = _two_way_tags(rng, 5, 500, 0, 0, 300.0)
    with pytest.raises(CannotEstimate):
        estimate_offset(correlate_times(dl_a, dl_b),
                        correlate_times(flat_a, flat_b))


def test_convergence_scaling_law():
    # with no drift the scatter is statistics-limited: sigma(4t) ~ sigma(t)/2
    rng = np.random.default_rng(4)
    dl, ul = _two_way_tags(rng, 128, 2000, 50_000, 1_000, 600.0)
    fit = convergence_curve(dl, ul, [1, 2, 4, 8, 16], static_delay_ps=50_000)
    sig = {p.integration_s: p.sigma_delta_ps for p in fit.points}
    ratio = sig[1] / sig[4]
    assert 1.4 < ratio < 2.8
    assert fit.floor_ps < sig[16] + 5.0


def test_convergence_floor_tracks_wander():
    # slow relative drift leaves a window-to-window scatter floor
    rng = np.random.default_rng(5)
    drift = 5.77   # ps/s over 300 s -> ~500 ps scatter floor
    dl, ul = _two_way_tags(rng, 300, 400, 50_000, 0, 500.0,
                           drift_ps_per_s=drift)
    fit = convergence_curve(dl, ul, [1, 2, 5, 10, 30], static_delay_ps=50_000)
    expected_floor = drift * 300 / math.sqrt(12.0)
    assert fit.floor_ps == pytest.approx(expected_floor, rel=0.5)


def test_convergence_needs_enough_times():
    rng = np.random.default_rng(6)
    dl, ul = _two_way_tags(rng, 8, 2000, 0, 0, 300.0)
    with pytest.raises(ContractViolation):
        convergence_curve(dl, ul, [1, 2, 4])
    with pytest.raises(ContractViolation):
        convergence_curve(dl, ul, [1, 2, 3, 4, 100])


def test_convergence_exports(tmp_path):
    fit = ConvergenceFit(points=tuple(), a_ps_sqrt_s=100.0, floor_ps=50.0)
    write_convergence_fit_json(tmp_path / "fit.json", fit)
    assert '"A_ps_sqrt_s": 100.0' in (tmp_path / "fit.json").read_text()
    rng = np.random.default_rng(7)
    dl, ul = _two_way_tags(rng, 64, 2000, 0, 0, 300.0)
    res = convergence_curve(dl, ul, [1, 2, 4, 8, 16])
    write_convergence_csv(tmp_path / "conv.csv", res)
    lines = (tmp_path / "conv.csv").read_text().splitlines()
    assert lines[0] == "integration_s,sigma_delta_ps"
    assert len(lines) == 1 + len(res.points)
