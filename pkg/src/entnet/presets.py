"""Named scenario presets for the three-node network.

Topology: a central source node C feeds two arms. The idler arm always runs
over 200 m of fiber to node B (wavelength-multiplexed with the timing
signal, SNSPD detection); the signal arm is either measured locally at C or
sent over the ~150 m free-space path to node A (Si-APD detection, pilot-tone
synchronization). Loss/jitter constants are tuned so the headline numbers of
the modeled system come out of the full pipeline:

* C-B correlation peak FWHM ~995 ps, per-combination rate ~344 1/s,
* A-B peak FWHM ~1077 ps with the extra 13.8 dB free-space budget,
* relative pilot-tone timing jitter FWHM ~541 ps,
* night-time background ~4 kcps vs day-time ~1 Mcps at node A.
"""
from __future__ import annotations

from .errors import ConfigError
from .link import ChannelConfig, DetectorConfig, QsaConfig, si_apd, snspd
from .pointing import PointingConfig
from .runner import (AnalysisConfig, ArmLink, ChshParams, CpufParams,
                     JitterParams, NodeSpec, PointingParams, QttParams,
                     ScanParams, ScenarioConfig)
from .source import SourceConfig
from .timebase import ClockModel, SyncConfig

# Extra free-space budget from C's optical head to A's analyzer; the rate
# ratio between the fiber and hybrid configurations is 10^(-1.38).
FREESPACE_EXTRA_LOSS_DB = 13.8

# Common signal-collection budget (source -> analyzer, incl. coupling); set
# so the fiber configuration delivers ~344 windowed coincidences per second
# and combination at 10% source brightness.
SIGNAL_BASE_LOSS_DB = 8.82
IDLER_FIBER_LOSS_DB = 2.4
IDLER_LOCAL_LOSS_DB = 3.0

# Detector timing spreads chosen so the quadrature jitter budgets close on
# the 995 ps (C-B) and 1077 ps (A-B) peak-width targets with a 350 ps
# intrinsic pair width and the 200 ps free-space sync jitter.
LAB_APD_JITTER_PS = 236.0
NODE_A_APD_JITTER_PS = 216.0

DAY_STRAY_PER_PORT_HZ = 2.5e5    # ~1 Mcps total over four ports
NIGHT_STRAY_PER_PORT_HZ = 750.0  # ~3 kcps total, next to ~1 kcps of darks


def _source(brightness=0.10, visibility=0.943, seed=0):
    return SourceConfig.from_brightness(brightness, state_visibility=visibility,
                                        correlation_width_sigma_ps=350.0,
                                        heralding_efficiency=0.30, seed=seed)


def _node_c():
    det = DetectorConfig(efficiency=0.60, dark_rate_hz=250.0, dead_time_ps=50_000,
                         jitter_sigma_ps=LAB_APD_JITTER_PS, name="si_apd_lab")
    return NodeSpec(clock=ClockModel(), sync=SyncConfig(mode="fiber_wr"),
                    qsa=QsaConfig(), detector=det)


def _node_b():
    return NodeSpec(clock=ClockModel(), sync=SyncConfig(mode="fiber_wr"),
                    qsa=QsaConfig(), detector=snspd(dark_rate_hz=2.0))


def _node_a(stray_hz=NIGHT_STRAY_PER_PORT_HZ, jitter_ps=NODE_A_APD_JITTER_PS):
    det = si_apd(jitter_sigma_ps=jitter_ps, dark_rate_hz=250.0, stray_rate_hz=stray_hz)
    return NodeSpec(clock=ClockModel(),
                    sync=SyncConfig(mode="freespace_pilot", clock_hz=5_000_000),
                    qsa=QsaConfig(), detector=det)


def _node_c_ingaas():
    # idler measured locally at C on InGaAs running far off its optimal band
    det = DetectorConfig(efficiency=0.20, dark_rate_hz=250.0, dead_time_ps=50_000,
                         jitter_sigma_ps=LAB_APD_JITTER_PS, name="ingaas")
    return NodeSpec(clock=ClockModel(), sync=SyncConfig(mode="fiber_wr"),
                    qsa=QsaConfig(), detector=det)


def _fiber_links():
    return {
        "signal": ArmLink("C", ChannelConfig(SIGNAL_BASE_LOSS_DB, 50_000, "fiber")),
        "idler": ArmLink("B", ChannelConfig(IDLER_FIBER_LOSS_DB, 1_000_000, "fiber")),
    }


def _hybrid_links():
    return {
        "signal": ArmLink("A", ChannelConfig(SIGNAL_BASE_LOSS_DB + FREESPACE_EXTRA_LOSS_DB,
                                             500_000, "freespace")),
        "idler": ArmLink("B", ChannelConfig(IDLER_FIBER_LOSS_DB, 1_000_000, "fiber")),
    }


def _ca_links():
    return {
        "signal": ArmLink("A", ChannelConfig(SIGNAL_BASE_LOSS_DB + FREESPACE_EXTRA_LOSS_DB,
                                             500_000, "freespace")),
        "idler": ArmLink("C", ChannelConfig(IDLER_LOCAL_LOSS_DB, 50_000, "fiber")),
    }


def cb_fiber_chsh(seed=42):
    """Fiber configuration C-B running the passive-basis CHSH measurement."""
    return ScenarioConfig(
        name="cb_fiber_chsh", experiment="chsh", duration_s=50.0, seed=seed,
        source=_source(), nodes={"C": _node_c(), "B": _node_b()},
        links=_fiber_links(),
        analysis=AnalysisConfig(window_ps=1000, static_delay_ps=950_000),
        chsh=ChshParams(s_run_s=50.0, qber_run_s=40.0))


def cb_fiber_scan(seed=42):
    """Fiber configuration C-B visibility fringe scan."""
    return ScenarioConfig(
        name="cb_fiber_scan", experiment="visibility_scan", duration_s=96.0,
        seed=seed, source=_source(), nodes={"C": _node_c(), "B": _node_b()},
        links=_fiber_links(),
        analysis=AnalysisConfig(window_ps=1000, static_delay_ps=950_000),
        scan=ScanParams(n_points=12, dwell_s=8.0, scan_arm="idler"))


def cb_fiber_peak(seed=42, duration_s=10.0, brightness=0.10):
    return ScenarioConfig(
        name="cb_fiber_peak", experiment="correlation_peak",
        duration_s=duration_s, seed=seed, source=_source(brightness=brightness),
        nodes={"C": _node_c(), "B": _node_b()}, links=_fiber_links(),
        analysis=AnalysisConfig(window_ps=1000, static_delay_ps=950_000))


def ab_hybrid_chsh(seed=42):
    """Hybrid fiber/free-space configuration A-B (edge nodes via C)."""
    return ScenarioConfig(
        name="ab_hybrid_chsh", experiment="chsh", duration_s=60.0, seed=seed,
        source=_source(), nodes={"A": _node_a(), "B": _node_b()},
        links=_hybrid_links(),
        analysis=AnalysisConfig(window_ps=1100, static_delay_ps=500_000),
        chsh=ChshParams(s_run_s=60.0, qber_run_s=60.0))


def ab_hybrid_peak(seed=42, duration_s=85.0):
    return ScenarioConfig(
        name="ab_hybrid_peak", experiment="correlation_peak",
        duration_s=duration_s, seed=seed, source=_source(),
        nodes={"A": _node_a(), "B": _node_b()}, links=_hybrid_links(),
        analysis=AnalysisConfig(window_ps=1100, static_delay_ps=500_000))


def ca_day(seed=42, duration_s=60.0):
    """Daylight C-A correlation run: background-limited peak."""
    return ScenarioConfig(
        name="ca_day", experiment="correlation_peak", duration_s=duration_s,
        seed=seed, source=_source(),
        nodes={"A": _node_a(stray_hz=DAY_STRAY_PER_PORT_HZ), "C": _node_c_ingaas()},
        links=_ca_links(),
        analysis=AnalysisConfig(window_ps=1000, static_delay_ps=-450_000))


def ca_night(seed=42, duration_s=60.0):
    """Night-time C-A correlation run: stray light down to ~3 kcps."""
    return ScenarioConfig(
        name="ca_night", experiment="correlation_peak", duration_s=duration_s,
        seed=seed, source=_source(),
        nodes={"A": _node_a(stray_hz=NIGHT_STRAY_PER_PORT_HZ), "C": _node_c_ingaas()},
        links=_ca_links(),
        analysis=AnalysisConfig(window_ps=1000, static_delay_ps=-450_000))


def cb_qtm(seed=42):
    """Low-brightness, low-noise C-B correlation peak (timetag-module regime)."""
    import dataclasses
    return dataclasses.replace(cb_fiber_peak(seed=seed, duration_s=20.0, brightness=0.02),
                               name="cb_qtm")


def ca_jitter(seed=42):
    """Relative pilot-tone timing jitter between C and A, 10^4 start sequences."""
    node_c = NodeSpec(clock=ClockModel(jitter_sigma_ps=162.5, seed=1),
                      sync=SyncConfig(mode="fiber_wr"), qsa=QsaConfig(),
                      detector=snspd())
    node_a = NodeSpec(clock=ClockModel(jitter_sigma_ps=162.5, seed=2),
                      sync=SyncConfig(mode="freespace_pilot", clock_hz=5_000_000,
                                      residual_jitter_sigma_ps=0.0),
                      qsa=QsaConfig(), detector=si_apd())
    return ScenarioConfig(
        name="ca_jitter", experiment="jitter_scan", duration_s=10_000.0,
        seed=seed, source=_source(), nodes={"C": node_c, "A": node_a},
        links={}, jitter=JitterParams(node_ref="C", node_meas="A"))


def ab_sync_selftest(seed=42):
    """Heterogeneous-sync self-test: pilot-tone lock at A, shared reference
    with B, and an A-B coincidence peak despite the different sync paths."""
    return ScenarioConfig(
        name="ab_sync_selftest", experiment="correlation_peak", duration_s=30.0,
        seed=seed, source=_source(), nodes={"A": _node_a(), "B": _node_b()},
        links=_hybrid_links(),
        analysis=AnalysisConfig(window_ps=1100, static_delay_ps=500_000))


def qtt_ab(seed=42, clean=False):
    """Two-way time transfer over the hybrid link.

    The wander preset adds a slow relative clock drift so the window-to-window
    scatter bottoms out near the dominant detector jitter; clean=True removes
    it for bias checks.
    """
    node_a = NodeSpec(clock=ClockModel(), sync=SyncConfig(mode="freespace_pilot",
                                                          clock_hz=5_000_000),
                      qsa=QsaConfig(), detector=si_apd(jitter_sigma_ps=500.0))
    drift = 0.0 if clean else 0.00577   # ppb; ~5.77 ps/s of relative wander
    node_b = NodeSpec(clock=ClockModel(offset_ps=2_000, drift_ppb=drift),
                      sync=SyncConfig(mode="fiber_wr"), qsa=QsaConfig(),
                      detector=snspd())
    return ScenarioConfig(
        name="qtt_ab_clean" if clean else "qtt_ab", experiment="qtt",
        duration_s=30.0 if clean else 300.0, seed=seed, source=_source(),
        nodes={"A": node_a, "B": node_b}, links={},
        qtt=QttParams(pair_rate_hz=2e5, p_local=0.05, p_remote=0.05,
                      flight_ps=500_000,
                      integration_times_s=(1.0, 2.0, 5.0, 10.0, 30.0),
                      convergence=not clean))


def pointing_c(seed=42, duration_s=60.0):
    """Transmitter-head pointing loop telemetry."""
    return ScenarioConfig(
        name="pointing_c", experiment="pointing", duration_s=duration_s,
        seed=seed, source=_source(), nodes={}, links={},
        pointing=PointingParams(config=PointingConfig()))


def cpuf_ab(seed=42, n_handshakes=100):
    """Mutual cPUF authentication demo plus AEAD rekey accounting."""
    return ScenarioConfig(
        name="cpuf_ab", experiment="cpuf_demo", duration_s=1.0, seed=seed,
        source=_source(), nodes={}, links={},
        cpuf=CpufParams(n_handshakes=n_handshakes, skr_bits_per_s=33.0))


PRESETS = {
    "cb_fiber_chsh": cb_fiber_chsh,
    "cb_fiber_scan": cb_fiber_scan,
    "cb_fiber_peak": cb_fiber_peak,
    "ab_hybrid_chsh": ab_hybrid_chsh,
    "ab_hybrid_peak": ab_hybrid_peak,
    "ca_day": ca_day,
    "ca_night": ca_night,
    "cb_qtm": cb_qtm,
    "ca_jitter": ca_jitter,
    "ab_sync_selftest": ab_sync_selftest,
    "qtt_ab": qtt_ab,
    "pointing_c": pointing_c,
    "cpuf_ab": cpuf_ab,
}

# Reproduction targets exposed through the CLI; each maps to a preset.
FIGURES = {
    "fig3": "ca_jitter",
    "fig4": "ca_day",
    "fig5_night": "ca_night",
    "fig6": "ab_sync_selftest",
    "fig7": "ab_hybrid_chsh",
    "fig8": "pointing_c",
    "fig9": "qtt_ab",
    "fig10": "cb_qtm",
}


def preset_scenario(name, seed=None):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    scn = PRESETS[name]() if seed is None else PRESETS[name](seed=seed)
    return scn


def figure_scenario(name, seed=None):
    if name not in FIGURES:
        raise ConfigError(f"unknown figure {name!r}; available: {sorted(FIGURES)}")
    return preset_scenario(FIGURES[name], seed=seed)
