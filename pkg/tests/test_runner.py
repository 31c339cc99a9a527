import dataclasses
import json
import math

import numpy as np
import pytest

from entnet import cli, coinc
from entnet.errors import ConfigError
from entnet.link import ChannelConfig
from entnet.presets import FIGURES, PRESETS, figure_scenario, preset_scenario
from entnet.runner import (AnalysisConfig, ScenarioConfig, _Engine,
                           batch_pipeline, load_scenario, run_stages,
                           save_scenario, scenario_hash)
from entnet.source import predicted_car
from entnet.timebase import EPOCH_PS, TagStream


def test_all_presets_build_and_roundtrip():
    for name in PRESETS:
        scn = preset_scenario(name)
        rebuilt = ScenarioConfig.from_dict(json.loads(json.dumps(scn.to_dict())))
        assert rebuilt.to_dict() == scn.to_dict()
        assert scenario_hash(rebuilt) == scenario_hash(scn)


def test_figure_names_resolve():
    assert set(FIGURES) == {"fig3", "fig4", "fig5_night", "fig6", "fig7",
                            "fig8", "fig9", "fig10"}
    for name in FIGURES:
        assert figure_scenario(name).name == FIGURES[name]
    with pytest.raises(ConfigError):
        figure_scenario("fig99")


def test_unknown_keys_rejected():
    data = preset_scenario("cb_fiber_peak").to_dict()
    data["typo_key"] = 1
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(data)
    data = preset_scenario("cb_fiber_peak").to_dict()
    data["nodes"]["C"]["detector"]["quantumness"] = 11
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(data)
    data = preset_scenario("cb_fiber_peak").to_dict()
    data["analysis"]["bin_widht_ps"] = 100
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(data)


def test_scenario_validation():
    base = preset_scenario("cb_fiber_peak")
    with pytest.raises(ConfigError):
        dataclasses.replace(base, experiment="teleportation")
    with pytest.raises(ConfigError):
        dataclasses.replace(base, duration_s=0.0)
    with pytest.raises(ConfigError):
        dataclasses.replace(base, links={"signal": base.links["signal"]})


def _starved(scn):
    links = dict(scn.links)
    ch = links["signal"].channel
    links["signal"] = dataclasses.replace(
        links["signal"], channel=ChannelConfig(60.0, ch.delay_ps, ch.medium))
    return dataclasses.replace(scn, links=links)


def test_stage_gating_starved_link(tmp_path):
    scn = _starved(preset_scenario("cb_fiber_peak", seed=7))
    manifest = run_stages(scn, tmp_path / "run")
    assert not manifest.ok
    assert manifest.failed_stage == "coincidence_peak"
    names = [s.name for s in manifest.stages]
    assert names == ["optical_path", "classical_link", "coincidence_peak"]
    assert manifest.stages[-1].passed is False
    # manifest still written with the failure recorded
    on_disk = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert on_disk["failed_stage"] == "coincidence_peak"


def test_run_small_preset_outputs(tmp_path):
    scn = preset_scenario("cb_fiber_peak")
    scn = dataclasses.replace(scn, duration_s=3.0)
    manifest = run_stages(scn, tmp_path / "run", seed=5)
    assert manifest.ok
    for fname in ("manifest.json", "scenario.json", "histogram.csv",
                  "peakfit.json", "metrics.json"):
        assert (tmp_path / "run" / fname).exists()
    assert len(manifest.batches) > 0
    rec = manifest.batches[0]
    reg = json.loads((tmp_path / "run" / "registry" / f"{rec['uuid']}.json").read_text())
    assert reg == rec


def test_run_determinism_in_process(tmp_path):
    scn = dataclasses.replace(preset_scenario("cb_fiber_peak"), duration_s=3.0)
    m1 = run_stages(scn, tmp_path / "a", seed=9)
    m2 = run_stages(scn, tmp_path / "b", seed=9)
    assert m1.to_dict() == m2.to_dict()
    assert (tmp_path / "a" / "histogram.csv").read_bytes() == \
        (tmp_path / "b" / "histogram.csv").read_bytes()
    m3 = run_stages(scn, tmp_path / "c", seed=10)
    assert m3.run_uuid != m1.run_uuid


def _poisson_stream(rate_hz, t_s, seed, channel="x"):
    rng = np.random.default_rng(seed)
    n = rng.poisson(rate_hz * t_s)
    times = np.sort(rng.integers(0, int(t_s * EPOCH_PS), n))
    return TagStream(np.full(n, channel), times)


def test_batch_pipeline_orphans(tmp_path):
    rng = np.random.default_rng(0)
    t_a = np.sort(np.concatenate(
        [rng.integers(e * EPOCH_PS, (e + 1) * EPOCH_PS, 50) for e in range(1, 11)]))
    t_b = np.sort(np.concatenate(
        [rng.integers(e * EPOCH_PS, (e + 1) * EPOCH_PS, 50) for e in range(3, 13)]))
    report, records = batch_pipeline(
        {"A": TagStream(np.full(t_a.size, "x"), t_a),
         "B": TagStream(np.full(t_b.size, "x"), t_b)}, out_dir=tmp_path)
    assert report.n_pairs == 8
    assert report.orphan_epochs == (1, 2, 11, 12)
    assert len(records) == 20
    assert len(list((tmp_path / "registry").glob("*.json"))) == 20


def test_batch_pipeline_shuffle_invariance():
    streams = {"A": _poisson_stream(2000, 10, 1), "B": _poisson_stream(2000, 10, 2)}
    r1, _ = batch_pipeline(streams)
    r2, _ = batch_pipeline(streams, consume_order=list(reversed(range(10))))
    rng = np.random.default_rng(3)
    order = list(range(10))
    rng.shuffle(order)
    r3, _ = batch_pipeline(streams, consume_order=order)
    assert np.array_equal(r1.histogram.counts, r2.histogram.counts)
    assert np.array_equal(r1.histogram.counts, r3.histogram.counts)
    with pytest.raises(ConfigError):
        batch_pipeline(streams, consume_order=[0, 0, 1])


def test_pipeline_car_matches_closed_form():
    # full-pipeline CAR against the rate-product prediction, with a window
    # wide enough to cover the whole correlation peak (B*window << 1)
    scn = dataclasses.replace(preset_scenario("cb_fiber_peak"), duration_s=8.0)
    engine = _Engine(scn)
    import uuid
    hist, _, _ = engine.run_epochs(scn.analysis, 8, stream=3, run_uuid=uuid.uuid4())
    window = 4000
    measured = coinc.car(hist, window)
    eta_s = engine.survival["signal"]
    eta_i = engine.survival["idler"]
    predicted = predicted_car(scn.source, eta_s, eta_i,
                              noise_s_hz=1000.0, noise_i_hz=8.0, window_ps=window)
    assert abs(measured - predicted) / predicted < 0.15


def test_jitter_scan_metrics(tmp_path):
    scn = preset_scenario("ca_jitter")
    scn = dataclasses.replace(scn, duration_s=2000.0)
    manifest = run_stages(scn, tmp_path / "jit", seed=3)
    assert manifest.ok
    fwhm = manifest.stages[-1].metrics["fwhm_ps"]
    assert fwhm == pytest.approx(541.0, abs=40.0)
    lines = (tmp_path / "jit" / "jitter_histogram.csv").read_text().splitlines()
    assert lines[0] == "bin_center_ps,count"


def test_cli_validate_run_and_errors(tmp_path, capsys):
    scn = dataclasses.replace(preset_scenario("cb_fiber_peak"), duration_s=2.0)
    path = tmp_path / "scn.json"
    save_scenario(path, scn)
    assert load_scenario(path).to_dict() == scn.to_dict()

    assert cli.main(["validate", str(path)]) == 0
    assert cli.main(["run", str(path), "--out", str(tmp_path / "out"), "--seed", "3"]) == 0
    assert (tmp_path / "out" / "manifest.json").exists()

    assert cli.main(["reproduce", "not-a-figure"]) == 2
    assert cli.main(["validate", str(tmp_path / "missing.json")]) == 2

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "experiment": "chsh",
                               "duration_s": 1, "bogus": True}))
    assert cli.main(["validate", str(bad)]) == 2

    starved = _starved(scn)
    spath = tmp_path / "starved.json"
    save_scenario(spath, starved)
    assert cli.main(["run", str(spath), "--out", str(tmp_path / "out2")]) == 3
    capsys.readouterr()


def test_qtt_clean_recovery(tmp_path):
    from entnet.presets import qtt_ab
    scn = qtt_ab(clean=True)
    scn = dataclasses.replace(scn, duration_s=10.0)
    manifest = run_stages(scn, tmp_path / "qtt", seed=6)
    assert manifest.ok
    mm = manifest.stages[-1].metrics
    assert abs(mm["delta_ps"] - mm["configured_delta_ps"]) < \
        3 * mm["sigma_delta_ps"] + 10.0
