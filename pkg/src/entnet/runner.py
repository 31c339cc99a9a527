"""Scenario-driven experiment orchestration.

A scenario declares the source, the two photon arms (each terminating at a
measuring node), per-node clock/sync/analyzer/detector settings, and one
experiment. Runs proceed through the four bring-up stages in order, each
gating the next:

1. optical_path      link budgets; pointing loop spun up for free-space arms
2. classical_link    pilot-tone clock recovery and timing-jitter validation
3. coincidence_peak  source verified through a correlation peak fit
4. experiment        the scenario's measurement, with all result files

Everything is reproducible: identical scenario + seed yields byte-identical
outputs (batch UUIDs are derived from the run id, random streams from
per-purpose seed sequences, and no wall-clock time is recorded).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import uuid as uuidlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classical, coinc, entanglement, pointing as pointing_mod, qtt as qtt_mod
from .errors import CannotEstimate, ConfigError, EntnetError, StageFailure
from .link import ChannelConfig, DetectorConfig, QsaConfig, analyze_and_detect
from .source import SourceConfig, sample_surviving_arms
from .timebase import (EPOCH_PS, ClockModel, SyncConfig, TagStream, apply_clock,
                       batch_tags, batch_to_json, estimate_relative_jitter,
                       generate_start_sequences, write_tag_stream)

log = logging.getLogger(__name__)

_RUN_NAMESPACE = uuidlib.UUID("6fb1e2a4-9c1d-4c36-8f90-2d1bb7c2a001")

EXPERIMENTS = ("jitter_scan", "correlation_peak", "visibility_scan", "chsh",
               "qtt", "pointing", "cpuf_demo")

_PHOTON_EXPERIMENTS = ("correlation_peak", "visibility_scan", "chsh")


# ---------------------------------------------------------------------------
# Scenario configuration tree
# ---------------------------------------------------------------------------

def _take(data, allowed, ctx):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {ctx}")


def _build(cls, data, ctx, special=None):
    """Strict dataclass construction from a plain dict."""
    if not isinstance(data, dict):
        raise ConfigError(f"{ctx} must be a mapping")
    special = special or {}
    names = [f.name for f in dataclasses.fields(cls) if f.name not in special.get("skip", ())]
    _take(data, names, ctx)
    kwargs = {}
    for key, value in data.items():
        conv = special.get(key)
        kwargs[key] = conv(value) if conv else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {ctx}: {exc}") from exc


def _plain(obj, skip=()):
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        out[f.name] = getattr(obj, f.name)
    return out


@dataclass
class NodeSpec:
    clock: ClockModel = field(default_factory=ClockModel)
    sync: SyncConfig = field(default_factory=SyncConfig)
    qsa: QsaConfig = field(default_factory=QsaConfig)
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(efficiency=0.5))

    def to_dict(self):
        return {"clock": _plain(self.clock), "sync": _plain(self.sync),
                "qsa": {"basis_angle_rad": self.qsa.basis_angle_rad,
                        "passive_split": self.qsa.passive_split,
                        "port_delay_ps": dict(self.qsa.port_delay_ps)},
                "detector": _plain(self.detector)}

    @classmethod
    def from_dict(cls, data, ctx="node"):
        _take(data, ("clock", "sync", "qsa", "detector"), ctx)
        qsa_data = dict(data.get("qsa", {}))
        _take(qsa_data, ("basis_angle_rad", "passive_split", "port_delay_ps"), f"{ctx}.qsa")
        return cls(
            clock=_build(ClockModel, data.get("clock", {}), f"{ctx}.clock"),
            sync=_build(SyncConfig, data.get("sync", {}), f"{ctx}.sync"),
            qsa=QsaConfig(**qsa_data),
            detector=_build(DetectorConfig, data.get("detector", {}), f"{ctx}.detector"))


@dataclass
class ArmLink:
    to_node: str
    channel: ChannelConfig

    def to_dict(self):
        return {"to_node": self.to_node, "channel": _plain(self.channel)}

    @classmethod
    def from_dict(cls, data, ctx="link"):
        _take(data, ("to_node", "channel"), ctx)
        return cls(to_node=data["to_node"],
                   channel=_build(ChannelConfig, data.get("channel", {}), f"{ctx}.channel"))


@dataclass
class AnalysisConfig:
    bin_width_ps: int = 100
    range_lo_ps: int = -50_000
    range_hi_ps: int = 50_000
    window_ps: int = 1000
    static_delay_ps: int = 0
    peak_probe_s: float = 5.0

    @property
    def range_ps(self):
        return (self.range_lo_ps, self.range_hi_ps)


@dataclass
class ScanParams:
    n_points: int = 12
    dwell_s: float = 8.0
    scan_arm: str = "idler"


@dataclass
class ChshParams:
    s_run_s: float = 50.0
    qber_run_s: float = 40.0
    extraction_eff: float = 0.56


@dataclass
class QttParams:
    pair_rate_hz: float = 2e5
    p_local: float = 0.05
    p_remote: float = 0.05
    flight_ps: int = 500_000
    integration_times_s: tuple = (1.0, 2.0, 5.0, 10.0, 30.0)
    estimator: str = "fit"
    convergence: bool = True


@dataclass
class JitterParams:
    node_ref: str = "C"
    node_meas: str = "A"


@dataclass
class PilotParams:
    demo_period_ps: int = 10 ** 9          # desk-scale start-sequence period
    n_periods: int = 6
    n_jitter_sequences: int = 2000
    spacing_tol_ps: int = 2000


@dataclass
class PointingParams:
    config: pointing_mod.PointingConfig = field(default_factory=pointing_mod.PointingConfig)

    def to_dict(self):
        d = _plain(self.config, skip=("pid", "disturbance"))
        d["pid"] = _plain(self.config.pid)
        d["disturbance"] = _plain(self.config.disturbance)
        return d

    @classmethod
    def from_dict(cls, data, ctx="pointing"):
        data = dict(data)
        pid = _build(pointing_mod.PidConfig, data.pop("pid", {}), f"{ctx}.pid")
        dist = _build(pointing_mod.DisturbanceConfig, data.pop("disturbance", {}),
                      f"{ctx}.disturbance")
        names = [f.name for f in dataclasses.fields(pointing_mod.PointingConfig)
                 if f.name not in ("pid", "disturbance")]
        _take(data, names, ctx)
        return cls(config=pointing_mod.PointingConfig(pid=pid, disturbance=dist, **data))


@dataclass
class CpufParams:
    n_handshakes: int = 100
    skr_bits_per_s: float = 33.0


@dataclass
class ScenarioConfig:
    name: str
    experiment: str
    duration_s: float
    seed: int = 0
    source: SourceConfig = field(default_factory=lambda: SourceConfig(pair_rate_hz=1e6))
    nodes: dict = field(default_factory=dict)
    links: dict = field(default_factory=dict)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    scan: ScanParams = field(default_factory=ScanParams)
    chsh: ChshParams = field(default_factory=ChshParams)
    qtt: QttParams = field(default_factory=QttParams)
    jitter: JitterParams = field(default_factory=JitterParams)
    pilot: PilotParams = field(default_factory=PilotParams)
    pointing: PointingParams = field(default_factory=PointingParams)
    cpuf: CpufParams = field(default_factory=CpufParams)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose one of {EXPERIMENTS}")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        bad_arms = set(self.links) - {"signal", "idler"}
        if bad_arms:
            raise ConfigError(f"unknown link arms {sorted(bad_arms)}")
        for arm, link in self.links.items():
            if link.to_node not in self.nodes:
                raise ConfigError(f"link {arm!r} terminates at undeclared node "
                                  f"{link.to_node!r}")
        if self.experiment in _PHOTON_EXPERIMENTS and set(self.links) != {"signal", "idler"}:
            raise ConfigError(f"experiment {self.experiment!r} needs both a "
                              "'signal' and an 'idler' link")

    def to_dict(self):
        return {
            "name": self.name, "experiment": self.experiment,
            "duration_s": self.duration_s, "seed": self.seed,
            "source": _plain(self.source),
            "nodes": {k: v.to_dict() for k, v in self.nodes.items()},
            "links": {k: v.to_dict() for k, v in self.links.items()},
            "analysis": _plain(self.analysis),
            "scan": _plain(self.scan),
            "chsh": _plain(self.chsh),
            "qtt": {**_plain(self.qtt),
                    "integration_times_s": list(self.qtt.integration_times_s)},
            "jitter": _plain(self.jitter),
            "pilot": _plain(self.pilot),
            "pointing": self.pointing.to_dict(),
            "cpuf": _plain(self.cpuf),
        }

    @classmethod
    def from_dict(cls, data):
        _take(data, ("name", "experiment", "duration_s", "seed", "source", "nodes",
                     "links", "analysis", "scan", "chsh", "qtt", "jitter", "pilot",
                     "pointing", "cpuf"), "scenario")
        for required in ("name", "experiment", "duration_s"):
            if required not in data:
                raise ConfigError(f"scenario is missing {required!r}")
        return cls(
            name=data["name"], experiment=data["experiment"],
            duration_s=float(data["duration_s"]), seed=int(data.get("seed", 0)),
            source=_build(SourceConfig, data.get("source", {}), "source"),
            nodes={k: NodeSpec.from_dict(v, f"nodes.{k}")
                   for k, v in data.get("nodes", {}).items()},
            links={k: ArmLink.from_dict(v, f"links.{k}")
                   for k, v in data.get("links", {}).items()},
            analysis=_build(AnalysisConfig, data.get("analysis", {}), "analysis"),
            scan=_build(ScanParams, data.get("scan", {}), "scan"),
            chsh=_build(ChshParams, data.get("chsh", {}), "chsh"),
            qtt=_build(QttParams, data.get("qtt", {}), "qtt",
                       special={"integration_times_s": tuple}),
            jitter=_build(JitterParams, data.get("jitter", {}), "jitter"),
            pilot=_build(PilotParams, data.get("pilot", {}), "pilot"),
            pointing=PointingParams.from_dict(data["pointing"]) if "pointing" in data
            else PointingParams(),
            cpuf=_build(CpufParams, data.get("cpuf", {}), "cpuf"))


def load_scenario(path):
    with open(path) as fh:
        return ScenarioConfig.from_dict(json.load(fh))


def save_scenario(path, scenario):
    with open(path, "w") as fh:
        json.dump(scenario.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def scenario_hash(scenario):
    payload = json.dumps(scenario.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# Simulation engine
# ---------------------------------------------------------------------------

def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


class _Engine:
    """Per-epoch photon-pair simulation bound to one scenario."""

    def __init__(self, scenario):
        self.scn = scenario
        self.arm_node = {arm: link.to_node for arm, link in scenario.links.items()}
        self.channels = {arm: link.channel for arm, link in scenario.links.items()}
        # detector efficiency is folded into the arm survival probability,
        # so the detection step runs its thinning at unit efficiency
        self.survival = {}
        self.unit_dets = {}
        for arm, link in scenario.links.items():
            node = scenario.nodes[link.to_node]
            self.survival[arm] = (scenario.source.heralding_efficiency
                                  * link.channel.survival * node.detector.efficiency)
            self.unit_dets[arm] = dataclasses.replace(node.detector, efficiency=1.0)

    def arm_rate_hz(self, arm):
        """Expected detected singles rate of one arm before backgrounds."""
        return self.scn.source.pair_rate_hz * self.survival[arm]

    def epoch_tags(self, epoch, stream, angle_overrides=None):
        """Simulate one epoch; returns {node_id: TagStream} in local time."""
        scn = self.scn
        rng = _rng(scn.seed, stream, epoch, 0)
        ens, sig, idl = sample_surviving_arms(
            EPOCH_PS, scn.source, self.survival["signal"], self.survival["idler"], rng)
        t0 = epoch * EPOCH_PS
        streams = {"signal": sig, "idler": idl}
        qsas = {}
        for arm in ("signal", "idler"):
            streams[arm].time_ps = streams[arm].time_ps + np.int64(
                t0 + self.channels[arm].delay_ps)
            node = scn.nodes[self.arm_node[arm]]
            qsa = node.qsa
            if angle_overrides and arm in angle_overrides:
                qsa = dataclasses.replace(qsa, basis_angle_rad=angle_overrides[arm])
            qsas[arm] = qsa
        tags = analyze_and_detect(ens, streams, qsas,
                                  {arm: self.unit_dets[arm] for arm in streams},
                                  EPOCH_PS, rng, t_start_ps=t0)
        out = {}
        for k, arm in enumerate(("signal", "idler")):
            node_id = self.arm_node[arm]
            node = scn.nodes[node_id]
            rng_clock = _rng(scn.seed, stream, epoch, 10 + k)
            times = apply_clock(tags[arm].times_ps, node.clock, rng=rng_clock)
            if node.sync.residual_jitter_sigma_ps > 0:
                times = times + np.rint(rng_clock.normal(
                    0.0, node.sync.residual_jitter_sigma_ps, times.size)).astype(np.int64)
            stream_tags = TagStream(tags[arm].channels, times).sorted()
            if node_id in out:
                out[node_id] = TagStream.merged(out[node_id], stream_tags)
            else:
                out[node_id] = stream_tags
        return out

    def run_epochs(self, scn_analysis, n_epochs, stream, run_uuid,
                   angle_overrides=None, match_center_ps=None):
        """Stream n_epochs through batching and per-epoch correlation.

        Each completed one-second batch pair is correlated (and, when
        match_center_ps is given, coincidence-matched) immediately and its
        tags discarded, so memory stays bounded at a couple of epochs. Pairs
        straddling an epoch boundary are not counted, mirroring the bounded
        per-batch processing of the pipeline (a ~1e-9 fraction per window).
        Returns (histogram, combo_counts or None, batch_records).
        """
        node_a, node_b = (self.arm_node["signal"], self.arm_node["idler"])
        namespace = uuidlib.uuid5(run_uuid, f"stream:{stream}")
        node_order = [node_a] if node_a == node_b else [node_a, node_b]
        carry = {node: TagStream.empty() for node in node_order}
        pending = {node: {} for node in carry}
        hist = coinc.CorrelationHistogram.empty(
            scn_analysis.bin_width_ps, scn_analysis.range_ps, scn_analysis.static_delay_ps)
        combo_counts = {} if match_center_ps is not None else None
        records = []

        def flush(node, up_to_ps):
            stream_tags = carry[node]
            cut = int(np.searchsorted(stream_tags.times_ps, up_to_ps))
            if cut == 0:
                return
            head = TagStream(stream_tags.channels[:cut], stream_tags.times_ps[:cut])
            carry[node] = TagStream(stream_tags.channels[cut:], stream_tags.times_ps[cut:])
            for batch in batch_tags(head, node, uuid_namespace=namespace):
                pending[node][batch.epoch_index] = batch
                records.append(_registry_record(batch))

        def drain():
            common = sorted(set(pending[node_a]) & set(pending[node_b]))
            for epoch in common:
                ba = pending[node_a].pop(epoch)
                bb = pending[node_b].pop(epoch)
                h = coinc.correlate_times(ba.tags.times_ps, bb.tags.times_ps,
                                          scn_analysis.bin_width_ps, scn_analysis.range_ps,
                                          scn_analysis.static_delay_ps)
                hist.counts += h.counts
                hist.n_epochs += 1
                if combo_counts is not None:
                    m = coinc.match_coincidences(ba.tags, bb.tags, scn_analysis.window_ps,
                                                 center_ps=match_center_ps,
                                                 static_delay_ps=scn_analysis.static_delay_ps)
                    for key, n in m.combo_counts().items():
                        combo_counts[key] = combo_counts.get(key, 0) + n

        for epoch in range(n_epochs):
            chunks = self.epoch_tags(epoch, stream, angle_overrides)
            for node_id, tags in chunks.items():
                carry[node_id] = TagStream.merged(carry[node_id], tags)
                flush(node_id, epoch * EPOCH_PS)   # epochs <= epoch-1 are complete
            drain()
        for node_id in carry:
            flush(node_id, np.iinfo(np.int64).max)
        drain()
        for node_id in pending:   # orphan boundary epochs at one node only
            for epoch in sorted(pending[node_id]):
                log.debug("orphan epoch %d at node %s dropped", epoch, node_id)
        if hist.n_epochs == 0:
            raise StageFailure("no common epochs produced any correlations",
                               stage="coincidence_peak")
        return hist, combo_counts, records


# ---------------------------------------------------------------------------
# Batch pipeline (producer/consumer with a file-backed registry)
# ---------------------------------------------------------------------------

@dataclass
class PipelineReport:
    n_pairs: int
    orphan_epochs: tuple
    histogram: coinc.CorrelationHistogram


def _registry_record(batch):
    return {"uuid": batch.uuid, "node_id": batch.node_id,
            "epoch_index": batch.epoch_index, "n_tags": len(batch.tags)}


def write_registry_records(out_dir, records):
    reg_dir = Path(out_dir) / "registry"
    reg_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        with open(reg_dir / f"{rec['uuid']}.json", "w") as fh:
            json.dump(rec, fh, sort_keys=True)
            fh.write("\n")


def write_registry(out_dir, batches):
    records = [_registry_record(b) for b in batches]
    write_registry_records(out_dir, records)
    return records


def batch_pipeline(streams, out_dir=None, analysis=AnalysisConfig(),
                   uuid_namespace=None, consume_order=None):
    """Batch two node streams, register every batch, and correlate epoch pairs.

    ``streams`` maps exactly two node ids to TagStreams. Pairs of matching
    epochs are correlated independently and merged by summation, so the
    result is byte-identical for any consumption order (pass consume_order to
    exercise that). Epochs present at only one node are logged and skipped.
    """
    if len(streams) != 2:
        raise ConfigError("batch_pipeline needs exactly two node streams")
    (node_a, sa), (node_b, sb) = sorted(streams.items())
    ns = uuid_namespace or _RUN_NAMESPACE
    batches_a = batch_tags(sa, node_a, uuid_namespace=ns)
    batches_b = batch_tags(sb, node_b, uuid_namespace=ns)
    records = []
    if out_dir is not None:
        records = write_registry(out_dir, batches_a + batches_b)

    map_a = {b.epoch_index: b for b in batches_a}
    map_b = {b.epoch_index: b for b in batches_b}
    common = sorted(set(map_a) & set(map_b))
    orphans = tuple(sorted(set(map_a) ^ set(map_b)))
    for epoch in orphans:
        log.warning("epoch %d present at one node only; skipped", epoch)
    order = list(common) if consume_order is None else list(consume_order)
    if sorted(order) != common:
        raise ConfigError("consume_order must be a permutation of the common epochs")

    hist = coinc.CorrelationHistogram.empty(analysis.bin_width_ps, analysis.range_ps,
                                            analysis.static_delay_ps)
    for epoch in order:
        h = coinc.correlate_times(map_a[epoch].tags.times_ps, map_b[epoch].tags.times_ps,
                                  analysis.bin_width_ps, analysis.range_ps,
                                  analysis.static_delay_ps)
        hist = hist.merge(h)
    report = PipelineReport(len(common), orphans, hist)
    return report, records


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    passed: bool
    skipped: bool = False
    metrics: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    error: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "skipped": self.skipped,
                "metrics": self.metrics, "files": self.files, "error": self.error}


@dataclass
class RunManifest:
    run_uuid: str
    scenario_name: str
    scenario_hash: str
    seed: int
    stages: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    files: list = field(default_factory=list)
    failed_stage: str | None = None

    @property
    def ok(self):
        return self.failed_stage is None

    def to_dict(self):
        return {"run_uuid": self.run_uuid, "scenario_name": self.scenario_name,
                "scenario_hash": self.scenario_hash, "seed": self.seed,
                "stages": [s.to_dict() for s in self.stages],
                "batches": self.batches, "files": self.files,
                "failed_stage": self.failed_stage}


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_json_safe(v) for v in obj.tolist()]
    return obj


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_json_safe(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _stage_optical_path(scn, out_dir, seed, cache):
    metrics = {"links": {}}
    for arm, link in scn.links.items():
        metrics["links"][arm] = {
            "to_node": link.to_node, "loss_db": link.channel.loss_db,
            "survival": link.channel.survival, "medium": link.channel.medium,
            "delay_ps": link.channel.delay_ps}
    needs_pointing = any(l.channel.medium == "freespace" for l in scn.links.values()) \
        or scn.experiment == "pointing"
    if needs_pointing:
        cfg = scn.pointing.config
        tel = pointing_mod.simulate_loop(cfg, 3.0, seed=np.random.SeedSequence([seed, 41]))
        est = pointing_mod.estimate_stability(tel, cfg)
        metrics["pointing_probe"] = {"theta_rms_x_urad": est.theta_rms_x_urad,
                                     "theta_rms_y_urad": est.theta_rms_y_urad}
    return metrics, []


def _stage_classical_link(scn, out_dir, seed, cache):
    metrics = {"sync": {}}
    for node_id, node in sorted(scn.nodes.items()):
        if node.sync.mode != "freespace_pilot":
            metrics["sync"][node_id] = {"mode": node.sync.mode, "lock": True}
            continue
        cell_ps = 10 ** 12 // node.sync.clock_hz
        period_cells = scn.pilot.demo_period_ps // cell_ps
        frame_cfg = classical.FrameConfig(start_seq_period_ps=scn.pilot.demo_period_ps,
                                          spacing_tol_ps=scn.pilot.spacing_tol_ps)
        payloads = [f"sync-{k:02d}".encode() for k in range(scn.pilot.n_periods)]
        bits = classical.make_pilot_bits(payloads, int(period_cells), frame_cfg)
        stream = classical.manchester_encode(bits, node.sync.clock_hz,
                                             start_time_ps=node.clock.offset_ps)
        rec = classical.recover_clock(stream, frame_cfg)
        metrics["sync"][node_id] = {"mode": node.sync.mode, "lock": bool(rec.lock),
                                    "n_start_sequences": int(rec.start_seq_times_ps.size)}
        if not rec.lock:
            raise StageFailure(f"pilot-tone clock recovery failed at node {node_id}",
                               stage="classical_link")
    tag_nodes = sorted({l.to_node for l in scn.links.values()})
    if scn.experiment == "jitter_scan":
        tag_nodes = [scn.jitter.node_ref, scn.jitter.node_meas]
    if len(tag_nodes) == 2:
        n = scn.pilot.n_jitter_sequences
        seqs = []
        for k, node_id in enumerate(tag_nodes):
            node = scn.nodes[node_id]
            sync = dataclasses.replace(node.sync, start_seq_period_ps=EPOCH_PS)
            seqs.append(generate_start_sequences(
                n * EPOCH_PS, sync, node.clock, rng=_rng(seed, 20, k)))
        est = estimate_relative_jitter(seqs[0], seqs[1])
        metrics["start_sequence_jitter"] = {
            "nodes": tag_nodes, "fwhm_ps": est.fwhm_ps, "sigma_ps": est.sigma_ps}
        cache["jitter_estimate"] = est
    return metrics, []


def _stage_coincidence_peak(scn, out_dir, seed, cache):
    if scn.experiment not in _PHOTON_EXPERIMENTS:
        return None, []   # stage skipped for non-photon experiments
    engine = cache["engine"]
    run_uuid = cache["run_uuid"]
    if scn.experiment == "correlation_peak":
        probe_epochs = max(int(round(scn.duration_s)), 1)
    else:
        probe_epochs = max(int(round(min(scn.analysis.peak_probe_s, scn.duration_s))), 1)
    hist, _, records = engine.run_epochs(scn.analysis, probe_epochs, stream=3,
                                         run_uuid=run_uuid)
    cache.setdefault("batch_records", []).extend(records)
    try:
        fit = coinc.fit_peak(hist)
    except EntnetError as exc:
        raise StageFailure(f"coincidence peak detection failed: {exc}",
                           stage="coincidence_peak") from exc
    cache["stage3_hist"] = hist
    cache["peak_fit"] = fit
    files = _write_sample_batches(scn, engine, out_dir, run_uuid)
    metrics = {"center_ps": fit.center_ps, "fwhm_ps": fit.fwhm_ps,
               "sigma_ps": fit.sigma_ps, "goodness": fit.goodness,
               "n_epochs": probe_epochs}
    return metrics, files


def _write_sample_batches(scn, engine, out_dir, run_uuid):
    """Persist the first epoch of each node in both wire formats (a bounded
    sample; full runs keep tags in memory and register metadata only)."""
    sample_dir = Path(out_dir) / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    namespace = uuidlib.uuid5(run_uuid, "stream:3")
    files = []
    for node_id, tags in sorted(engine.epoch_tags(0, stream=3).items()):
        write_tag_stream(sample_dir / f"{node_id}_epoch0.tags", tags)
        files.append(f"samples/{node_id}_epoch0.tags")
        batches = batch_tags(tags, node_id, uuid_namespace=namespace)
        if batches:
            path = sample_dir / f"{node_id}_epoch0.batch.json"
            path.write_text(batch_to_json(batches[0]) + "\n")
            files.append(f"samples/{node_id}_epoch0.batch.json")
    return files


def _experiment_correlation_peak(scn, out_dir, seed, cache):
    hist = cache["stage3_hist"]
    fit = cache["peak_fit"]
    coinc.write_histogram_csv(out_dir / "histogram.csv", hist)
    coinc.write_peakfit_json(out_dir / "peakfit.json", fit)
    metrics = {"fwhm_ps": fit.fwhm_ps, "center_ps": fit.center_ps,
               "amplitude": fit.amplitude, "baseline": fit.baseline}
    try:
        metrics["car"] = coinc.car(hist, scn.analysis.window_ps)
    except EntnetError as exc:
        metrics["car_error"] = str(exc)
    jit = cache.get("jitter_estimate")
    if jit is not None:
        metrics["sync_jitter_fwhm_ps"] = jit.fwhm_ps
    _write_json(out_dir / "metrics.json", metrics)
    return metrics, ["histogram.csv", "peakfit.json", "metrics.json"]


def _experiment_visibility_scan(scn, out_dir, seed, cache):
    engine = cache["engine"]
    run_uuid = cache["run_uuid"]
    center = cache["peak_fit"].center_ps
    scan_arm = scn.scan.scan_arm
    fixed_arm = "idler" if scan_arm == "signal" else "signal"
    fixed_angle = scn.nodes[scn.links[fixed_arm].to_node].qsa.basis_angle_rad
    dwell_epochs = max(int(round(scn.scan.dwell_s)), 1)
    points = []
    for k in range(scn.scan.n_points):
        angle = math.pi * k / scn.scan.n_points
        _, counts, records = engine.run_epochs(scn.analysis, dwell_epochs,
                                               stream=100 + k, run_uuid=run_uuid,
                                               angle_overrides={scan_arm: angle},
                                               match_center_ps=center)
        cache.setdefault("batch_records", []).extend(records)
        ang_sig = fixed_angle if scan_arm == "idler" else angle
        ang_idl = angle if scan_arm == "idler" else fixed_angle
        points.append(entanglement.ScanPoint(ang_sig, ang_idl, counts,
                                             duration_s=float(dwell_epochs)))
    result = entanglement.fit_visibility(points, combos=entanglement.TARGET_COMBOS)
    entanglement.write_scan_csv(out_dir / "scan.csv", points)
    metrics = {"visibility": result.visibility, "phase_rad": result.phase_rad,
               "fit_residual": result.fit_residual, "n_points": scn.scan.n_points}
    _write_json(out_dir / "metrics.json", metrics)
    return metrics, ["scan.csv", "metrics.json"]


def _experiment_chsh(scn, out_dir, seed, cache):
    engine = cache["engine"]
    run_uuid = cache["run_uuid"]
    center = cache["peak_fit"].center_ps
    base_sig = scn.nodes[scn.links["signal"].to_node].qsa.basis_angle_rad
    a0, _, b0, _ = entanglement.CHSH_ANGLES

    s_epochs = max(int(round(scn.chsh.s_run_s)), 1)
    _, s_counts, records = engine.run_epochs(scn.analysis, s_epochs, stream=200,
                                             run_uuid=run_uuid,
                                             angle_overrides={"signal": base_sig + a0,
                                                              "idler": base_sig + b0},
                                             match_center_ps=center)
    cache.setdefault("batch_records", []).extend(records)
    s_value, e_values = entanglement.chsh_from_counts(s_counts)

    q_epochs = max(int(round(scn.chsh.qber_run_s)), 1)
    _, counts, records = engine.run_epochs(scn.analysis, q_epochs, stream=300,
                                           run_uuid=run_uuid,
                                           angle_overrides={"signal": base_sig,
                                                            "idler": base_sig},
                                           match_center_ps=center)
    cache.setdefault("batch_records", []).extend(records)
    qber_hv = entanglement.qber(counts, basis="hv")
    qber_da = entanglement.qber(counts, basis="da")
    per_combo = {f"{a}{b}": counts.get((a, b), 0) / q_epochs
                 for a, b in entanglement.TARGET_COMBOS}
    skr = entanglement.secret_key_rate(per_combo.values(), scn.chsh.extraction_eff)

    with open(out_dir / "combo_counts.csv", "w") as fh:
        fh.write("combo,counts\n")
        for key in sorted(counts):
            fh.write(f"{key[0]}{key[1]},{counts[key]}\n")
    metrics = {
        "S": s_value,
        "E": {f"{sa}_{sb}": v for (sa, sb), v in sorted(e_values.items())},
        "n_coincidences_s_run": sum(s_counts.values()),
        "n_coincidences_qber_run": sum(counts.values()),
        "qber_hv": qber_hv, "qber_da": qber_da,
        "qber_avg": 0.5 * (qber_hv + qber_da),
        "qber": 0.5 * (qber_hv + qber_da),
        "per_combo_rates_hz": per_combo,
        "skr_bits_per_s": skr,
        "extraction_eff": scn.chsh.extraction_eff,
    }
    _write_json(out_dir / "metrics.json", metrics)
    return metrics, ["combo_counts.csv", "metrics.json"]


def _qtt_direction(scn, duration_s, seed, stream, reverse):
    """One direction of the two-way exchange; returns (local, remote) tags.

    The emitting node keeps one photon of each pair; the partner flies to
    the other node. reverse=False emits at A (downlink), True at B (uplink).
    """
    p = scn.qtt
    rng = _rng(seed, stream, 0)
    src = dataclasses.replace(scn.source, pair_rate_hz=p.pair_rate_hz)
    duration_ps = int(duration_s * EPOCH_PS)
    _, local, remote = sample_surviving_arms(duration_ps, src, p.p_local, p.p_remote, rng)

    node_a, node_b = scn.nodes["A"], scn.nodes["B"]
    emit, receive = (node_b, node_a) if reverse else (node_a, node_b)

    def detect(times, node, sub):
        det = node.detector
        out = times
        if det.jitter_sigma_ps > 0:
            out = out + np.rint(rng.normal(0.0, det.jitter_sigma_ps, out.size)).astype(np.int64)
        bg_rate = 4.0 * (det.dark_rate_hz + det.stray_rate_hz)
        n_bg = rng.poisson(bg_rate * duration_s)
        bg = rng.integers(0, duration_ps, size=n_bg, dtype=np.int64)
        out = np.sort(np.concatenate((out, bg)))
        clock_rng = _rng(seed, stream, sub)
        out = apply_clock(out, node.clock, rng=clock_rng)
        if node.sync.residual_jitter_sigma_ps > 0:
            out = out + np.rint(clock_rng.normal(
                0.0, node.sync.residual_jitter_sigma_ps, out.size)).astype(np.int64)
        return np.sort(out)

    local_tags = detect(local.time_ps, emit, 1)
    remote_tags = detect(remote.time_ps + np.int64(p.flight_ps), receive, 2)
    return local_tags, remote_tags


def _experiment_qtt(scn, out_dir, seed, cache):
    p = scn.qtt
    dl_local, dl_remote = _qtt_direction(scn, scn.duration_s, seed, 400, reverse=False)
    ul_local, ul_remote = _qtt_direction(scn, scn.duration_s, seed, 500, reverse=True)

    dl_h = coinc.correlate_times(dl_local, dl_remote, scn.analysis.bin_width_ps,
                                 scn.analysis.range_ps, static_delay_ps=p.flight_ps)
    ul_h = coinc.correlate_times(ul_local, ul_remote, scn.analysis.bin_width_ps,
                                 scn.analysis.range_ps, static_delay_ps=p.flight_ps)
    try:
        measurement = qtt_mod.estimate_offset(dl_h, ul_h, scn.duration_s, p.estimator)
    except CannotEstimate as exc:
        raise StageFailure(f"two-way offset estimation failed: {exc}",
                           stage="experiment") from exc
    metrics = {"tau_dl_ps": measurement.tau_dl_ps, "tau_ul_ps": measurement.tau_ul_ps,
               "t_ab_ps": measurement.t_ab_ps, "delta_ps": measurement.delta_ps,
               "sigma_delta_ps": measurement.sigma_delta_ps,
               "configured_delta_ps": scn.nodes["B"].clock.offset_ps
               - scn.nodes["A"].clock.offset_ps}
    files = ["metrics.json"]
    if p.convergence:
        conv = qtt_mod.convergence_curve((dl_local, dl_remote), (ul_local, ul_remote),
                                         list(p.integration_times_s),
                                         scn.analysis.bin_width_ps, scn.analysis.range_ps,
                                         static_delay_ps=p.flight_ps,
                                         estimator=p.estimator)
        qtt_mod.write_convergence_csv(out_dir / "convergence.csv", conv)
        qtt_mod.write_convergence_fit_json(out_dir / "qtt_fit.json", conv)
        metrics["convergence"] = {"A_ps_sqrt_s": conv.a_ps_sqrt_s,
                                  "floor_ps": conv.floor_ps,
                                  "sigma_delta_by_t": {str(pt.integration_s): pt.sigma_delta_ps
                                                       for pt in conv.points}}
        files = ["convergence.csv", "qtt_fit.json", "metrics.json"]
    _write_json(out_dir / "metrics.json", metrics)
    return metrics, files


def _experiment_jitter_scan(scn, out_dir, seed, cache):
    est = cache.get("jitter_estimate")
    n = int(scn.duration_s)
    if est is None or scn.pilot.n_jitter_sequences != n:
        seqs = []
        for k, node_id in enumerate((scn.jitter.node_ref, scn.jitter.node_meas)):
            node = scn.nodes[node_id]
            sync = dataclasses.replace(node.sync, start_seq_period_ps=EPOCH_PS)
            seqs.append(generate_start_sequences(n * EPOCH_PS, sync, node.clock,
                                                 rng=_rng(seed, 30, k)))
        est = estimate_relative_jitter(seqs[0], seqs[1])
    with open(out_dir / "jitter_histogram.csv", "w") as fh:
        fh.write("bin_center_ps,count\n")
        for c, cnt in zip(est.bin_centers_ps, est.counts):
            fh.write(f"{c:.1f},{int(cnt)}\n")
    metrics = {"fwhm_ps": est.fwhm_ps, "sigma_ps": est.sigma_ps,
               "n_sequences": n}
    _write_json(out_dir / "metrics.json", metrics)
    return metrics, ["jitter_histogram.csv", "metrics.json"]


def _experiment_pointing(scn, out_dir, seed, cache):
    cfg = scn.pointing.config
    tel = pointing_mod.simulate_loop(cfg, scn.duration_s,
                                     seed=np.random.SeedSequence([seed, 42]))
    est = pointing_mod.estimate_stability(tel, cfg)
    open_var = pointing_mod.open_loop_variance(cfg, scn.duration_s,
                                               seed=np.random.SeedSequence([seed, 42]))
    pointing_mod.write_telemetry_csv(out_dir / "telemetry.csv", tel)
    metrics = {"theta_rms_x_urad": est.theta_rms_x_urad,
               "theta_rms_y_urad": est.theta_rms_y_urad,
               "v_diff_std_x_mv": float(np.std(tel.v_diff_x) * 1e3),
               "v_diff_std_y_mv": float(np.std(tel.v_diff_y) * 1e3),
               "closed_loop_var_x": float(np.var(tel.v_diff_x)),
               "open_loop_var_x": open_var[0]}
    _write_json(out_dir / "metrics.json", metrics)
    return metrics, ["telemetry.csv", "metrics.json"]


def _experiment_cpuf(scn, out_dir, seed, cache):
    dev_a = classical.CpufDevice("node-A", secret_seed=seed * 2 + 1)
    dev_b = classical.CpufDevice("node-C", secret_seed=seed * 2 + 2)
    classical.bootstrap_pair(dev_a, dev_b)
    keys = []
    for _ in range(scn.cpuf.n_handshakes):
        result = classical.cpuf_handshake(dev_a, dev_b)
        keys.append(hashlib.sha256(result.session_key).hexdigest()[:16])
    budget = classical.rekey_throughput(scn.cpuf.skr_bits_per_s)
    classical.write_rekey_json(out_dir / "rekey.json", budget)
    metrics = {"n_handshakes": scn.cpuf.n_handshakes,
               "n_distinct_keys": len(set(keys)),
               "key_digests_head": keys[:4],
               "skr_bits_per_s": scn.cpuf.skr_bits_per_s,
               "seed_period_s": budget.seed_period_s,
               "max_throughput_bits_per_s": budget.max_throughput_bits_per_s}
    _write_json(out_dir / "metrics.json", metrics)
    return metrics, ["rekey.json", "metrics.json"]


_EXPERIMENT_IMPL = {
    "correlation_peak": _experiment_correlation_peak,
    "visibility_scan": _experiment_visibility_scan,
    "chsh": _experiment_chsh,
    "qtt": _experiment_qtt,
    "jitter_scan": _experiment_jitter_scan,
    "pointing": _experiment_pointing,
    "cpuf_demo": _experiment_cpuf,
}


def run_stages(scenario, out_dir, seed=None):
    """Execute the four bring-up stages; each failure halts the run.

    Returns the RunManifest (also written to out_dir/manifest.json). The
    manifest's failed_stage records which stage, if any, aborted the run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=int(seed))
    digest = scenario_hash(scenario)
    run_uuid = uuidlib.uuid5(_RUN_NAMESPACE, f"{digest}:{scenario.seed}")
    manifest = RunManifest(str(run_uuid), scenario.name, digest, scenario.seed)
    save_scenario(out_dir / "scenario.json", scenario)
    manifest.files.append("scenario.json")

    cache = {"run_uuid": run_uuid}
    if scenario.experiment in _PHOTON_EXPERIMENTS:
        cache["engine"] = _Engine(scenario)

    stage_fns = [("optical_path", _stage_optical_path),
                 ("classical_link", _stage_classical_link),
                 ("coincidence_peak", _stage_coincidence_peak),
                 ("experiment", None)]
    for name, fn in stage_fns:
        if name == "experiment":
            fn = _EXPERIMENT_IMPL[scenario.experiment]
        try:
            result = fn(scenario, out_dir, scenario.seed, cache)
        except StageFailure as exc:
            manifest.stages.append(StageRecord(name, passed=False, error=str(exc)))
            manifest.failed_stage = name
            log.error("stage %s failed: %s", name, exc)
            break
        except EntnetError as exc:
            manifest.stages.append(StageRecord(name, passed=False, error=str(exc)))
            manifest.failed_stage = name
            log.error("stage %s failed: %s", name, exc)
            break
        metrics, files = result
        if metrics is None:
            manifest.stages.append(StageRecord(name, passed=True, skipped=True))
        else:
            manifest.stages.append(StageRecord(name, passed=True,
                                               metrics=_json_safe(metrics), files=files))
            manifest.files.extend(files)

    manifest.batches = list(cache.get("batch_records", []))
    if manifest.batches:
        write_registry_records(out_dir, manifest.batches)
        manifest.files.extend(f"registry/{rec['uuid']}.json" for rec in manifest.batches)

    _write_json(out_dir / "manifest.json", manifest.to_dict())
    manifest.files.append("manifest.json")
    return manifest


def reproduce_figure(name, out_dir, seed=None):
    """Run the named reproduction preset end to end."""
    from .presets import figure_scenario
    scenario = figure_scenario(name, seed=seed)
    return run_stages(scenario, out_dir)
