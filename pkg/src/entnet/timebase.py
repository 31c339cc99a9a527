"""Per-node clocks, synchronization timestamps, and one-second batching.

Conventions used throughout the package:

* all timestamps are 64-bit signed integer picoseconds,
* one batching epoch is exactly 1 s (10^12 ps),
* randomness flows through explicit numpy Generators so every stream is
  reproducible from its seed.
"""
from __future__ import annotations

import json
import uuid as uuidlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, InsufficientData, OutOfRange
from .fitting import fit_gaussian

EPOCH_PS = 10 ** 12
_PS_LIMIT = np.iinfo(np.int64).max

TAG_STREAM_HEADER = "#entnet-tags v1"


@dataclass(frozen=True)
class TimeTag:
    """A single detection event: channel id and picosecond timestamp."""

    channel: str
    time_ps: int


class TagStream:
    """Columnar store for a sequence of timetags (channel ids + int64 times)."""

    __slots__ = ("channels", "times_ps")

    def __init__(self, channels, times_ps):
        # channel dtype stays as narrow as the ids allow (ports are one char)
        self.channels = np.asarray(channels)
        if self.channels.dtype.kind != "U":
            self.channels = self.channels.astype("U8")
        self.times_ps = np.asarray(times_ps, dtype=np.int64)
        if self.channels.shape != self.times_ps.shape:
            raise ContractViolation("channels and times must have equal length")

    def __len__(self):
        return self.times_ps.size

    def __iter__(self):
        for ch, t in zip(self.channels, self.times_ps):
            yield TimeTag(str(ch), int(t))

    @classmethod
    def empty(cls):
        return cls(np.empty(0, dtype="U1"), np.empty(0, dtype=np.int64))

    @classmethod
    def from_tags(cls, tags):
        tags = list(tags)
        if not tags:
            return cls.empty()
        return cls([t.channel for t in tags], [t.time_ps for t in tags])

    def sorted(self):
        if self.is_sorted():
            return self
        order = np.argsort(self.times_ps, kind="stable")
        return TagStream(self.channels[order], self.times_ps[order])

    def is_sorted(self):
        return bool(np.all(np.diff(self.times_ps) >= 0))

    def for_channel(self, channel):
        mask = self.channels == channel
        return TagStream(self.channels[mask], self.times_ps[mask])

    @staticmethod
    def merged(*streams):
        if not streams:
            return TagStream.empty()
        chans = np.concatenate([s.channels for s in streams])
        times = np.concatenate([s.times_ps for s in streams])
        return TagStream(chans, times).sorted()


def _as_stream(tags):
    if isinstance(tags, TagStream):
        return tags
    return TagStream.from_tags(tags)


@dataclass(frozen=True)
class ClockModel:
    """Affine-plus-noise map from true time to a node's local time.

    offset_ps is a static delay, drift_ppb a rate error in parts per billion,
    jitter_sigma_ps the standard deviation of white per-timestamp noise.
    With all three at zero the clock is the identity map.
    """

    offset_ps: int = 0
    drift_ppb: float = 0.0
    jitter_sigma_ps: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.jitter_sigma_ps < 0:
            raise ConfigError("jitter_sigma_ps must be >= 0")
        if abs(self.drift_ppb) >= 1e6:
            raise ConfigError("drift magnitude must stay below 10^6 ppb")

    def rng(self):
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class SyncConfig:
    """Synchronization path description.

    fiber_wr models a shared White-Rabbit-style reference (no extra jitter by
    default); freespace_pilot models pilot-tone clock recovery, which adds a
    residual timing jitter to every recovered start sequence (200 ps default).
    """

    mode: str = "fiber_wr"
    clock_hz: int = 10_000_000
    start_seq_period_ps: int = EPOCH_PS
    residual_jitter_sigma_ps: float | None = None

    def __post_init__(self):
        if self.mode not in ("fiber_wr", "freespace_pilot"):
            raise ConfigError(f"unknown sync mode {self.mode!r}")
        if self.clock_hz <= 0:
            raise ConfigError("clock_hz must be positive")
        if (self.start_seq_period_ps * self.clock_hz) % EPOCH_PS != 0:
            raise ConfigError("start_seq_period_ps must be a multiple of the clock period")
        if self.residual_jitter_sigma_ps is None:
            default = 0.0 if self.mode == "fiber_wr" else 200.0
            object.__setattr__(self, "residual_jitter_sigma_ps", default)
        if self.residual_jitter_sigma_ps < 0:
            raise ConfigError("residual_jitter_sigma_ps must be >= 0")


@dataclass
class Batch:
    """One second of tags from one node, tagged with a fresh identifier."""

    uuid: str
    node_id: str
    epoch_index: int
    tags: TagStream

    def validate(self):
        lo = self.epoch_index * EPOCH_PS
        hi = lo + EPOCH_PS
        t = self.tags.times_ps
        if t.size and (t.min() < lo or t.max() >= hi):
            raise ContractViolation("batch tags fall outside the epoch window")
        if not self.tags.is_sorted():
            raise ContractViolation("batch tags must be sorted")


def apply_clock(true_time_ps, clock, rng=None):
    """Map true timestamps through a clock model.

    Accepts a scalar or an int64 array. Jitter draws come from ``rng`` when
    given, otherwise from a generator freshly seeded with ``clock.seed`` (one
    sequence per call, so a single vectorized call is reproducible).
    """
    scalar = np.isscalar(true_time_ps)
    t = np.atleast_1d(np.asarray(true_time_ps)).astype(np.int64)

    est = t.astype(np.float64) * (1.0 + clock.drift_ppb * 1e-9) + clock.offset_ps
    if np.any(np.abs(est) > 0.98 * _PS_LIMIT):
        raise OutOfRange("timestamp leaves the signed 64-bit picosecond range")

    local = t + np.int64(clock.offset_ps)
    if clock.drift_ppb != 0.0:
        local = local + np.rint(clock.drift_ppb * 1e-9 * t.astype(np.float64)).astype(np.int64)
    if clock.jitter_sigma_ps > 0.0:
        gen = rng if rng is not None else clock.rng()
        local = local + np.rint(gen.normal(0.0, clock.jitter_sigma_ps, t.shape)).astype(np.int64)
    if scalar:
        return int(local[0])
    return local


def generate_start_sequences(duration_ps, sync, clock, rng=None):
    """Emission timestamps of the periodic start sequences over a duration.

    Ideal emissions sit at k * start_seq_period_ps; each is mapped through the
    clock model and then smeared by the sync path's residual jitter.
    """
    if duration_ps < sync.start_seq_period_ps:
        raise ContractViolation("duration must cover at least one start-sequence period")
    n = int(duration_ps // sync.start_seq_period_ps)
    truth = np.arange(n, dtype=np.int64) * np.int64(sync.start_seq_period_ps)
    gen = rng if rng is not None else clock.rng()
    out = apply_clock(truth, clock, rng=gen)
    if sync.residual_jitter_sigma_ps > 0.0:
        out = out + np.rint(gen.normal(0.0, sync.residual_jitter_sigma_ps, n)).astype(np.int64)
    return out


@dataclass(frozen=True)
class JitterEstimate:
    bin_centers_ps: np.ndarray
    counts: np.ndarray
    fwhm_ps: float
    sigma_ps: float
    mean_ps: float


def estimate_relative_jitter(starts_a, starts_b, bin_width_ps=100):
    """Histogram index-paired start-sequence differences and fit a Gaussian.

    Returns the fitted FWHM/sigma of (a - b). Identical sequences produce a
    degenerate single-bin histogram reported as zero width.
    """
    a = np.asarray(starts_a, dtype=np.int64)
    b = np.asarray(starts_b, dtype=np.int64)
    if a.shape != b.shape:
        raise ContractViolation("start sequences must be index-matched and equal length")
    if a.size < 10:
        raise InsufficientData("need at least 10 start sequences")

    d = a - b
    lo = int(d.min()) - 2 * bin_width_ps
    hi = int(d.max()) + 2 * bin_width_ps
    nbins = max(int(np.ceil((hi - lo) / bin_width_ps)), 1)
    counts, edges = np.histogram(d, bins=nbins, range=(lo, lo + nbins * bin_width_ps))
    centers = 0.5 * (edges[:-1] + edges[1:])

    if np.unique(d).size == 1:
        return JitterEstimate(centers, counts, 0.0, 0.0, float(d[0]))
    fit = fit_gaussian(centers, counts)
    return JitterEstimate(centers, counts, fit.fwhm, fit.sigma, fit.center)


def batch_tags(tags, node_id, uuid_namespace=None):
    """Partition a sorted tag stream into one-second batches.

    Empty epochs produce no batch. Batch UUIDs are random by default; passing
    a ``uuid.UUID`` namespace derives them deterministically from
    (namespace, node_id, epoch_index) for reproducible runs.
    """
    stream = _as_stream(tags)
    if len(stream) == 0:
        return []
    if not stream.is_sorted():
        raise ContractViolation("tags must be sorted by timestamp")

    epochs = stream.times_ps // EPOCH_PS
    batches = []
    boundaries = np.flatnonzero(np.diff(epochs)) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [len(stream)]))
    for s, e in zip(starts, stops):
        epoch_index = int(epochs[s])
        if uuid_namespace is not None:
            bid = str(uuidlib.uuid5(uuid_namespace, f"{node_id}:{epoch_index}"))
        else:
            bid = str(uuidlib.uuid4())
        batch = Batch(bid, node_id, epoch_index,
                      TagStream(stream.channels[s:e], stream.times_ps[s:e]))
        batch.validate()
        batches.append(batch)
    return batches


def write_tag_stream(path, stream):
    """Write tags in the line-oriented text format: ``channel<TAB>time_ps``."""
    with open(path, "w") as fh:
        fh.write(TAG_STREAM_HEADER + "\n")
        for ch, t in zip(stream.channels, stream.times_ps):
            fh.write(f"{ch}\t{int(t)}\n")


def read_tag_stream(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != TAG_STREAM_HEADER:
            raise ConfigError(f"unrecognized tag stream header: {header!r}")
        channels, times = [], []
        for line in fh:
            ch, t = line.rstrip("\n").split("\t")
            channels.append(ch)
            times.append(int(t))
    return TagStream(channels, times)


def batch_to_json(batch):
    return json.dumps({
        "uuid": batch.uuid,
        "node_id": batch.node_id,
        "epoch_index": batch.epoch_index,
        "tags": [[str(c), int(t)] for c, t in zip(batch.tags.channels, batch.tags.times_ps)],
    }, sort_keys=True)


def batch_from_json(text):
    obj = json.loads(text)
    tags = TagStream([c for c, _ in obj["tags"]], [t for _, t in obj["tags"]])
    batch = Batch(obj["uuid"], obj["node_id"], int(obj["epoch_index"]), tags)
    batch.validate()
    return batch
