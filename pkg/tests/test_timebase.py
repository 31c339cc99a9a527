import json
from fractions import Fraction

import numpy as np
import pytest

from entnet.errors import (ConfigError, ContractViolation, InsufficientData,
                           OutOfRange)
from entnet.timebase import (EPOCH_PS, Batch, ClockModel, SyncConfig, TagStream,
                             TimeTag, apply_clock, batch_from_json, batch_tags,
                             batch_to_json, estimate_relative_jitter,
                             generate_start_sequences, read_tag_stream,
                             write_tag_stream)

IDEAL = ClockModel()


def test_identity_clock():
    assert apply_clock(10 ** 12, IDEAL) == 10 ** 12


def test_static_offset_150ns():
    clock = ClockModel(offset_ps=150_000)
    assert apply_clock(10 ** 12, clock) == 10 ** 12 + 150_000


def test_drift_exact_rational():
    # oracle: exact rational arithmetic, 1000 ppb over 1 s
    t = 10 ** 12
    expected = t + int(Fraction(1000, 10 ** 9) * t)
    assert expected == 10 ** 12 + 10 ** 6
    assert apply_clock(t, ClockModel(drift_ppb=1000.0)) == expected


def test_drift_exact_rational_sweep():
    for drift, t in [(250.0, 4 * 10 ** 12), (-1000.0, 10 ** 12), (12.5, 8 * 10 ** 11)]:
        expected = t + int(Fraction(drift).limit_denominator(10 ** 6) * t / 10 ** 9)
        assert apply_clock(t, ClockModel(drift_ppb=drift)) == expected


def test_out_of_range_raises():
    with pytest.raises(OutOfRange):
        apply_clock(2 ** 63 - 10, ClockModel(offset_ps=10 ** 6))


def test_clock_monotone_without_jitter():
    rng = np.random.default_rng(7)
    times = np.sort(rng.integers(0, 10 ** 13, 1000))
    for drift in (-5e5, -100.0, 0.0, 321.0, 9e5):
        local = apply_clock(times, ClockModel(drift_ppb=drift))
        assert np.all(np.diff(local) >= 0)


def test_jitter_deterministic_per_seed():
    clock = ClockModel(jitter_sigma_ps=50.0, seed=11)
    t = np.arange(0, 10 ** 9, 10 ** 6)
    a = apply_clock(t, clock)
    b = apply_clock(t, clock)
    assert np.array_equal(a, b)


def test_clock_invariants():
    with pytest.raises(ConfigError):
        ClockModel(jitter_sigma_ps=-1.0)
    with pytest.raises(ConfigError):
        ClockModel(drift_ppb=2e6)


def test_sync_config_defaults():
    assert SyncConfig(mode="fiber_wr").residual_jitter_sigma_ps == 0.0
    assert SyncConfig(mode="freespace_pilot").residual_jitter_sigma_ps == 200.0
    with pytest.raises(ConfigError):
        SyncConfig(clock_hz=7, start_seq_period_ps=10 ** 12 + 1)


def test_start_sequences_ideal():
    sync = SyncConfig()
    out = generate_start_sequences(3 * EPOCH_PS, sync, IDEAL)
    assert np.array_equal(out, [0, EPOCH_PS, 2 * EPOCH_PS])


def test_start_sequences_offset_shift():
    sync = SyncConfig()
    base = generate_start_sequences(5 * EPOCH_PS, sync, IDEAL)
    shifted = generate_start_sequences(5 * EPOCH_PS, sync, ClockModel(offset_ps=150_000))
    assert np.array_equal(shifted, base + 150_000)


def test_start_sequences_sync_jitter_scale():
    sync = SyncConfig(mode="freespace_pilot")   # 200 ps residual
    n = 10_000
    out = generate_start_sequences(n * EPOCH_PS, sync, ClockModel(seed=3))
    resid = out - np.arange(n, dtype=np.int64) * EPOCH_PS
    sample_std = np.std(resid, ddof=1)
    assert abs(sample_std - 200.0) < 3 * 200.0 / np.sqrt(n)


def test_start_sequences_too_short():
    with pytest.raises(ContractViolation):
        generate_start_sequences(EPOCH_PS - 1, SyncConfig(), IDEAL)


def test_relative_jitter_identical_is_zero():
    starts = generate_start_sequences(20 * EPOCH_PS, SyncConfig(), IDEAL)
    est = estimate_relative_jitter(starts, starts)
    assert est.fwhm_ps == 0.0 and est.sigma_ps == 0.0


def test_relative_jitter_dual_162p5():
    # two independent 162.5 ps clocks combine to sigma 229.8, FWHM 541
    n = 10_000
    sync = SyncConfig()
    a = generate_start_sequences(n * EPOCH_PS, sync, ClockModel(jitter_sigma_ps=162.5, seed=1))
    b = generate_start_sequences(n * EPOCH_PS, sync, ClockModel(jitter_sigma_ps=162.5, seed=2))
    est = estimate_relative_jitter(a, b)
    assert abs(est.fwhm_ps - 541.0) < 30.0


def test_relative_jitter_one_sided_analytic():
    # analytic oracle: FWHM = 2 sqrt(2 ln 2) * 100 = 235.48 ps
    n = 10_000
    sync = SyncConfig()
    a = generate_start_sequences(n * EPOCH_PS, sync, ClockModel(jitter_sigma_ps=100.0, seed=5))
    b = generate_start_sequences(n * EPOCH_PS, sync, IDEAL)
    est = estimate_relative_jitter(a, b)
    expected = 2.0 * np.sqrt(2.0 * np.log(2.0)) * 100.0
    assert abs(est.fwhm_ps - expected) < 12.0


def test_relative_jitter_insufficient_data():
    with pytest.raises(InsufficientData):
        estimate_relative_jitter(np.arange(5), np.arange(5))


def test_relative_jitter_slope_shared_reference():
    # same drift on both clocks: pairwise differences have no time trend
    n = 2000
    sync = SyncConfig()
    clock_a = ClockModel(drift_ppb=400.0, jitter_sigma_ps=50.0, seed=21)
    clock_b = ClockModel(drift_ppb=400.0, jitter_sigma_ps=50.0, seed=22, offset_ps=7000)
    a = generate_start_sequences(n * EPOCH_PS, sync, clock_a)
    b = generate_start_sequences(n * EPOCH_PS, sync, clock_b)
    d = (a - b).astype(float)
    k = np.arange(n)
    slope, _ = np.polyfit(k, d, 1)
    sigma_slope = np.sqrt(12.0) * np.std(d) / n ** 1.5
    assert abs(slope) < 3 * sigma_slope


def test_batch_tags_basic():
    stream = TagStream(["c", "c", "c"],
                       [int(0.1 * EPOCH_PS), int(0.2 * EPOCH_PS), int(1.5 * EPOCH_PS)])
    batches = batch_tags(stream, "A")
    assert [len(b.tags) for b in batches] == [2, 1]
    assert [b.epoch_index for b in batches] == [0, 1]
    assert len({b.uuid for b in batches}) == 2


def test_batch_tags_empty():
    assert batch_tags(TagStream.empty(), "A") == []


def test_batch_tags_unsorted_rejected():
    with pytest.raises(ContractViolation):
        batch_tags(TagStream(["c", "c"], [5, 3]), "A")


def test_batch_tags_partition_property():
    rng = np.random.default_rng(9)
    times = np.sort(rng.integers(0, 7 * EPOCH_PS, 5000))
    stream = TagStream(np.full(5000, "x"), times)
    batches = batch_tags(stream, "A")
    merged = np.concatenate([b.tags.times_ps for b in batches])
    assert np.array_equal(merged, times)


def test_batch_tags_multinomial_counts():
    rng = np.random.default_rng(10)
    n, epochs = 1_000_000, 10
    times = np.sort(rng.integers(0, epochs * EPOCH_PS, n))
    batches = batch_tags(TagStream(np.full(n, "x"), times), "A")
    assert len(batches) == epochs
    expected = n / epochs
    bound = 5 * np.sqrt(expected * (1 - 1 / epochs))
    for b in batches:
        assert abs(len(b.tags) - expected) < bound


def test_batch_uuid_deterministic_namespace():
    import uuid
    ns = uuid.UUID("12345678-1234-5678-1234-567812345678")
    stream = TagStream(["c"], [42])
    b1 = batch_tags(stream, "A", uuid_namespace=ns)[0]
    b2 = batch_tags(stream, "A", uuid_namespace=ns)[0]
    assert b1.uuid == b2.uuid


def test_tag_stream_file_roundtrip(tmp_path):
    stream = TagStream(["H", "V", "D"], [1, 2, 30])
    path = tmp_path / "tags.txt"
    write_tag_stream(path, stream)
    back = read_tag_stream(path)
    assert np.array_equal(back.channels, stream.channels)
    assert np.array_equal(back.times_ps, stream.times_ps)
    assert path.read_text().splitlines()[0] == "#entnet-tags v1"


def test_batch_json_roundtrip():
    batch = Batch("some-uuid", "B", 2,
                  TagStream(["H", "V"], [2 * EPOCH_PS + 5, 2 * EPOCH_PS + 9]))
    back = batch_from_json(batch_to_json(batch))
    assert back.uuid == batch.uuid and back.epoch_index == 2
    assert np.array_equal(back.tags.times_ps, batch.tags.times_ps)
    assert json.loads(batch_to_json(batch))["node_id"] == "B"


def test_timetag_iteration():
    stream = TagStream(["H"], [7])
    assert list(stream) == [TimeTag("H", 7)]
