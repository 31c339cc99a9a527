import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entnet.classical import (AES_GCM_MAX_BITS_PER_KEY, CpufDevice,
                              FrameConfig, HandshakeConfirm, ManchesterStream,
                              bootstrap_pair, cpuf_handshake, crc16_ccitt,
                              drop_edges, find_start_sequences, frame_to_bits,
                              jitter_edges, make_pilot_bits, manchester_decode,
                              manchester_encode, parse_frames, recover_clock,
                              rekey_throughput, stuff_bits,
                              write_manchester_csv)
from entnet.errors import (AuthenticationFailure, ContractViolation,
                           DecodeError, NoLockError, ReplayRejection,
                           UndefinedValue)

RATE_5MHZ = 5_000_000
CELL = 200_000  # ps at 5 MHz


def test_encode_hand_computed_edges():
    # 10110 at 5 MHz, IEEE convention: frozen hand-derived edge list
    stream = manchester_encode([1, 0, 1, 1, 0], RATE_5MHZ)
    expected = [(0, 1), (100_000, 0), (300_000, 1), (500_000, 0),
                (600_000, 1), (700_000, 0), (900_000, 1)]
    assert list(zip(stream.times_ps.tolist(), stream.levels.tolist())) == expected


def test_encode_empty():
    assert len(manchester_encode([], RATE_5MHZ)) == 0
    assert manchester_decode(manchester_encode([], RATE_5MHZ)).size == 0


def test_all_zeros_is_periodic_clock():
    stream = manchester_encode(np.zeros(64, dtype=np.uint8), RATE_5MHZ)
    gaps = np.diff(stream.times_ps)
    # every half-cell toggles: a pure square wave at the symbol rate
    assert np.all(gaps == CELL // 2)


def test_decode_inverts_encode_long_random():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, 10_000, dtype=np.uint8)
    assert np.array_equal(manchester_decode(manchester_encode(bits, RATE_5MHZ)), bits)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=300))
def test_decode_encode_roundtrip_property(bits):
    bits = np.array(bits, dtype=np.uint8)
    for convention in ("ieee", "thomas"):
        enc = manchester_encode(bits, RATE_5MHZ, convention=convention)
        assert np.array_equal(manchester_decode(enc, convention=convention), bits)


def test_decode_with_200ps_edge_jitter():
    # 200 ps jitter is 0.1% of a 200 ns cell: round trip stays exact
    rng = np.random.default_rng(1)
    bits = rng.integers(0, 2, 5_000, dtype=np.uint8)
    stream = jitter_edges(manchester_encode(bits, RATE_5MHZ), 200.0, rng)
    assert np.array_equal(manchester_decode(stream), bits)


def test_decode_missing_transition_reports_cell():
    bits = np.array([1, 0, 1, 1, 0, 1], dtype=np.uint8)
    stream = manchester_encode(bits, RATE_5MHZ)
    # delete the mid-cell transition of cell 3 (at 3*cell + half)
    kill = 3 * CELL + CELL // 2
    keep = stream.times_ps != kill
    broken = ManchesterStream(RATE_5MHZ, stream.times_ps[keep], stream.levels[keep])
    with pytest.raises(DecodeError) as err:
        manchester_decode(broken)
    assert err.value.cell_index == 3


def test_stuffing_bounds_runs_of_ones():
    bits = np.ones(20, dtype=np.uint8)
    stuffed = stuff_bits(bits)
    run = best = 0
    for b in stuffed:
        run = run + 1 if b else 0
        best = max(best, run)
    assert best <= 3


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=0, max_size=120))
def test_start_pattern_never_inside_frame_body(payload):
    cfg = FrameConfig()
    bits = frame_to_bits(payload, cfg)
    hits = find_start_sequences(bits, cfg)
    assert hits.tolist() == [0]


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=0, max_size=200))
def test_frame_roundtrip_property(payload):
    bits = frame_to_bits(payload)
    frames = parse_frames(bits)
    assert len(frames) == 1
    assert frames[0].payload == payload
    assert frames[0].crc_ok


def test_frame_crc_detects_corruption():
    bits = frame_to_bits(b"hello world")
    body_region = bits.copy()
    body_region[40] ^= 1          # flip one payload bit past the header
    frames = parse_frames(body_region)
    assert not frames or not frames[0].crc_ok


def test_pilot_stream_multiple_frames():
    cfg = FrameConfig(start_seq_period_ps=10 ** 9)  # 1 ms at 5 MHz: 5000 cells
    period_cells = 5000
    bits = make_pilot_bits([b"aa", b"bb", b"cc"], period_cells, cfg)
    assert bits.size == 3 * period_cells
    frames = parse_frames(bits, cfg)
    assert [f.payload for f in frames] == [b"aa", b"bb", b"cc"]
    assert [f.bit_offset for f in frames] == [0, 5000, 10000]


def _pilot_stream(n_periods=5, clock_offset_ps=0, seed=0):
    cfg = FrameConfig(start_seq_period_ps=10 ** 9, spacing_tol_ps=2000)
    bits = make_pilot_bits([b"x%d" % k for k in range(n_periods)], 5000, cfg)
    stream = manchester_encode(bits, RATE_5MHZ, start_time_ps=clock_offset_ps)
    return stream, cfg


def test_recover_clock_clean():
    stream, cfg = _pilot_stream(3)
    rec = recover_clock(stream, cfg)
    assert rec.lock
    assert np.array_equal(rec.start_seq_times_ps, [0, 10 ** 9, 2 * 10 ** 9])


def test_recover_clock_offset_shift():
    stream, cfg = _pilot_stream(4, clock_offset_ps=150_000)
    rec = recover_clock(stream, cfg)
    assert rec.lock
    assert np.array_equal(np.diff(rec.start_seq_times_ps), [10 ** 9] * 3)
    assert rec.start_seq_times_ps[0] == 150_000


def test_recover_clock_with_dropped_edges():
    rng = np.random.default_rng(2)
    stream, cfg = _pilot_stream(8)
    broken = drop_edges(stream, 0.05, rng)
    rec = recover_clock(broken, cfg)
    assert rec.lock
    # recovered start times still sit on the emission grid
    grid = np.round(rec.start_seq_times_ps / 1e9) * 1e9
    assert np.max(np.abs(rec.start_seq_times_ps - grid)) < 2000


def test_recover_clock_no_starts():
    stream = manchester_encode(np.zeros(2000, dtype=np.uint8), RATE_5MHZ)
    with pytest.raises(NoLockError):
        recover_clock(stream, FrameConfig(start_seq_period_ps=10 ** 9))


def test_manchester_csv(tmp_path):
    stream = manchester_encode([1, 0], RATE_5MHZ)
    write_manchester_csv(tmp_path / "m.csv", stream)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "time_ps,level"
    assert len(lines) == 1 + len(stream)


def test_crc16_ccitt_known_vector():
    # CCITT-FALSE check value for ascii "123456789"
    assert crc16_ccitt(b"123456789") == 0x29B1


# --- cPUF -------------------------------------------------------------------

def _pair(seed=0):
    a = CpufDevice("node-A", secret_seed=1000 + seed)
    b = CpufDevice("node-C", secret_seed=2000 + seed)
    bootstrap_pair(a, b)
    return a, b


def test_honest_handshake_shared_key():
    a, b = _pair()
    result = cpuf_handshake(a, b)
    assert len(result.session_key) == 32
    assert a.session_key(b.device_id) == b.session_key(a.device_id)


def test_handshakes_yield_distinct_keys():
    a, b = _pair(1)
    keys = {cpuf_handshake(a, b).session_key for _ in range(25)}
    assert len(keys) == 25


def test_impostor_without_puf_fails():
    a, b = _pair(2)
    impostor = CpufDevice("node-C", secret_seed=999_999)
    impostor._crp_store = dict(b._crp_store)   # stolen encrypted store
    with pytest.raises(AuthenticationFailure):
        cpuf_handshake(a, impostor)


def test_tampered_proof_rejected():
    a, b = _pair(3)
    m1 = b.respond_to(a.initiate(b.device_id))
    bad = bytes([m1.proof[0] ^ 0x01]) + m1.proof[1:]
    tampered = type(m1)(m1.responder_id, bad, m1.challenge, m1.nonce)
    with pytest.raises(AuthenticationFailure):
        a.confirm(tampered)


def test_wrong_addressee_rejected():
    a, b = _pair(9)
    other = CpufDevice("node-X", secret_seed=777)
    init = a.initiate(b.device_id)
    with pytest.raises(AuthenticationFailure):
        other.respond_to(init)


def test_replayed_init_rejected():
    a, b = _pair(4)
    init = a.initiate(b.device_id)
    b.respond_to(init)
    with pytest.raises(ReplayRejection):
        b.respond_to(init)


def test_full_transcript_replay_rejected():
    a, b = _pair(5)
    result = cpuf_handshake(a, b)
    init = result.transcript[0]
    with pytest.raises(ReplayRejection):
        b.respond_to(init)


def test_no_key_before_authentication():
    a, b = _pair(6)
    with pytest.raises(AuthenticationFailure):
        a.session_key(b.device_id)
    a.initiate(b.device_id)
    with pytest.raises(AuthenticationFailure):
        a.session_key(b.device_id)
    with pytest.raises(ContractViolation):
        b.finalize(HandshakeConfirm("node-A", b"\x00" * 32))


def test_crp_rotation_enables_next_handshake():
    a, b = _pair(7)
    k1 = cpuf_handshake(a, b).session_key
    k2 = cpuf_handshake(a, b).session_key   # works only if CRPs rotated
    assert k1 != k2


def test_raw_responses_never_stored_plain():
    a = CpufDevice("node-A", secret_seed=42)
    b = CpufDevice("node-C", secret_seed=43)
    challenge = a.fresh_challenge()
    response = b.respond(challenge)
    a.install_peer_crp(b.device_id, challenge, response)
    blob = a._crp_store[b.device_id]
    assert response not in blob
    assert challenge not in blob


def test_rekey_throughput_exact():
    budget = rekey_throughput(33.0)
    assert budget.seed_period_s == pytest.approx(256 / 33, rel=1e-12)
    assert budget.seed_period_s == pytest.approx(7.7576, abs=1e-4)
    # 2^39 - 256 = 256 * (2^31 - 1), so the ceiling rate is exactly 33 * (2^31 - 1)
    assert budget.max_throughput_bits_per_s == pytest.approx(33 * (2 ** 31 - 1), rel=1e-12)
    assert budget.max_throughput_bits_per_s == pytest.approx(7.09e10, rel=1e-3)


def test_rekey_throughput_trivial_and_errors():
    assert rekey_throughput(256.0).seed_period_s == 1.0
    with pytest.raises(UndefinedValue):
        rekey_throughput(0.0)


def test_rekey_linearity():
    base = rekey_throughput(33.0)
    assert rekey_throughput(66.0).max_throughput_bits_per_s == \
        pytest.approx(2 * base.max_throughput_bits_per_s, rel=1e-12)
    half = rekey_throughput(33.0, max_bits_per_key=AES_GCM_MAX_BITS_PER_KEY // 2)
    assert half.max_throughput_bits_per_s == \
        pytest.approx(base.max_throughput_bits_per_s / 2, rel=1e-9)
