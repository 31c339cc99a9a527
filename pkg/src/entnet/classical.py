"""Classical side-channel: Manchester-coded pilot tone, start-sequence
framing with clock recovery, and cPUF mutual authentication.

The pilot tone carries clock and data in one stream: bits are Manchester
encoded (IEEE convention by default: 0 = rising mid-cell transition,
1 = falling), frames start with a fixed 16-bit pattern, and bit stuffing
(a 0 after every run of three 1s) guarantees the pattern never occurs
inside the encoded length/payload/CRC region.
"""
from __future__ import annotations

import binascii
import hashlib
import hmac as hmaclib
import json
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (AuthenticationFailure, ConfigError, ContractViolation,
                     DecodeError, NoLockError, ReplayRejection, UndefinedValue)

PS_PER_S = 10 ** 12

START_SEQ_DEFAULT = 0xF0A5
START_SEQ_BITS = 16

AES_GCM_MAX_BITS_PER_KEY = 2 ** 39 - 256   # recommended AES-256-GCM limit


# ---------------------------------------------------------------------------
# Manchester codec
# ---------------------------------------------------------------------------

@dataclass
class ManchesterStream:
    """Level-change record of a Manchester waveform.

    times_ps[i] is when the line switched to levels[i]; levels are absolute
    (0/1), so a lost transition corrupts the waveform only until the next
    recorded one.
    """

    symbol_rate_hz: int
    times_ps: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        if self.symbol_rate_hz <= 0 or PS_PER_S % self.symbol_rate_hz != 0:
            raise ConfigError("symbol_rate_hz must divide 10^12 ps evenly")
        self.times_ps = np.asarray(self.times_ps, dtype=np.int64)
        self.levels = np.asarray(self.levels, dtype=np.uint8)
        if self.times_ps.shape != self.levels.shape:
            raise ContractViolation("times and levels must have equal length")

    @property
    def cell_ps(self):
        return PS_PER_S // self.symbol_rate_hz

    def __len__(self):
        return self.times_ps.size

    def level_at(self, t_ps):
        """Line level at the given times (vectorized)."""
        t = np.asarray(t_ps, dtype=np.int64)
        idx = np.searchsorted(self.times_ps, t, side="right") - 1
        lev = np.where(idx >= 0, self.levels[np.clip(idx, 0, None)],
                       self.levels[0] if len(self) else 0)
        return lev.astype(np.uint8)


def _half_levels(bits, convention):
    """Per-half-cell line levels for a bit array."""
    b = np.asarray(bits, dtype=np.uint8)
    if convention == "ieee":          # 0: low->high, 1: high->low
        first, second = b, 1 - b
    elif convention == "thomas":      # inverted convention
        first, second = 1 - b, b
    else:
        raise ConfigError(f"unknown Manchester convention {convention!r}")
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = first
    out[1::2] = second
    return out


def manchester_encode(bits, symbol_rate_hz, start_time_ps=0, convention="ieee"):
    """Encode bits into a transition stream starting at start_time_ps."""
    bits = np.asarray(bits, dtype=np.uint8)
    stream = ManchesterStream(symbol_rate_hz, np.empty(0, np.int64), np.empty(0, np.uint8))
    if bits.size == 0:
        return stream
    half = stream.cell_ps // 2
    levels = _half_levels(bits, convention)
    change = np.empty(levels.size, dtype=bool)
    change[0] = True
    change[1:] = levels[1:] != levels[:-1]
    idx = np.flatnonzero(change)
    stream.times_ps = start_time_ps + idx.astype(np.int64) * half
    stream.levels = levels[idx]
    return stream


def manchester_decode(stream, jitter_tolerance_ps=None, convention="ieee"):
    """Exact inverse of manchester_encode for clean streams.

    Each bit cell must contain a transition within jitter_tolerance_ps of
    its midpoint (default: 10% of the cell); a missing one raises
    DecodeError carrying the cell index.
    """
    if len(stream) == 0:
        return np.empty(0, dtype=np.uint8)
    if not np.all(np.diff(stream.times_ps) > 0):
        raise ContractViolation("transitions must be strictly time-sorted")
    cell = stream.cell_ps
    half = cell // 2
    tol = int(jitter_tolerance_ps) if jitter_tolerance_ps is not None else cell // 10
    t0 = int(stream.times_ps[0])
    n_cells = int((stream.times_ps[-1] - t0) // cell) + 1

    mids = t0 + np.arange(n_cells, dtype=np.int64) * cell + half
    pos = np.searchsorted(stream.times_ps, mids)
    bits = np.empty(n_cells, dtype=np.uint8)
    for k in range(n_cells):
        best = None
        for cand in (pos[k] - 1, pos[k]):
            if 0 <= cand < len(stream):
                err = abs(int(stream.times_ps[cand]) - int(mids[k]))
                if err <= tol and (best is None or err < best[0]):
                    best = (err, cand)
        if best is None:
            raise DecodeError(f"cell {k}: no mid-cell transition within {tol} ps",
                              cell_index=k)
        level_after = int(stream.levels[best[1]])
        if convention == "ieee":
            bits[k] = 0 if level_after == 1 else 1
        else:
            bits[k] = 1 if level_after == 1 else 0
    return bits


def drop_edges(stream, fraction, rng):
    """Remove a random fraction of transitions (fault injection helper)."""
    keep = rng.random(len(stream)) >= fraction
    return ManchesterStream(stream.symbol_rate_hz, stream.times_ps[keep],
                            stream.levels[keep])


def jitter_edges(stream, sigma_ps, rng):
    """Add Gaussian timing jitter to every transition."""
    t = stream.times_ps + np.rint(rng.normal(0.0, sigma_ps, len(stream))).astype(np.int64)
    order = np.argsort(t, kind="stable")
    return ManchesterStream(stream.symbol_rate_hz, t[order], stream.levels[order])


# ---------------------------------------------------------------------------
# Framing: start sequence + stuffed length/payload/CRC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameConfig:
    start_seq: int = START_SEQ_DEFAULT
    start_bits: int = START_SEQ_BITS
    start_seq_period_ps: int = PS_PER_S
    spacing_tol_ps: int = 1000
    mismatch_budget: float = 0.1     # tolerated fraction of corrupted half-cells

    def start_pattern(self):
        return np.array([(self.start_seq >> (self.start_bits - 1 - i)) & 1
                         for i in range(self.start_bits)], dtype=np.uint8)


@dataclass(frozen=True)
class Frame:
    payload: bytes
    bit_offset: int = 0       # position of the start sequence in the bit stream
    crc_ok: bool = True


def crc16_ccitt(data):
    return binascii.crc_hqx(bytes(data), 0xFFFF)


def bytes_to_bits(data):
    return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))


def bits_to_bytes(bits):
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def stuff_bits(bits):
    """Insert a 0 after every run of three 1s, bounding runs below four."""
    out = []
    run = 0
    for b in np.asarray(bits, dtype=np.uint8):
        out.append(int(b))
        run = run + 1 if b else 0
        if run == 3:
            out.append(0)
            run = 0
    return np.array(out, dtype=np.uint8)


def frame_to_bits(payload, cfg=FrameConfig()):
    """Wire format: [start:16][length:16 BE][payload][crc16-ccitt], with the
    length/payload/crc region bit-stuffed."""
    payload = bytes(payload)
    if len(payload) > 0xFFFF:
        raise ConfigError("payload exceeds 65535 bytes")
    body = len(payload).to_bytes(2, "big") + payload
    body += crc16_ccitt(body).to_bytes(2, "big")
    return np.concatenate((cfg.start_pattern(), stuff_bits(bytes_to_bits(body))))


class _Destuffer:
    def __init__(self, bits, pos):
        self.bits = bits
        self.pos = pos
        self.run = 0

    def read(self, n):
        out = np.empty(n, dtype=np.uint8)
        got = 0
        while got < n:
            if self.pos >= self.bits.size:
                raise DecodeError("bit stream ended inside a frame")
            b = int(self.bits[self.pos])
            self.pos += 1
            if self.run == 3:
                self.run = 0
                if b != 0:
                    raise DecodeError("stuffing violation: expected a 0 after three 1s")
                continue
            out[got] = b
            got += 1
            self.run = self.run + 1 if b else 0
        return out


def find_start_sequences(bits, cfg=FrameConfig()):
    """Bit offsets of every exact start-pattern occurrence."""
    bits = np.asarray(bits, dtype=np.uint8)
    pattern = cfg.start_pattern()
    if bits.size < pattern.size:
        return np.empty(0, dtype=np.int64)
    score = np.correlate(bits.astype(np.int8) * 2 - 1,
                         pattern.astype(np.int8) * 2 - 1, mode="valid")
    return np.flatnonzero(score == pattern.size).astype(np.int64)


def parse_frames(bits, cfg=FrameConfig()):
    """Destuff and CRC-check every frame found in a bit stream."""
    frames = []
    for off in find_start_sequences(bits, cfg):
        reader = _Destuffer(np.asarray(bits, dtype=np.uint8), int(off) + cfg.start_bits)
        try:
            length = int.from_bytes(bits_to_bytes(reader.read(16)), "big")
            body = bits_to_bytes(reader.read(8 * length))
            crc = int.from_bytes(bits_to_bytes(reader.read(16)), "big")
        except DecodeError:
            continue
        ok = crc == crc16_ccitt(length.to_bytes(2, "big") + body)
        frames.append(Frame(body, int(off), ok))
    return frames


def make_pilot_bits(payloads, period_cells, cfg=FrameConfig()):
    """Periodic pilot bit stream: one frame per period, idle zeros between.

    The idle filler carries the clock on its own (an all-zeros Manchester
    stream is periodic at the symbol rate).
    """
    chunks = []
    for payload in payloads:
        fb = frame_to_bits(payload, cfg)
        if fb.size > period_cells:
            raise ConfigError("frame does not fit in one start-sequence period")
        chunk = np.zeros(period_cells, dtype=np.uint8)
        chunk[:fb.size] = fb
        chunks.append(chunk)
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=np.uint8)


@dataclass(frozen=True)
class ClockRecovery:
    start_seq_times_ps: np.ndarray
    recovered_edges_ps: np.ndarray   # matched mid-cell edges of detected starts
    lock: bool


def recover_clock(stream, cfg=FrameConfig()):
    """Locate periodic start sequences in a pilot stream and judge lock.

    Detection is waveform-level: half-cell levels are reconstructed from the
    transition record and matched against the start pattern's level
    template, tolerating the configured fraction of corrupted half-cells
    (so a few dropped edges do not hide a start sequence). Each detection
    is refined to picosecond precision with the median offset of its
    surviving mid-cell edges. Lock requires at least three consecutive
    periodic start times, i.e. two adjacent spacings each equal to an
    integer multiple of the configured period within spacing_tol_ps
    (multiples tolerate occasionally missed start sequences).
    """
    if len(stream) < 2:
        raise NoLockError("stream carries no usable transitions")
    cell = stream.cell_ps
    half = cell // 2
    t0 = int(stream.times_ps[0])
    n_half = int((stream.times_ps[-1] - t0) // half) + 1
    sample_t = t0 + np.arange(n_half, dtype=np.int64) * half + half // 2
    levels = stream.level_at(sample_t).astype(np.int8) * 2 - 1

    template = (_half_levels(cfg.start_pattern(), "ieee").astype(np.int8) * 2 - 1)
    if levels.size < template.size:
        raise NoLockError("stream shorter than one start sequence")
    score = np.correlate(levels, template, mode="valid")
    budget = int(cfg.mismatch_budget * template.size)
    hits = np.flatnonzero((template.size - score) // 2 <= budget)
    if hits.size == 0:
        raise NoLockError("no start sequence found")

    # collapse clusters of adjacent half-cell offsets to the best-scoring one
    groups = np.split(hits, np.flatnonzero(np.diff(hits) > template.size) + 1)
    starts = []
    edges = []
    for g in groups:
        k = int(g[np.argmax(score[g])])
        coarse = t0 + k * half
        deltas = []
        for i in range(cfg.start_bits):
            ideal = coarse + i * cell + half
            pos = np.searchsorted(stream.times_ps, ideal)
            for cand in (pos - 1, pos):
                if 0 <= cand < len(stream) and \
                        abs(int(stream.times_ps[cand]) - ideal) <= half // 2:
                    deltas.append(int(stream.times_ps[cand]) - ideal)
                    edges.append(int(stream.times_ps[cand]))
                    break
        refine = int(np.median(deltas)) if deltas else 0
        starts.append(coarse + refine)
    starts = np.array(sorted(starts), dtype=np.int64)

    lock = False
    if starts.size >= 2:
        consistent = []
        for d in np.diff(starts):
            mult = max(int(round(d / cfg.start_seq_period_ps)), 1)
            consistent.append(abs(int(d) - mult * cfg.start_seq_period_ps)
                              <= cfg.spacing_tol_ps)
        run = 0
        for c in consistent:
            run = run + 1 if c else 0
            if run >= 2:
                lock = True
                break
    return ClockRecovery(starts, np.array(sorted(edges), dtype=np.int64), lock)


# ---------------------------------------------------------------------------
# cPUF mutual authentication
# ---------------------------------------------------------------------------

def _hkdf(key_material, info, length=32):
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None,
                info=info).derive(key_material)


@dataclass(frozen=True)
class HandshakeInit:
    initiator_id: str
    responder_id: str
    challenge: bytes
    nonce: bytes


@dataclass(frozen=True)
class HandshakeResponse:
    responder_id: str
    proof: bytes
    challenge: bytes
    nonce: bytes


@dataclass(frozen=True)
class HandshakeConfirm:
    initiator_id: str
    proof: bytes


@dataclass(frozen=True)
class HandshakeResult:
    session_key: bytes
    transcript: tuple


class CpufDevice:
    """Simulated controlled-PUF endpoint.

    The physical function is a keyed pseudorandom map (noiseless): the
    device secret stands in for manufacturing variation and never leaves the
    instance. Peers' challenge-response pairs are held only AES-GCM
    encrypted under a key derived from the device's own PUF response, so
    stored CRPs are unusable without the physical device.
    """

    def __init__(self, device_id, secret_seed, rng=None):
        self.device_id = device_id
        self._secret = hashlib.sha256(
            f"cpuf-device:{device_id}:{secret_seed}".encode()).digest()
        self._rng = rng if rng is not None else np.random.default_rng(secret_seed)
        self._crp_store = {}          # peer_id -> AES-GCM blob
        self._consumed = set()        # hashes of used challenges
        self._sessions = {}           # peer_id -> state dict

    # --- simulated hardware -------------------------------------------------

    def respond(self, challenge):
        """Challenge -> response through the simulated physical function."""
        return hmaclib.new(self._secret, bytes(challenge), hashlib.sha256).digest()

    def _store_key(self, peer_id):
        return _hkdf(self.respond(b"crp-store:" + peer_id.encode()), b"entnet-crp-store")

    def fresh_challenge(self):
        return self._rng.bytes(32)

    def fresh_nonce(self):
        return self._rng.bytes(16)

    # --- CRP store ----------------------------------------------------------

    def install_peer_crp(self, peer_id, challenge, response):
        blob_nonce = self._rng.bytes(12)
        sealed = AESGCM(self._store_key(peer_id)).encrypt(
            blob_nonce, bytes(challenge) + bytes(response), peer_id.encode())
        self._crp_store[peer_id] = blob_nonce + sealed

    def load_peer_crp(self, peer_id):
        if peer_id not in self._crp_store:
            raise AuthenticationFailure(f"no CRP on file for peer {peer_id!r}")
        blob = self._crp_store[peer_id]
        try:
            plain = AESGCM(self._store_key(peer_id)).decrypt(
                blob[:12], blob[12:], peer_id.encode())
        except InvalidTag as exc:
            raise AuthenticationFailure("CRP store cannot be opened by this device") from exc
        return plain[:32], plain[32:]

    def _check_fresh(self, challenge):
        digest = hashlib.sha256(challenge).hexdigest()
        if digest in self._consumed:
            raise ReplayRejection("challenge was already consumed")
        self._consumed.add(digest)

    # --- protocol steps -----------------------------------------------------

    def initiate(self, responder_id):
        challenge, _ = self.load_peer_crp(responder_id)
        msg = HandshakeInit(self.device_id, responder_id, challenge, self.fresh_nonce())
        self._sessions[responder_id] = {"state": "challenged", "role": "initiator",
                                        "init": msg}
        return msg

    def respond_to(self, msg):
        if msg.responder_id != self.device_id:
            raise AuthenticationFailure("challenge addressed to a different device")
        self._check_fresh(msg.challenge)
        my_response = self.respond(msg.challenge)
        peer_challenge, _ = self.load_peer_crp(msg.initiator_id)
        nonce = self.fresh_nonce()
        proof = hmaclib.new(my_response,
                            b"resp" + msg.nonce + nonce +
                            msg.initiator_id.encode() + self.device_id.encode(),
                            hashlib.sha256).digest()
        reply = HandshakeResponse(self.device_id, proof, peer_challenge, nonce)
        self._sessions[msg.initiator_id] = {
            "state": "challenged", "role": "responder", "init": msg,
            "reply": reply, "my_response": my_response}
        return reply

    def confirm(self, reply):
        session = self._sessions.get(reply.responder_id)
        if session is None or session.get("role") != "initiator" or \
                session["state"] != "challenged":
            raise ContractViolation("confirm() without a pending handshake")
        init = session["init"]
        _, expected_response = self.load_peer_crp(reply.responder_id)
        expected_proof = hmaclib.new(expected_response,
                                     b"resp" + init.nonce + reply.nonce +
                                     self.device_id.encode() + reply.responder_id.encode(),
                                     hashlib.sha256).digest()
        if not hmaclib.compare_digest(expected_proof, reply.proof):
            self._sessions.pop(reply.responder_id, None)
            raise AuthenticationFailure("responder proof mismatch")
        self._check_fresh(reply.challenge)
        my_response = self.respond(reply.challenge)
        proof = hmaclib.new(my_response,
                            b"conf" + init.nonce + reply.nonce +
                            self.device_id.encode() + reply.responder_id.encode(),
                            hashlib.sha256).digest()
        key = _hkdf(my_response + expected_response + init.nonce + reply.nonce,
                    b"entnet-cpuf-session")
        session.update(state="authenticated", key=key)
        return HandshakeConfirm(self.device_id, proof)

    def finalize(self, confirm_msg):
        session = self._sessions.get(confirm_msg.initiator_id)
        if session is None or session.get("role") != "responder" or \
                session["state"] != "challenged":
            raise ContractViolation("finalize() without a pending handshake")
        init, reply = session["init"], session["reply"]
        _, expected_response = self.load_peer_crp(confirm_msg.initiator_id)
        expected_proof = hmaclib.new(expected_response,
                                     b"conf" + init.nonce + reply.nonce +
                                     confirm_msg.initiator_id.encode() +
                                     self.device_id.encode(),
                                     hashlib.sha256).digest()
        if not hmaclib.compare_digest(expected_proof, confirm_msg.proof):
            self._sessions.pop(confirm_msg.initiator_id, None)
            raise AuthenticationFailure("initiator proof mismatch")
        key = _hkdf(expected_response + session["my_response"] + init.nonce + reply.nonce,
                    b"entnet-cpuf-session")
        session.update(state="authenticated", key=key)
        return key

    def session_key(self, peer_id):
        session = self._sessions.get(peer_id)
        if session is None or session["state"] != "authenticated":
            raise AuthenticationFailure("no authenticated session with this peer")
        return session["key"]

    # --- CRP rotation over the established channel ---------------------------

    def send_fresh_challenge(self, peer_id):
        key = self.session_key(peer_id)
        challenge = self.fresh_challenge()
        self._sessions[peer_id]["pending_rotation"] = challenge
        nonce = self._rng.bytes(12)
        return nonce + AESGCM(key).encrypt(nonce, challenge, b"rotate-challenge")

    def answer_fresh_challenge(self, peer_id, blob):
        key = self.session_key(peer_id)
        try:
            challenge = AESGCM(key).decrypt(blob[:12], blob[12:], b"rotate-challenge")
        except InvalidTag as exc:
            raise AuthenticationFailure("rotation message tampered") from exc
        response = self.respond(challenge)
        nonce = self._rng.bytes(12)
        return nonce + AESGCM(key).encrypt(nonce, response, b"rotate-response")

    def accept_fresh_response(self, peer_id, blob):
        key = self.session_key(peer_id)
        challenge = self._sessions[peer_id].pop("pending_rotation", None)
        if challenge is None:
            raise ContractViolation("no rotation in flight with this peer")
        try:
            response = AESGCM(key).decrypt(blob[:12], blob[12:], b"rotate-response")
        except InvalidTag as exc:
            raise AuthenticationFailure("rotation message tampered") from exc
        self.install_peer_crp(peer_id, challenge, response)


def bootstrap_pair(device_a, device_b):
    """Trusted-phase CRP exchange: each side learns one fresh CRP of its peer."""
    chal_b = device_a.fresh_challenge()
    device_a.install_peer_crp(device_b.device_id, chal_b, device_b.respond(chal_b))
    chal_a = device_b.fresh_challenge()
    device_b.install_peer_crp(device_a.device_id, chal_a, device_a.respond(chal_a))


def cpuf_handshake(initiator, responder):
    """Run the full mutual authentication and CRP rotation.

    Returns the shared session key and the message transcript. Both consumed
    CRPs are replaced with fresh, independently drawn ones, so replaying any
    part of the transcript is rejected.
    """
    m1 = responder.respond_to(initiator.initiate(responder.device_id))
    m2 = initiator.confirm(m1)
    key_responder = responder.finalize(m2)
    key_initiator = initiator.session_key(responder.device_id)
    if not hmaclib.compare_digest(key_initiator, key_responder):
        raise AuthenticationFailure("session keys diverged")

    r1 = initiator.send_fresh_challenge(responder.device_id)
    initiator.accept_fresh_response(
        responder.device_id, responder.answer_fresh_challenge(initiator.device_id, r1))
    r2 = responder.send_fresh_challenge(initiator.device_id)
    responder.accept_fresh_response(
        initiator.device_id, initiator.answer_fresh_challenge(responder.device_id, r2))
    init_msg = initiator._sessions[responder.device_id]["init"]
    return HandshakeResult(key_initiator, (init_msg, m1, m2, r1, r2))


# ---------------------------------------------------------------------------
# AEAD rekey accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RekeyBudget:
    seed_period_s: float
    max_throughput_bits_per_s: float


def rekey_throughput(skr_bits_per_s, seed_bits=256,
                     max_bits_per_key=AES_GCM_MAX_BITS_PER_KEY):
    """Seed refresh period and ceiling data throughput for an AEAD channel
    rekeyed from the quantum-derived secret key stream."""
    if skr_bits_per_s <= 0:
        raise UndefinedValue("secret key rate must be positive")
    seed_period_s = seed_bits / skr_bits_per_s
    return RekeyBudget(seed_period_s, max_bits_per_key / seed_period_s)


def rekey_budget_to_dict(budget):
    return {"seed_period_s": budget.seed_period_s,
            "max_throughput_bits_per_s": budget.max_throughput_bits_per_s}


def write_manchester_csv(path, stream):
    with open(path, "w") as fh:
        fh.write("time_ps,level\n")
        for t, l in zip(stream.times_ps, stream.levels):
            fh.write(f"{int(t)},{int(l)}\n")


def write_rekey_json(path, budget):
    with open(path, "w") as fh:
        json.dump(rekey_budget_to_dict(budget), fh, sort_keys=True, indent=2)
        fh.write("\n")
