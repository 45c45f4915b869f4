"""EPC Gen-2 physical layer: PIE downlink, FM0 uplink, CRCs, frames.

Downlink commands are pulse-interval encoded: each symbol is carrier-high
followed by a short low pulse, and the symbol duration carries the bit
value.  Tag replies are FM0: the level inverts at every symbol boundary
and data-0 adds a mid-symbol inversion.

Bit sequences are numpy uint8 arrays of 0/1.  All functions are pure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

# Backscatter link frequencies evaluated by the reader (Hz).
VALID_BLF_HZ = (40e3, 80e3, 160e3, 320e3, 640e3)

# FM0 preamble (TRext off): six symbols, twelve half-bit levels, one
# boundary-inversion violation at the fifth symbol.
FM0_PREAMBLE_HALFBITS = np.array([1, 1, -1, 1, -1, -1, 1, -1, -1, -1, 1, 1], dtype=np.int8)
FM0_PREAMBLE_SYMBOLS = 6

DELIMITER_S = 12.5e-6


class PieTimingError(ValueError):
    pass


@dataclass(frozen=True)
class PieTiming:
    """Downlink interval set: data-0 lasts tari, data-1 lasts data1_s."""

    tari_s: float
    data1_s: float
    pw_s: float
    trcal_s: float
    delimiter_s: float = DELIMITER_S

    def __post_init__(self):
        if not 6.25e-6 - 1e-12 <= self.tari_s <= 25e-6 + 1e-12:
            raise PieTimingError(f"tari {self.tari_s*1e6:.2f} us outside [6.25, 25] us")
        if not 1.5 * self.tari_s - 1e-12 <= self.data1_s <= 2.0 * self.tari_s + 1e-12:
            raise PieTimingError("data1 must be within [1.5, 2.0] x tari")
        if self.pw_s > 0.525 * self.tari_s + 1e-12 or self.pw_s <= 0:
            raise PieTimingError("pw must be in (0, 0.525 x tari]")
        if self.trcal_s < self.rtcal_s - 1e-12:
            raise PieTimingError("trcal must be >= rtcal")

    @property
    def rtcal_s(self) -> float:
        return self.tari_s + self.data1_s

    def preamble_s(self) -> float:
        return self.delimiter_s + self.tari_s + self.rtcal_s + self.trcal_s

    def frame_duration_s(self, bits) -> float:
        bits = np.asarray(bits)
        n1 = int(np.sum(bits)) if bits.size else 0
        n0 = bits.size - n1
        return self.preamble_s() + n0 * self.tari_s + n1 * self.data1_s


def default_pie_timing(blf_hz: float) -> PieTiming:
    """Mid-range legal timing for a link frequency.

    TRcal = DR/BLF.  Low rates use DR=8 with 12.5 us tari; 320/640 kHz
    need DR=64/3 and the short 6.25 us tari to keep TRcal >= RTcal.
    """
    if blf_hz not in VALID_BLF_HZ:
        raise PieTimingError(f"blf {blf_hz} not one of {VALID_BLF_HZ}")
    if blf_hz <= 160e3:
        tari = 12.5e-6
        trcal = 8.0 / blf_hz
    else:
        tari = 6.25e-6
        trcal = (64.0 / 3.0) / blf_hz
    return PieTiming(tari_s=tari, data1_s=2 * tari, pw_s=0.5 * tari, trcal_s=trcal)


@dataclass(frozen=True)
class UplinkConfig:
    """Tag reply parameters: FM0 at one of the standard link frequencies."""

    blf_hz: float

    def __post_init__(self):
        if self.blf_hz not in VALID_BLF_HZ:
            raise ValueError(f"blf {self.blf_hz} not one of {VALID_BLF_HZ}")

    def packet_duration_s(self, n_bits: int) -> float:
        # preamble + payload + dummy-1 terminator
        return (FM0_PREAMBLE_SYMBOLS + n_bits + 1) / self.blf_hz


# ---------------------------------------------------------------------------
# PIE encode / decode
# ---------------------------------------------------------------------------

def pie_encode(
    bits,
    timing: PieTiming,
    sample_rate_hz: float,
    depth: float = 0.99,
) -> np.ndarray:
    """Render a downlink frame as a real envelope.

    Starts with delimiter + data-0 + RTcal + TRcal, then the payload
    symbols, ending carrier-high.  `depth` sets the low level (1 - depth).
    """
    bits = np.asarray(bits, dtype=np.uint8)
    low = 1.0 - depth
    segs = [(low, timing.delimiter_s)]
    for dur in (timing.tari_s, timing.rtcal_s, timing.trcal_s):
        segs.append((1.0, dur - timing.pw_s))
        segs.append((low, timing.pw_s))
    for b in bits:
        dur = timing.data1_s if b else timing.tari_s
        segs.append((1.0, dur - timing.pw_s))
        segs.append((low, timing.pw_s))
    # one pulse-width of carrier-on after the final low pulse: the stream
    # ends high; interval bookkeeping uses frame_duration_s (edge-based)
    segs.append((1.0, timing.pw_s))
    levels = np.array([s[0] for s in segs])
    edges = np.cumsum([s[1] for s in segs])
    edge_idx = np.round(edges * sample_rate_hz).astype(np.int64)
    out = np.empty(edge_idx[-1], dtype=np.float64)
    start = 0
    for level, stop in zip(levels, edge_idx):
        out[start:stop] = level
        start = stop
    return out


def pie_decode(
    envelope: np.ndarray,
    sample_rate_hz: float,
    timing_tolerance_frac: float = 0.12,
    clock_scale: float = 1.0,
) -> np.ndarray | None:
    """Recover bits from an envelope, or None when it is not a valid command.

    Interval classification is ratiometric against the measured RTcal, as a
    tag's own clock would do; `clock_scale` models that clock running fast
    or slow.  Every pulse interval must match the learned data-0/data-1
    duration within the tolerance, the low level must reach at least 80%
    modulation depth, and pulse widths must stay inside the legal window;
    otherwise the envelope is rejected (NoCommand -> None).
    """
    env = np.asarray(envelope, dtype=np.float64)
    if env.size < 16:
        return None
    hi = float(np.percentile(env, 95))
    if hi <= 0:
        return None
    # lows must be deep: anything above 0.2*hi is treated as carrier-on
    thresh = 0.5 * hi
    is_low = env < thresh
    if not is_low.any():
        return None
    low_level = float(np.median(env[is_low]))
    if low_level > 0.2 * hi:
        return None
    edges = np.flatnonzero(np.diff(is_low.astype(np.int8)))
    falls = edges[np.diff(is_low.astype(np.int8))[edges] > 0] + 1
    rises = edges[np.diff(is_low.astype(np.int8))[edges] < 0] + 1
    if is_low[0]:
        falls = np.concatenate([[0], falls])
    if len(falls) < 4 or len(rises) < 4:
        return None
    falls = falls[: len(rises)]
    dt = clock_scale / sample_rate_hz
    pulse_widths = (rises - falls) * dt
    # delimiter is the first low pulse
    if not _within(pulse_widths[0], DELIMITER_S, timing_tolerance_frac):
        return None
    # intervals between successive pulse ends
    iv = np.diff(rises) * dt
    if len(iv) < 3:
        return None
    tari, rtcal, trcal = iv[0], iv[1], iv[2]
    if not 6.25e-6 * (1 - timing_tolerance_frac) <= tari <= 25e-6 * (1 + timing_tolerance_frac):
        return None
    if not 2.4 * tari <= rtcal <= 3.1 * tari:
        return None
    if not rtcal * (1 - timing_tolerance_frac) <= trcal <= 3.1 * rtcal:
        return None
    data1 = rtcal - tari
    # all data pulse widths legal relative to learned tari
    for pw in pulse_widths[1:]:
        if not 0.2 * tari <= pw <= 0.6 * tari:
            return None
    sym = iv[3:]
    bits = np.empty(len(sym), dtype=np.uint8)
    for i, s in enumerate(sym):
        if _within(s, tari, timing_tolerance_frac):
            bits[i] = 0
        elif _within(s, data1, timing_tolerance_frac):
            bits[i] = 1
        else:
            return None
    return bits


def _within(value: float, target: float, frac: float) -> bool:
    return abs(value - target) <= frac * target


# ---------------------------------------------------------------------------
# FM0 encode / decode
# ---------------------------------------------------------------------------

def fm0_halfbits(bits) -> np.ndarray:
    """Half-bit level sequence (+-1) for preamble + payload + dummy-1."""
    bits = np.asarray(bits, dtype=np.uint8)
    out = np.empty(len(FM0_PREAMBLE_HALFBITS) + 2 * (len(bits) + 1), dtype=np.int8)
    out[: len(FM0_PREAMBLE_HALFBITS)] = FM0_PREAMBLE_HALFBITS
    level = FM0_PREAMBLE_HALFBITS[-1]
    k = len(FM0_PREAMBLE_HALFBITS)
    for b in np.concatenate([bits, [1]]):  # dummy-1 terminator
        level = -level  # invert at every symbol boundary
        out[k] = level
        if b == 0:
            level = -level  # extra mid-symbol inversion
        out[k + 1] = level
        k += 2
    return out


def fm0_encode(bits, blf_hz: float, sample_rate_hz: float) -> np.ndarray:
    """FM0 baseband levels (+-1) sampled at the given rate."""
    hb = fm0_halfbits(bits)
    edges = np.arange(1, len(hb) + 1) / (2 * blf_hz)
    edge_idx = np.round(edges * sample_rate_hz).astype(np.int64)
    out = np.empty(edge_idx[-1], dtype=np.float64)
    start = 0
    for level, stop in zip(hb, edge_idx):
        out[start:stop] = level
        start = stop
    return out


def fm0_decode(waveform: np.ndarray, blf_hz: float, sample_rate_hz: float) -> np.ndarray | None:
    """Slice an aligned FM0 waveform back to bits (reference decoder).

    Assumes the packet starts at sample 0; resolves the level-polarity
    ambiguity against the preamble and returns None when the preamble does
    not match.  The reader's production path uses timing recovery instead;
    this decoder backs round-trip and baseline checks.
    """
    wave = np.asarray(waveform, dtype=np.float64)
    half = sample_rate_hz / (2 * blf_hz)
    n_half = int(len(wave) / half)
    if n_half < len(FM0_PREAMBLE_HALFBITS) + 2:
        return None
    centers = np.round((np.arange(n_half) + 0.5) * half).astype(np.int64)
    centers = centers[centers < len(wave)]
    hb = wave[centers]
    pre = len(FM0_PREAMBLE_HALFBITS)
    ref = FM0_PREAMBLE_HALFBITS.astype(np.float64)
    corr = float(np.dot(hb[:pre], ref))
    if abs(corr) < 0.5 * pre * np.max(np.abs(hb[:pre]) + 1e-12):
        return None
    sign = 1.0 if corr > 0 else -1.0
    payload = sign * hb[pre:]
    n_bits = len(payload) // 2 - 1  # drop dummy-1
    if n_bits < 0:
        return None
    first = payload[: 2 * (n_bits + 1) : 2]
    second = payload[1 : 2 * (n_bits + 1) : 2]
    # mid-symbol transition marks data-0, constant level marks data-1
    bits = (first * second > 0).astype(np.uint8)
    return bits[:n_bits]


# ---------------------------------------------------------------------------
# CRCs
# ---------------------------------------------------------------------------

def crc5(bits) -> np.ndarray:
    """CRC-5 over bits, polynomial x^5+x^3+1, preset 01001 (MSB first)."""
    reg = 0b01001
    for b in np.asarray(bits, dtype=np.uint8):
        msb = (reg >> 4) & 1
        reg = (reg << 1) & 0x1F
        if msb ^ int(b):
            reg ^= 0b01001
    return _int_to_bits(reg, 5)


def crc5_check(bits_with_crc) -> bool:
    bits = np.asarray(bits_with_crc, dtype=np.uint8)
    return bool(np.array_equal(crc5(bits[:-5]), bits[-5:]))


def crc16(bits) -> np.ndarray:
    """CRC-16 CCITT (x^16+x^12+x^5+1), preset 0xFFFF, ones-complemented."""
    reg = 0xFFFF
    for b in np.asarray(bits, dtype=np.uint8):
        msb = (reg >> 15) & 1
        reg = (reg << 1) & 0xFFFF
        if msb ^ int(b):
            reg ^= 0x1021
    return _int_to_bits(reg ^ 0xFFFF, 16)


def crc16_check(bits_with_crc) -> bool:
    """Residue check: recomputing over payload+CRC must land on 0x1D0F."""
    bits = np.asarray(bits_with_crc, dtype=np.uint8)
    if len(bits) < 16:
        return False
    reg = 0xFFFF
    for b in bits:
        msb = (reg >> 15) & 1
        reg = (reg << 1) & 0xFFFF
        if msb ^ int(b):
            reg ^= 0x1021
    return reg == 0x1D0F


def _int_to_bits(value: int, width: int) -> np.ndarray:
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def _bits_to_int(bits) -> int:
    out = 0
    for b in np.asarray(bits, dtype=np.uint8):
        out = (out << 1) | int(b)
    return out


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

class FrameKind(enum.Enum):
    QUERY = "query"
    QUERY_REP = "query_rep"
    ACK = "ack"
    NAK = "nak"
    RN16_REPLY = "rn16"
    EPC_REPLY = "epc"


# over-the-air bit lengths per kind
FRAME_LENGTHS = {
    FrameKind.QUERY: 22,
    FrameKind.QUERY_REP: 4,
    FrameKind.ACK: 18,
    FrameKind.NAK: 8,
    FrameKind.RN16_REPLY: 16,
    FrameKind.EPC_REPLY: 128,
}

EPC_BITS = 96
PC_WORD = 0x3000  # protocol-control word for a 96-bit identifier


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        object.__setattr__(self, "bits", bits)
        expect = FRAME_LENGTHS[self.kind]
        if len(bits) != expect:
            raise ValueError(f"{self.kind.value} frame needs {expect} bits, got {len(bits)}")


def frame_query(q: int, session: int = 0, dr_fast: bool = False) -> Frame:
    """Inventory-round opener; q sets the slot count 2^q."""
    if not 0 <= q <= 15:
        raise ValueError(f"q must be in [0, 15], got {q}")
    if not 0 <= session <= 3:
        raise ValueError("session must be in [0, 3]")
    body = np.concatenate(
        [
            _int_to_bits(0b1000, 4),          # command code
            [1 if dr_fast else 0],            # divide ratio (0: 8, 1: 64/3)
            _int_to_bits(0, 2),               # M = FM0
            [0],                              # TRext off
            _int_to_bits(0, 2),               # Sel: all
            _int_to_bits(session, 2),
            [0],                              # target A
            _int_to_bits(q, 4),
        ]
    ).astype(np.uint8)
    return Frame(FrameKind.QUERY, np.concatenate([body, crc5(body)]))


def frame_query_rep(session: int = 0) -> Frame:
    bits = np.concatenate([_int_to_bits(0b00, 2), _int_to_bits(session, 2)]).astype(np.uint8)
    return Frame(FrameKind.QUERY_REP, bits)


def frame_ack(rn16: int) -> Frame:
    if not 0 <= rn16 <= 0xFFFF:
        raise ValueError("rn16 must be a 16-bit value")
    bits = np.concatenate([_int_to_bits(0b01, 2), _int_to_bits(rn16, 16)]).astype(np.uint8)
    return Frame(FrameKind.ACK, bits)


def frame_nak() -> Frame:
    return Frame(FrameKind.NAK, _int_to_bits(0b11000000, 8))


def frame_rn16_reply(rn16: int) -> Frame:
    return Frame(FrameKind.RN16_REPLY, _int_to_bits(rn16, 16))


def frame_epc_reply(epc_bits) -> Frame:
    epc = np.asarray(epc_bits, dtype=np.uint8)
    if len(epc) != EPC_BITS:
        raise ValueError(f"epc must be {EPC_BITS} bits")
    body = np.concatenate([_int_to_bits(PC_WORD, 16), epc]).astype(np.uint8)
    return Frame(FrameKind.EPC_REPLY, np.concatenate([body, crc16(body)]))


def query_q(frame: Frame) -> int:
    if frame.kind is not FrameKind.QUERY:
        raise ValueError("not a query frame")
    return _bits_to_int(frame.bits[13:17])


def ack_rn16(frame: Frame) -> int:
    if frame.kind is not FrameKind.ACK:
        raise ValueError("not an ack frame")
    return _bits_to_int(frame.bits[2:18])


def rn16_value(frame: Frame) -> int:
    if frame.kind is not FrameKind.RN16_REPLY:
        raise ValueError("not an rn16 reply")
    return _bits_to_int(frame.bits)


def epc_from_reply(bits) -> np.ndarray | None:
    """Extract the 96 identifier bits from a full reply; None on CRC failure."""
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) != FRAME_LENGTHS[FrameKind.EPC_REPLY] or not crc16_check(bits):
        return None
    return bits[16 : 16 + EPC_BITS]


def parse_command(bits) -> Frame | None:
    """Classify decoded downlink bits; None when malformed or CRC-bad."""
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) == 22 and _bits_to_int(bits[:4]) == 0b1000:
        if not crc5_check(bits):
            return None
        return Frame(FrameKind.QUERY, bits)
    if len(bits) == 4 and _bits_to_int(bits[:2]) == 0b00:
        return Frame(FrameKind.QUERY_REP, bits)
    if len(bits) == 18 and _bits_to_int(bits[:2]) == 0b01:
        return Frame(FrameKind.ACK, bits)
    if len(bits) == 8 and _bits_to_int(bits) == 0b11000000:
        return Frame(FrameKind.NAK, bits)
    return None


def frame_to_text(frame: Frame) -> str:
    """Canonical single-line text form used by logs and golden tests."""
    if frame.kind is FrameKind.QUERY:
        crc = "".join(str(b) for b in frame.bits[17:])
        return f"QUERY q={query_q(frame)} crc5={crc}"
    if frame.kind is FrameKind.QUERY_REP:
        return f"QUERYREP session={_bits_to_int(frame.bits[2:4])}"
    if frame.kind is FrameKind.ACK:
        return f"ACK rn16={ack_rn16(frame):04X}"
    if frame.kind is FrameKind.NAK:
        return "NAK"
    if frame.kind is FrameKind.RN16_REPLY:
        return f"RN16 value={rn16_value(frame):04X}"
    epc_hex = bits_to_hex(frame.bits[16 : 16 + EPC_BITS])
    return f"EPC pc={_bits_to_int(frame.bits[:16]):04X} epc={epc_hex}"


def frame_from_text(text: str) -> Frame:
    parts = text.strip().split()
    fields = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
    tag = parts[0]
    if tag == "QUERY":
        return frame_query(int(fields["q"]))
    if tag == "QUERYREP":
        return frame_query_rep(int(fields.get("session", "0")))
    if tag == "ACK":
        return frame_ack(int(fields["rn16"], 16))
    if tag == "NAK":
        return frame_nak()
    if tag == "RN16":
        return frame_rn16_reply(int(fields["value"], 16))
    if tag == "EPC":
        return frame_epc_reply(hex_to_bits(fields["epc"], EPC_BITS))
    raise ValueError(f"unknown frame text {text!r}")


def bits_to_hex(bits) -> str:
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) % 4:
        raise ValueError("bit count must be a multiple of 4")
    return "".join(f"{_bits_to_int(bits[i:i+4]):X}" for i in range(0, len(bits), 4))


def hex_to_bits(text: str, width: int) -> np.ndarray:
    value = int(text, 16)
    return _int_to_bits(value, width)
