"""Reader-side demodulation and MAC.

Uplink processing per band: resample to 8 samples per symbol, remove the
carrier DC, correlate against the FM0 preamble (which doubles as channel
estimation), recover symbol timing with a Gardner PLL, slice half-bits,
and CRC-check identifier packets.  The MAC is one session state machine
per band running the Query / RN16 / Ack / identifier exchange.

Demod functions are pure; sessions are values advanced by session_step.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sp_signal

from . import phy
from .bands import BandPlan
from .iq import IqStream
from .phy import Frame, FrameKind, PieTiming, UplinkConfig

# demod operating point
SAMPLES_PER_SYMBOL = 8          # internal rate after resampling
SAMPLES_PER_HALFBIT = SAMPLES_PER_SYMBOL // 2
DC_WINDOW_SYMBOLS = 16
PREAMBLE_THRESHOLD = 0.6
GARDNER_KP = 0.1
GARDNER_KI = 0.01
LOCK_ERROR_LIMIT = 0.45         # RMS timing-error bound (half-bit units)

# protocol timing (tag-bit durations unless noted)
ACK_BUDGET_BITS = 20            # tag waits this long for the reader's Ack
T2_MIN_BITS = 3.0               # reader turnaround before the next command


class EventKind(enum.Enum):
    RN16 = "rn16"
    EPC = "epc"
    CRC_ERROR = "crc_error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ReadEvent:
    """One demod decision: what was heard in a listen window."""

    time_s: float                      # decision instant (simulated)
    band_index: int
    kind: EventKind
    rn16: int | None = None
    epc_bits: np.ndarray | None = None
    duplicate: bool = False
    packet_start_s: float = 0.0
    packet_end_s: float = 0.0

    @property
    def epc_hex(self) -> str:
        return phy.bits_to_hex(self.epc_bits) if self.epc_bits is not None else ""


# ---------------------------------------------------------------------------
# Demod chain
# ---------------------------------------------------------------------------

def remove_dc(x: IqStream, window_s: float) -> IqStream:
    """Subtract a sliding-window mean; window must span >= 10 symbols."""
    n = len(x.samples)
    w = max(int(round(window_s * x.sample_rate_hz)), 1)
    if w >= n:
        return x.with_samples(x.samples - np.mean(x.samples))
    kernel = np.ones(w) / w
    local_mean = sp_signal.fftconvolve(x.samples, kernel, mode="same")
    # renormalize the edges where the kernel hangs off the data
    counts = sp_signal.fftconvolve(np.ones(n), kernel, mode="same")
    return x.with_samples(x.samples - local_mean / counts)


def matched_filter(x: IqStream) -> IqStream:
    """Half-bit integrate-and-dump; timing recovery expects this shaping."""
    kernel = np.ones(SAMPLES_PER_HALFBIT) / SAMPLES_PER_HALFBIT
    return x.with_samples(sp_signal.fftconvolve(x.samples, kernel, mode="same"))


PREAMBLE_RATE_GRID = np.linspace(0.95, 1.05, 9)

_template_cache: dict[float, np.ndarray] = {}


def _preamble_template(scale: float = 1.0) -> np.ndarray:
    """Matched-filtered preamble at a half-bit period of scale * nominal."""
    if scale not in _template_cache:
        period = SAMPLES_PER_HALFBIT * scale
        n = int(round(len(phy.FM0_PREAMBLE_HALFBITS) * period))
        idx = np.minimum(
            (np.arange(n) / period).astype(int), len(phy.FM0_PREAMBLE_HALFBITS) - 1
        )
        raw = phy.FM0_PREAMBLE_HALFBITS[idx].astype(np.float64)
        kernel = np.ones(SAMPLES_PER_HALFBIT) / SAMPLES_PER_HALFBIT
        _template_cache[scale] = sp_signal.fftconvolve(raw, kernel, mode="same")
    return _template_cache[scale]


@dataclass(frozen=True)
class PreambleDetection:
    offset_samples: int
    channel_gain: complex
    period_scale: float
    score: float


def detect_preamble(x: IqStream, cfg: UplinkConfig, drift_max: float = 0.05):
    """Find the FM0 preamble; returns a PreambleDetection or None.

    Correlates matched-filtered templates over a grid of half-bit rates
    (tag clocks drift several percent), normalizes against windowed energy,
    and requires the best complex-correlation magnitude to clear the
    threshold.  The complex peak is the channel estimate; the winning rate
    (parabolically refined across the grid) seeds timing recovery.
    """
    n = len(x.samples)
    power = np.abs(x.samples) ** 2
    scores_by_scale = np.zeros(len(PREAMBLE_RATE_GRID))
    peaks_by_scale = np.zeros(len(PREAMBLE_RATE_GRID), dtype=int)
    gains_by_scale = np.zeros(len(PREAMBLE_RATE_GRID), dtype=complex)
    for si, scale in enumerate(PREAMBLE_RATE_GRID):
        template = _preamble_template(float(scale))
        m = len(template)
        if n < m:
            continue
        corr = sp_signal.fftconvolve(x.samples, template[::-1].conj(), mode="valid")
        energy = sp_signal.fftconvolve(power, np.ones(m), mode="valid")
        # digitally silent stretches produce 0/0 peaks; ignore lags whose
        # windowed energy is negligible against the window's typical level
        floor = 0.01 * float(np.median(energy)) if energy.size else 0.0
        tnorm = float(np.sum(template**2))
        denom = np.sqrt(np.maximum(energy * tnorm, 1e-300))
        score = np.where(energy >= floor, np.abs(corr) / denom, 0.0)
        peak = int(np.argmax(score))
        refined = score[peak]
        if 0 < peak < len(score) - 1:
            # sub-lag peak value, so scales compete on alignment-free terms
            y0, y1, y2 = score[peak - 1 : peak + 2]
            dd = y0 - 2 * y1 + y2
            if abs(dd) > 1e-15:
                refined = y1 - 0.125 * (y0 - y2) ** 2 / dd
        scores_by_scale[si] = refined
        peaks_by_scale[si] = peak
        gains_by_scale[si] = corr[peak] / tnorm
    if not scores_by_scale.size or np.max(scores_by_scale) < PREAMBLE_THRESHOLD:
        return None
    # near-ties resolve toward the nominal rate (drift prior is centered)
    biased = scores_by_scale - 0.05 * np.abs(PREAMBLE_RATE_GRID - 1.0)
    si = int(np.argmax(biased))
    scale = float(PREAMBLE_RATE_GRID[si])
    return PreambleDetection(
        offset_samples=int(peaks_by_scale[si]),
        channel_gain=complex(gains_by_scale[si]),
        period_scale=float(np.clip(scale, 1 - drift_max, 1 + drift_max)),
        score=float(np.max(scores_by_scale)),
    )


@dataclass(frozen=True)
class TimingResult:
    halfbits: np.ndarray        # soft half-bit decisions (complex, equalized)
    error_rms: float
    locked: bool


def gardner_recover(
    x: IqStream,
    cfg: UplinkConfig,
    drift_max: float = 0.05,
    start_offset: int = 0,
    n_halfbits: int | None = None,
    period_scale: float = 1.0,
) -> TimingResult:
    """Track half-bit timing with a Gardner PLL and emit soft half-bits.

    `x` must be DC-free and roughly amplitude-equalized (levels near +-1).
    The timing error detector is e = Re{(y_k - y_{k-1}) * conj(y_mid)};
    gains follow the configured loop constants, with the error normalized
    to half-bit units.  Lock fails when the error RMS stays high.
    """
    samples = x.samples
    period = SAMPLES_PER_HALFBIT * float(np.clip(period_scale, 1 - drift_max, 1 + drift_max))
    if n_halfbits is None:
        n_halfbits = int((len(samples) - start_offset) / period) - 1
    pos = start_offset + period / 2  # center of the first half-bit
    rate_corr = 0.0
    prev = 0.0 + 0.0j
    out = np.zeros(n_halfbits, dtype=np.complex128)
    errs = np.zeros(n_halfbits)
    for k in range(n_halfbits):
        y = _interp(samples, pos)
        y_mid = _interp(samples, pos - period / 2)
        if k > 0:
            # positive error means the strobe is late
            e = float(np.real((y - prev) * np.conj(y_mid))) / 2.0
            e = float(np.clip(e, -1.0, 1.0))
            rate_corr -= GARDNER_KI * e
            rate_corr = float(np.clip(rate_corr, -drift_max, drift_max))
            pos += -GARDNER_KP * e * period + rate_corr * period
            errs[k] = e
        out[k] = y
        prev = y
        pos += period
        if pos >= len(samples):
            out = out[: k + 1]
            errs = errs[: k + 1]
            break
    tail = errs[len(errs) // 3 :]
    error_rms = float(np.sqrt(np.mean(tail**2))) if len(tail) else 1.0
    return TimingResult(halfbits=out, error_rms=error_rms, locked=error_rms < LOCK_ERROR_LIMIT)


def _interp(samples: np.ndarray, pos: float) -> complex:
    i = int(pos)
    if i + 1 >= len(samples):
        return samples[-1]
    frac = pos - i
    return samples[i] * (1 - frac) + samples[i + 1] * frac


def fm0_slice(halfbits: np.ndarray, n_bits: int) -> np.ndarray | None:
    """Bits from soft half-bit pairs; None when too few half-bits arrived."""
    needed = 2 * n_bits
    if len(halfbits) < needed:
        return None
    re = np.real(halfbits[:needed])
    first, second = re[0::2], re[1::2]
    return (first * second > 0).astype(np.uint8)


def pipeline_delay_s(cfg: UplinkConfig, input_rate_hz: float) -> float:
    """Simulated-time lag between the last packet sample and the decision.

    Causal stages: half the DC-removal window, the resampler group delay,
    and the interpolate/slice flush.  Stays well inside the protocol's
    20 tag-bit budget at every link frequency.
    """
    dc = DC_WINDOW_SYMBOLS / 2 / cfg.blf_hz
    resampler = 51.0 / (2.0 * input_rate_hz)
    flush = 2.5 / cfg.blf_hz
    return dc + resampler + flush


def demod_packet(
    x: IqStream,
    cfg: UplinkConfig,
    expected: FrameKind,
    band_index: int = 0,
) -> ReadEvent:
    """Full uplink receive chain for one listen window.

    Composes resampling, DC removal, preamble search, equalization, timing
    recovery, FM0 slicing, and (for identifier packets) the CRC check.
    The event's time_s is the simulated decision instant.
    """
    n_bits = 16 if expected is FrameKind.RN16_REPLY else phy.FRAME_LENGTHS[FrameKind.EPC_REPLY]
    fs_int = SAMPLES_PER_SYMBOL * cfg.blf_hz
    resampled = _resample(x, fs_int)
    cleaned = matched_filter(remove_dc(resampled, DC_WINDOW_SYMBOLS / cfg.blf_hz))
    found = detect_preamble(cleaned, cfg)
    window_end = x.start_time_s + x.duration_s
    if found is None:
        # no preamble: the decision that nothing arrived is available one
        # preamble-plus-margin into the window
        return ReadEvent(
            time_s=x.start_time_s
            + (phy.FM0_PREAMBLE_SYMBOLS + 4) / cfg.blf_hz
            + pipeline_delay_s(cfg, x.sample_rate_hz),
            band_index=band_index,
            kind=EventKind.TIMEOUT,
        )
    offset, gain, scale = found.offset_samples, found.channel_gain, found.period_scale
    equalized = cleaned.with_samples(cleaned.samples / gain)
    total_halfbits = len(phy.FM0_PREAMBLE_HALFBITS) + 2 * (n_bits + 1)
    timing = gardner_recover(
        equalized,
        cfg,
        start_offset=offset,
        n_halfbits=total_halfbits,
        period_scale=scale,
    )
    pre_len = len(phy.FM0_PREAMBLE_HALFBITS)
    packet_start = x.start_time_s + offset / fs_int
    packet_end = packet_start + total_halfbits * scale / (2 * cfg.blf_hz)
    decision = min(packet_end, window_end) + pipeline_delay_s(cfg, x.sample_rate_hz)
    if not timing.locked or len(timing.halfbits) < pre_len + 2 * n_bits:
        return ReadEvent(
            time_s=decision,
            band_index=band_index,
            kind=EventKind.TIMEOUT,
            packet_start_s=packet_start,
            packet_end_s=packet_end,
        )
    bits = fm0_slice(timing.halfbits[pre_len:], n_bits)
    if bits is None:
        return ReadEvent(
            time_s=decision,
            band_index=band_index,
            kind=EventKind.TIMEOUT,
            packet_start_s=packet_start,
            packet_end_s=packet_end,
        )
    if expected is FrameKind.RN16_REPLY:
        return ReadEvent(
            time_s=decision,
            band_index=band_index,
            kind=EventKind.RN16,
            rn16=phy._bits_to_int(bits),
            packet_start_s=packet_start,
            packet_end_s=packet_end,
        )
    epc = phy.epc_from_reply(bits)
    if epc is None:
        return ReadEvent(
            time_s=decision,
            band_index=band_index,
            kind=EventKind.CRC_ERROR,
            packet_start_s=packet_start,
            packet_end_s=packet_end,
        )
    return ReadEvent(
        time_s=decision,
        band_index=band_index,
        kind=EventKind.EPC,
        epc_bits=epc,
        packet_start_s=packet_start,
        packet_end_s=packet_end,
    )


def _resample(x: IqStream, fs_out: float) -> IqStream:
    if abs(fs_out - x.sample_rate_hz) < 1e-9:
        return x
    from fractions import Fraction

    ratio = Fraction(int(round(fs_out)), int(round(x.sample_rate_hz))).limit_denominator(64)
    out = sp_signal.resample_poly(x.samples, ratio.numerator, ratio.denominator)
    return IqStream(out, fs_out, x.center_frequency_hz, x.start_time_s)


# ---------------------------------------------------------------------------
# MAC session
# ---------------------------------------------------------------------------

def choose_q(expected_tags: int) -> int:
    """Slot exponent keeping 2^q close to the expected tag count."""
    if expected_tags < 0:
        raise ValueError("expected_tags must be >= 0")
    if expected_tags <= 1:
        return 0
    return int(np.clip(np.floor(np.log2(expected_tags) + 0.5), 0, 15))


class SessionPhase(enum.Enum):
    IDLE = "idle"
    AWAIT_RN16 = "await_rn16"
    AWAIT_EPC = "await_epc"


@dataclass(frozen=True)
class SessionStats:
    rounds: int = 0
    slots: int = 0
    rn16_count: int = 0
    epc_count: int = 0
    crc_error_count: int = 0
    timeout_count: int = 0
    duplicate_count: int = 0
    epc_values: tuple = ()


@dataclass(frozen=True)
class SessionState:
    band_index: int
    q_value: int
    phase: SessionPhase = SessionPhase.IDLE
    slots_remaining: int = 0
    pending_rn16: int | None = None
    downlink_delay_s: float = 0.0
    stats: SessionStats = field(default_factory=SessionStats)


def session_step(state: SessionState, event: ReadEvent | None) -> tuple[SessionState, Frame | None]:
    """One MAC transition: consume a demod event, emit the next command.

    Duplicate-flagged RN16s are never acknowledged; empty or failed slots
    advance to the next slot; exhausting the round starts a new Query.
    """
    stats = state.stats
    if state.phase is SessionPhase.IDLE:
        return _new_round(state), phy.frame_query(state.q_value)

    if event is None:
        raise ValueError("active session needs an event to advance")

    if state.phase is SessionPhase.AWAIT_RN16:
        stats = replace(stats, slots=stats.slots + 1)
        if event.kind is EventKind.RN16 and not event.duplicate:
            stats = replace(stats, rn16_count=stats.rn16_count + 1)
            next_state = replace(
                state, phase=SessionPhase.AWAIT_EPC, pending_rn16=event.rn16, stats=stats
            )
            return next_state, phy.frame_ack(event.rn16)
        if event.kind is EventKind.RN16 and event.duplicate:
            stats = replace(
                stats,
                rn16_count=stats.rn16_count + 1,
                duplicate_count=stats.duplicate_count + 1,
            )
        elif event.kind is EventKind.TIMEOUT:
            stats = replace(stats, timeout_count=stats.timeout_count + 1)
        return _advance_slot(replace(state, stats=stats))

    # AWAIT_EPC
    if event.kind is EventKind.EPC:
        stats = replace(
            stats,
            epc_count=stats.epc_count + 1,
            epc_values=stats.epc_values + (event.epc_hex,),
        )
    elif event.kind is EventKind.CRC_ERROR:
        stats = replace(stats, crc_error_count=stats.crc_error_count + 1)
    else:
        stats = replace(stats, timeout_count=stats.timeout_count + 1)
    return _advance_slot(replace(state, stats=stats, pending_rn16=None))


def _new_round(state: SessionState) -> SessionState:
    stats = replace(state.stats, rounds=state.stats.rounds + 1)
    return replace(
        state,
        phase=SessionPhase.AWAIT_RN16,
        slots_remaining=2**state.q_value - 1,
        pending_rn16=None,
        stats=stats,
    )


def _advance_slot(state: SessionState) -> tuple[SessionState, Frame]:
    if state.slots_remaining > 0:
        next_state = replace(
            state,
            phase=SessionPhase.AWAIT_RN16,
            slots_remaining=state.slots_remaining - 1,
            pending_rn16=None,
        )
        return next_state, phy.frame_query_rep()
    return _new_round(state), phy.frame_query(state.q_value)


def suppress_duplicates(events: list[ReadEvent], window_s: float) -> list[ReadEvent]:
    """Flag RN16 values seen in two or more bands within the time window.

    A wideband tag excited by chance backscatters the same RN16 into every
    band at once; acknowledging any copy would disrupt all sessions, so
    every copy is flagged.
    """
    out = list(events)
    rn16_events = [
        (i, e) for i, e in enumerate(events) if e.kind is EventKind.RN16 and e.rn16 is not None
    ]
    for i, e in rn16_events:
        for j, f in rn16_events:
            if j == i or f.rn16 != e.rn16 or f.band_index == e.band_index:
                continue
            if abs(f.time_s - e.time_s) <= window_s:
                out[i] = replace(out[i], duplicate=True)
                break
    return out


# ---------------------------------------------------------------------------
# Downlink scheduling
# ---------------------------------------------------------------------------

def schedule_downlink(
    frames: list[Frame | None],
    delays_s: list[float],
    plan: BandPlan,
    timing: PieTiming,
    amplitudes: list[float],
    predistorter=None,
    pa_model=None,
    depth: float = 0.99,
) -> IqStream:
    """Merge per-band downlink commands into one composite transmit stream.

    Each band's PIE waveform starts after its session delay; bands without
    a pending frame transmit a continuous carrier.  The optional
    pre-distorter and PA models run on the merged composite.
    """
    from . import bands as bands_mod
    from . import impairments

    if len(frames) != plan.n_bands or len(delays_s) != plan.n_bands:
        raise ValueError("need one frame slot and delay per band")
    fs = plan.per_band_sample_rate_hz
    envs = []
    for f, delay in zip(frames, delays_s):
        if f is None:
            envs.append(np.ones(0))
            continue
        lead = np.ones(max(int(round(delay * fs)), 0))
        envs.append(np.concatenate([lead, phy.pie_encode(f.bits, timing, fs, depth=depth)]))
    n = max((len(e) for e in envs), default=0)
    n = max(n, int(round(timing.preamble_s() * fs)))
    streams = []
    for i, env in enumerate(envs):
        padded = np.concatenate([env, np.ones(n - len(env))])
        streams.append(IqStream(amplitudes[i] * padded, fs, plan.bands[i].center_hz))
    composite = bands_mod.duc(streams, plan)
    if predistorter is not None:
        composite = impairments.gmp_apply(predistorter, composite)
    if pa_model is not None:
        composite = impairments.gmp_apply(pa_model, composite)
    return composite


# ---------------------------------------------------------------------------
# Event log
# ---------------------------------------------------------------------------

def events_to_csv(events: list[ReadEvent]) -> str:
    """CSV event log: time_s,band,kind,epc_hex,duplicate."""
    buf = io.StringIO()
    buf.write("time_s,band,kind,epc_hex,duplicate\n")
    for e in events:
        buf.write(
            f"{e.time_s:.9f},{e.band_index},{e.kind.value},{e.epc_hex},"
            f"{1 if e.duplicate else 0}\n"
        )
    return buf.getvalue()
