"""Tag-side models: frequency-selective antenna, front-end sensitivity, FSM.

Two tag families share one implementation:

* narrowband tags carry a SAW bandpass between antenna and chip, so they
  power up, decode, and backscatter only inside their assigned band;
* wideband (conventional) tags pass the whole span and aggregate downlink
  power across every band before envelope detection.

A tag instance is an immutable value; FSM steps return the successor tag.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import phy
from .iq import IqStream, dbm_to_watts
from .phy import Frame, FrameKind, UplinkConfig

# Front-end calibration defaults, echoed in every report header.
S_MIN_DEFAULT = 3.16                 # minimum decodable SNR, 5 dB
B_SIGNAL_DEFAULT_HZ = 1e6            # downlink signal bandwidth
K_T_DEFAULT_W_PER_HZ = 4.0e-13       # envelope-detector effective noise density
POWER_UP_DBM = -21.0                 # chip sensitivity
B_NOISE_NARROW_HZ = 2e6              # antenna-limited noise bandwidth, filtered tag
B_NOISE_WIDE_HZ = 100e6              # wideband antenna
INSERTION_LOSS_DB = 3.0
STOPBAND_SUPPRESSION_DB = 30.0
ROLL_OFF_WIDTH_HZ = 1.5e6
BACKSCATTER_MOD_LOSS_DB = 6.0        # fixed OOK modulation loss
CLOCK_DRIFT_MAX = 0.025              # per-tag drift drawn uniformly inside this


class SawSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SawFilterSpec:
    """Bandpass magnitude profile: flat top, raised-cosine skirts, floor.

    The 3 dB width equals passband_hz by construction, the stopband floor
    sits stopband_suppression_db below the passband, and insertion loss
    applies everywhere.
    """

    center_hz: float
    passband_hz: float = 1.6e6
    insertion_loss_db: float = INSERTION_LOSS_DB
    stopband_suppression_db: float = STOPBAND_SUPPRESSION_DB
    roll_off_width_hz: float = ROLL_OFF_WIDTH_HZ

    def __post_init__(self):
        if not 2.0 <= self.insertion_loss_db <= 4.0:
            raise SawSpecError("insertion loss expected in [2, 4] dB")
        if self.stopband_suppression_db < 30.0:
            raise SawSpecError("stopband suppression must be >= 30 dB")
        if self.flat_half_width_hz < 0:
            raise SawSpecError("roll-off too wide for the passband")

    @property
    def q_factor(self) -> float:
        return self.center_hz / self.passband_hz

    @property
    def _floor(self) -> float:
        return 10.0 ** (-self.stopband_suppression_db / 20.0)

    @property
    def flat_half_width_hz(self) -> float:
        """Offset where the raised-cosine skirt starts, solved so the
        profile passes through -3 dB exactly at half the passband."""
        floor = self._floor
        target = (2 ** -0.5 - floor) / (1.0 - floor)
        theta = np.arccos(2.0 * target - 1.0)
        return self.passband_hz / 2 - self.roll_off_width_hz * theta / np.pi


def saw_gain(spec: SawFilterSpec, freq_hz) -> np.ndarray:
    """Complex voltage gain at absolute frequency (zero-phase model)."""
    delta = np.abs(np.asarray(freq_hz, dtype=np.float64) - spec.center_hz)
    floor = spec._floor
    a = spec.flat_half_width_hz
    w = spec.roll_off_width_hz
    rel = np.where(
        delta <= a,
        1.0,
        np.where(
            delta >= a + w,
            floor,
            floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * (delta - a) / w)),
        ),
    )
    il = 10.0 ** (-spec.insertion_loss_db / 20.0)
    return (il * rel).astype(np.complex128)


def saw_filter_waveform(
    samples: np.ndarray,
    spec: SawFilterSpec,
    reference_hz: float,
    sample_rate_hz: float,
    pad: int = 256,
) -> np.ndarray:
    """Shape a baseband waveform by the SAW response around reference_hz.

    Zero-phase FFT filtering with zero padding against circular wrap;
    sample k of the input maps to absolute frequency reference + fftfreq.
    """
    x = np.concatenate([np.zeros(pad, dtype=np.complex128), samples, np.zeros(pad)])
    freqs = np.fft.fftfreq(len(x), 1.0 / sample_rate_hz)
    shaped = np.fft.ifft(np.fft.fft(x) * saw_gain(spec, reference_hz + freqs))
    return shaped[pad : pad + len(samples)]


# ---------------------------------------------------------------------------
# Front-end sensitivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChipFrontEnd:
    """Envelope-detector parameters governing downlink decodability."""

    s_min: float = S_MIN_DEFAULT
    k_t: float = K_T_DEFAULT_W_PER_HZ
    b_signal_hz: float = B_SIGNAL_DEFAULT_HZ
    b_noise_hz: float = B_NOISE_WIDE_HZ
    power_up_threshold_w: float = dbm_to_watts(POWER_UP_DBM)

    def __post_init__(self):
        if min(self.s_min, self.k_t, self.b_signal_hz, self.power_up_threshold_w) <= 0:
            raise ValueError("front-end parameters must be positive")
        if self.b_noise_hz < self.b_signal_hz:
            raise ValueError("noise bandwidth must be >= signal bandwidth")


def min_detectable_power(fe: ChipFrontEnd) -> float:
    """Smallest modulated downlink power the envelope detector can decode.

    P = 4*S*Bs*Kt + 2*Kt*sqrt(4*Bs^2*S^2 + Bn*Bs*S): the second term is the
    self-mixed noise contribution that grows with the noise bandwidth.
    """
    s, kt, bs, bn = fe.s_min, fe.k_t, fe.b_signal_hz, fe.b_noise_hz
    return 4.0 * s * bs * kt + 2.0 * kt * np.sqrt(4.0 * bs**2 * s**2 + bn * bs * s)


# ---------------------------------------------------------------------------
# Tag instances
# ---------------------------------------------------------------------------

class TagKind(enum.Enum):
    NARROWBAND = "quin"
    WIDEBAND = "conv"


class TagFsmState(enum.Enum):
    OFF = "off"
    READY = "ready"
    ARBITRATE = "arbitrate"
    REPLY = "reply"
    ACKNOWLEDGED = "acknowledged"


SLOT_COUNTER_MAX = 2**15 - 1


@dataclass(frozen=True)
class TagInstance:
    epc_bits: np.ndarray
    kind: TagKind
    band_index: int | None
    saw: SawFilterSpec | None
    front_end: ChipFrontEnd
    distance_m: float
    rng_seed: int
    clock_drift_frac: float
    fsm_state: TagFsmState = TagFsmState.OFF
    slot_counter: int = 0
    active_rn16: int | None = None
    draw_count: int = 0

    def __post_init__(self):
        epc = np.asarray(self.epc_bits, dtype=np.uint8)
        object.__setattr__(self, "epc_bits", epc)
        if len(epc) != phy.EPC_BITS:
            raise ValueError("epc must be 96 bits")
        if abs(self.clock_drift_frac) > 0.05:
            raise ValueError("clock drift limited to +-5%")
        if not 0 <= self.slot_counter <= SLOT_COUNTER_MAX:
            raise ValueError("slot counter out of range")
        if self.kind is TagKind.NARROWBAND and (self.saw is None or self.band_index is None):
            raise ValueError("narrowband tags need a SAW spec and band index")

    @property
    def epc_hex(self) -> str:
        return phy.bits_to_hex(self.epc_bits)

    @property
    def powered(self) -> bool:
        return self.fsm_state is not TagFsmState.OFF


def _tag_rng(tag: TagInstance, purpose: int, count: int) -> np.random.Generator:
    return np.random.default_rng([tag.rng_seed & 0x7FFFFFFFFFFFFFFF, purpose, count])


def make_tag(
    epc_hex: str,
    kind: TagKind,
    distance_m: float,
    rng_seed: int,
    band_index: int | None = None,
    saw_center_hz: float | None = None,
    saw: SawFilterSpec | None = None,
) -> TagInstance:
    """Build a powered-down tag; clock drift comes from the tag's seed."""
    epc = phy.hex_to_bits(epc_hex, phy.EPC_BITS)
    drift_rng = np.random.default_rng([rng_seed & 0x7FFFFFFFFFFFFFFF, 0xD51F])
    drift = float(drift_rng.uniform(-CLOCK_DRIFT_MAX, CLOCK_DRIFT_MAX))
    if kind is TagKind.NARROWBAND:
        if saw is None:
            if saw_center_hz is None:
                raise ValueError("narrowband tag needs a SAW center")
            saw = SawFilterSpec(center_hz=saw_center_hz)
        fe = ChipFrontEnd(b_noise_hz=B_NOISE_NARROW_HZ)
    else:
        saw = None
        band_index = None
        fe = ChipFrontEnd(b_noise_hz=B_NOISE_WIDE_HZ)
    return TagInstance(
        epc_bits=epc,
        kind=kind,
        band_index=band_index,
        saw=saw,
        front_end=fe,
        distance_m=distance_m,
        rng_seed=rng_seed,
        clock_drift_frac=drift,
    )


# ---------------------------------------------------------------------------
# Downlink reception
# ---------------------------------------------------------------------------

def downlink_decision(
    tag: TagInstance,
    power_envelope_w: np.ndarray,
    sample_rate_hz: float,
    timing_tolerance_frac: float = 0.12,
) -> tuple[np.ndarray | None, bool]:
    """Power-up and decode decision given the chip-side power envelope.

    The envelope is the instantaneous power reaching the chip (insertion
    loss and band filtering already applied).  Powered requires the mean
    power above the chip threshold; decoding additionally requires the
    modulated power (high minus low state) to clear the Eq-style minimum
    detectable power, then a PIE interval decode with the tag's clock.
    """
    env = np.asarray(power_envelope_w, dtype=np.float64)
    if env.size == 0:
        return None, False
    avg = float(np.mean(env))
    if avg < tag.front_end.power_up_threshold_w:
        return None, False
    p_high = float(np.percentile(env, 90))
    p_low = float(np.percentile(env, 5))
    if p_high - p_low < min_detectable_power(tag.front_end):
        return None, True
    bits = phy.pie_decode(
        env,
        sample_rate_hz,
        timing_tolerance_frac=timing_tolerance_frac,
        clock_scale=1.0 + tag.clock_drift_frac,
    )
    return bits, True


def tag_receive_downlink(tag: TagInstance, rf_at_tag: IqStream) -> tuple[np.ndarray | None, bool]:
    """Full-span reception: SAW-filter (narrowband) then envelope-detect.

    `rf_at_tag` is the composite at the tag's location, post path loss.
    Returns (command bits or None, powered flag).
    """
    if tag.kind is TagKind.NARROWBAND:
        shaped = saw_filter_waveform(
            rf_at_tag.samples, tag.saw, rf_at_tag.center_frequency_hz, rf_at_tag.sample_rate_hz
        )
    else:
        shaped = rf_at_tag.samples
    power_env = np.abs(shaped) ** 2
    power_env = _lowpass_envelope(power_env, rf_at_tag.sample_rate_hz, tag.front_end.b_signal_hz)
    return downlink_decision(tag, power_env, rf_at_tag.sample_rate_hz)


def _lowpass_envelope(env: np.ndarray, fs: float, b_signal_hz: float) -> np.ndarray:
    """Envelope band-limit: zero-phase FFT brick wall at the signal bandwidth."""
    if fs <= 2 * b_signal_hz:
        return env
    spec = np.fft.rfft(env)
    freqs = np.fft.rfftfreq(len(env), 1.0 / fs)
    spec[freqs > b_signal_hz] = 0.0
    return np.fft.irfft(spec, n=len(env))


# ---------------------------------------------------------------------------
# Gen-2 state machine
# ---------------------------------------------------------------------------

def tag_power_update(tag: TagInstance, powered: bool) -> TagInstance:
    if powered and tag.fsm_state is TagFsmState.OFF:
        return replace(tag, fsm_state=TagFsmState.READY)
    if not powered and tag.fsm_state is not TagFsmState.OFF:
        return replace(tag, fsm_state=TagFsmState.OFF, active_rn16=None, slot_counter=0)
    return tag


def _fresh_rn16(tag: TagInstance) -> tuple[TagInstance, int]:
    rn16 = int(_tag_rng(tag, 1, tag.draw_count).integers(0, 1 << 16))
    return replace(tag, draw_count=tag.draw_count + 1, active_rn16=rn16), rn16


def _draw_slot(tag: TagInstance, q: int) -> tuple[TagInstance, int]:
    slot = int(_tag_rng(tag, 2, tag.draw_count).integers(0, 1 << q))
    return replace(tag, draw_count=tag.draw_count + 1, slot_counter=slot), slot


def tag_fsm_step(tag: TagInstance, command: Frame) -> tuple[TagInstance, Frame | None]:
    """Advance the inventory state machine by one decoded command.

    Unpowered tags never respond.  A new Query always starts a fresh round;
    the slot counter decides when the tag backs its RN16; only an Ack
    echoing that RN16 elicits the identifier reply.
    """
    if not tag.powered:
        return tag, None

    if command.kind is FrameKind.QUERY:
        q = phy.query_q(command)
        tag, slot = _draw_slot(replace(tag, active_rn16=None), q)
        if slot == 0:
            tag, rn16 = _fresh_rn16(tag)
            return replace(tag, fsm_state=TagFsmState.REPLY), phy.frame_rn16_reply(rn16)
        return replace(tag, fsm_state=TagFsmState.ARBITRATE), None

    if command.kind is FrameKind.QUERY_REP:
        if tag.fsm_state is TagFsmState.ARBITRATE:
            slot = tag.slot_counter - 1
            if slot <= 0:
                tag, rn16 = _fresh_rn16(replace(tag, slot_counter=0))
                return replace(tag, fsm_state=TagFsmState.REPLY), phy.frame_rn16_reply(rn16)
            return replace(tag, slot_counter=slot), None
        if tag.fsm_state is TagFsmState.REPLY:
            # reader moved on without acking: drop out of this round
            return replace(
                tag, fsm_state=TagFsmState.ARBITRATE, slot_counter=SLOT_COUNTER_MAX,
                active_rn16=None,
            ), None
        return tag, None

    if command.kind is FrameKind.ACK:
        if tag.fsm_state is TagFsmState.REPLY and phy.ack_rn16(command) == tag.active_rn16:
            reply = phy.frame_epc_reply(tag.epc_bits)
            return replace(tag, fsm_state=TagFsmState.ACKNOWLEDGED), reply
        if tag.fsm_state in (TagFsmState.REPLY, TagFsmState.ACKNOWLEDGED):
            return replace(
                tag, fsm_state=TagFsmState.ARBITRATE, slot_counter=SLOT_COUNTER_MAX,
                active_rn16=None,
            ), None
        return tag, None

    if command.kind is FrameKind.NAK:
        if tag.fsm_state in (TagFsmState.REPLY, TagFsmState.ACKNOWLEDGED):
            return replace(
                tag, fsm_state=TagFsmState.ARBITRATE, slot_counter=SLOT_COUNTER_MAX,
                active_rn16=None,
            ), None
        return tag, None

    return tag, None


# ---------------------------------------------------------------------------
# Backscatter
# ---------------------------------------------------------------------------

def reply_start_jitter_s(tag: TagInstance, reply_index: int, blf_hz: float) -> float:
    """Per-reply turnaround jitter, up to a tenth of a symbol."""
    rng = _tag_rng(tag, 3, reply_index)
    return float(rng.uniform(0.0, 0.1 / blf_hz))


def backscatter_phase(tag: TagInstance) -> complex:
    """Round-trip carrier phase: distance term plus a fixed per-tag offset."""
    wavelength = 299792458.0 / 915e6
    geometric = -2.0 * np.pi * (2.0 * tag.distance_m) / wavelength
    offset = float(_tag_rng(tag, 4, 0).uniform(0, 2 * np.pi))
    return np.exp(1j * (geometric + offset))


def tag_backscatter(
    tag: TagInstance,
    reply: Frame,
    cfg: UplinkConfig,
    carrier_at_tag: complex,
    carrier_freq_hz: float,
    sample_rate_hz: float,
) -> IqStream:
    """OOK waveform the tag reflects for one reply frame.

    `carrier_at_tag` is the incident carrier amplitude at the tag antenna.
    The FM0 clock runs at blf*(1+drift); narrowband tags shape the
    reflected spectrum with their SAW (the incident carrier has already
    passed it once, so the band filter applies twice in total).
    """
    if tag.fsm_state not in (TagFsmState.REPLY, TagFsmState.ACKNOWLEDGED):
        raise ValueError("tag is not in a replying state")
    blf_actual = cfg.blf_hz * (1.0 + tag.clock_drift_frac)
    levels = phy.fm0_encode(reply.bits, blf_actual, sample_rate_hz)
    ook = (levels + 1.0) / 2.0
    amplitude = carrier_at_tag * 10.0 ** (-BACKSCATTER_MOD_LOSS_DB / 20.0)
    if tag.kind is TagKind.NARROWBAND:
        chip_side = amplitude * saw_gain(tag.saw, carrier_freq_hz)
        wave = chip_side * ook * backscatter_phase(tag)
        wave = saw_filter_waveform(wave, tag.saw, carrier_freq_hz, sample_rate_hz)
    else:
        wave = amplitude * ook * backscatter_phase(tag)
    return IqStream(wave, sample_rate_hz, carrier_freq_hz)


# ---------------------------------------------------------------------------
# Population files
# ---------------------------------------------------------------------------

def format_population(tags: list[TagInstance]) -> str:
    """One line per tag: `epc=<24 hex> kind=quin:<band>|conv dist=<m> seed=<u64>`."""
    lines = []
    for t in tags:
        kind = f"quin:{t.band_index}" if t.kind is TagKind.NARROWBAND else "conv"
        lines.append(f"epc={t.epc_hex} kind={kind} dist={t.distance_m:g} seed={t.rng_seed}")
    return "\n".join(lines) + "\n"


def parse_population(text: str) -> list[dict]:
    """Parse tag population lines into descriptor dicts.

    Narrowband entries carry their band index; the harness resolves band
    centers against the active plan when materializing TagInstances.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        try:
            kind_text = fields["kind"]
            if kind_text.startswith("quin:"):
                kind = TagKind.NARROWBAND
                band = int(kind_text.split(":", 1)[1])
            elif kind_text == "conv":
                kind = TagKind.WIDEBAND
                band = None
            else:
                raise KeyError("kind")
            out.append(
                {
                    "epc_hex": fields["epc"],
                    "kind": kind,
                    "band_index": band,
                    "distance_m": float(fields["dist"]),
                    "rng_seed": int(fields["seed"]),
                }
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"bad population line {lineno}: {line!r}") from exc
    return out
