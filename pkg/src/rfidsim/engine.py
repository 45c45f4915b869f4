"""End-to-end simulation engine: downlink, channel, tags, uplink, MAC.

One runner per band advances its session as a sequence of committed
activities (a command transmission, then a listen window).  The band with
the earliest committed end resolves next; by construction every other
band's transmit timeline is already committed past that instant, so
cross-band quantities (the aggregate envelope wideband tags see, amplifier
intermodulation) are always causally available.

Waveforms are synthesized lazily per listen window.  Two fidelities:

* fast_per_band: per-band waveforms only; amplifier cross-band products
  are modeled analytically from the polynomial coefficients;
* composite: each listen window additionally runs the full merge ->
  pre-distorter -> amplifier -> channelize path at the composite rate and
  injects the true distortion residual.

Narrowband tags are driven directly from their own band's command stream:
the interval decoder is amplitude-scale-invariant and the 12% timing
tolerance pre-certifies +-2.5% tag clocks (codec tests cover the waveform
path), so per-tag reception reduces to the power-up and modulated-power
gates.  Wideband tags always go through the aggregate-envelope decode.

Determinism: every random stream is keyed by (master_seed, purpose, band
or tag index), never by event interleaving.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import bands as bands_mod
from . import impairments, phy, tag as tag_mod
from .baseline import cluster_decode, decode_latency_model
from .iq import IqStream, dbm_to_watts
from .phy import Frame, FrameKind, PieTiming, UplinkConfig
from .reader import (
    EventKind,
    ReadEvent,
    SessionPhase,
    SessionState,
    demod_packet,
    pipeline_delay_s,
    session_step,
)

CONV_TRACK_RATE_HZ = 3.2e6     # aggregate-envelope processing rate
REGISTRY_KEEP_S = 20e-3
PEAK_DRIVE_FRACTION = 0.95     # composite peak backoff into the PA


def t1_s(timing: PieTiming, blf_hz: float) -> float:
    """Tag turnaround before a reply starts."""
    return max(timing.rtcal_s, 10.0 / blf_hz)


def t2_s(blf_hz: float) -> float:
    """Reader turnaround after a decision before the next command."""
    return 6.0 / blf_hz


@dataclass
class _Segment:
    t0: float
    t1: float
    env: np.ndarray | None      # None: constant carrier
    amp: float
    fs: float = 0.0


class _BandTx:
    """Committed transmit timeline for one band (amplitude envelope)."""

    def __init__(self, amp: float):
        self.amp = amp
        self.segments: list[_Segment] = []
        self.end = 0.0

    def add_carrier(self, t1: float) -> None:
        if t1 > self.end:
            self.segments.append(_Segment(self.end, t1, None, self.amp))
            self.end = t1

    def add_command(self, t0: float, env: np.ndarray, fs: float) -> None:
        self.add_carrier(t0)
        t1 = t0 + len(env) / fs
        self.segments.append(_Segment(t0, t1, env, self.amp, fs))
        self.end = t1

    def prune(self, before: float) -> None:
        self.segments = [s for s in self.segments if s.t1 > before]

    def sample(self, a: float, b: float, fs: float) -> np.ndarray:
        """Amplitude envelope over [a, b) at rate fs (carrier past the end)."""
        n = int(round((b - a) * fs))
        out = np.full(n, self.amp, dtype=np.float64)
        for seg in self.segments:
            if seg.t1 <= a or seg.t0 >= b:
                continue
            i0 = max(int(np.ceil((seg.t0 - a) * fs)), 0)
            i1 = min(int(np.ceil((seg.t1 - a) * fs)), n)
            if i1 <= i0:
                continue
            if seg.env is None:
                out[i0:i1] = seg.amp
            else:
                t = a + np.arange(i0, i1) / fs
                idx = np.clip(((t - seg.t0) * seg.fs).astype(np.int64), 0, len(seg.env) - 1)
                out[i0:i1] = seg.amp * seg.env[idx]
        return out


@dataclass
class _Reply:
    t0: float
    t1: float
    frame: Frame
    tag_index: int
    band_scope: int | None      # None: audible in every band (wideband tag)
    rn16: int | None
    blf_actual: float


@dataclass
class _ListenWindow:
    t0: float
    t1: float
    expected: FrameKind
    cmd_end: float


class Engine:
    """Drives one scenario; see harness.run_scenario for the public entry."""

    def __init__(self, cfg):
        from .harness import build_population  # local import: config layer owns it

        self.cfg = cfg
        self.plan = cfg.band_plan()
        self.k = self.plan.n_bands
        self.blf = cfg.blf_hz
        self.uplink = UplinkConfig(blf_hz=cfg.blf_hz)
        self.timing = phy.default_pie_timing(cfg.blf_hz)
        self.fs = self.plan.per_band_sample_rate_hz
        self.t1 = t1_s(self.timing, self.blf)
        self.t2 = t2_s(self.blf)
        self.leak_amp = 10.0 ** (-cfg.tx_rx_isolation_db / 20.0)
        self.noise_psd = cfg.noise_psd_w_per_hz

        per_band_w = dbm_to_watts(cfg.eirp_dbm) / self.k
        self.tx_amp = float(np.sqrt(per_band_w))

        self.tags: list[tag_mod.TagInstance] = build_population(cfg, self.plan)
        self.band_tags: list[list[int]] = [[] for _ in range(self.k)]
        self.conv_tags: list[int] = []
        for i, t in enumerate(self.tags):
            if t.kind is tag_mod.TagKind.NARROWBAND:
                if t.band_index < self.k:
                    self.band_tags[t.band_index].append(i)
            else:
                self.conv_tags.append(i)

        self.q_values = self._q_plan()
        self.registry: list[_Reply] = []
        self.events: list[ReadEvent] = []
        self.excitations: list[tuple[float, int]] = []
        self.reply_serial = 0
        self.duplicate_acks = 0

        self._setup_pa()
        self._power_up_tags()
        self._runners = [_BandRunner(self, b) for b in range(self.k)]
        self._conv = _ConvTrack(self)

    # -- construction helpers ------------------------------------------------

    def _q_plan(self) -> list[int]:
        from .reader import choose_q

        if self.cfg.q_override is not None:
            return [self.cfg.q_override] * self.k
        if self.cfg.reader_mode == "quin":
            return [choose_q(len(self.band_tags[b])) for b in range(self.k)]
        return [choose_q(len(self.conv_tags))] * self.k

    def _setup_pa(self) -> None:
        self.pa = impairments.default_pa_model() if self.cfg.pa_nonlinear else None
        self.dpd = None
        # composite drive units: full scale is the all-bands-high peak
        self.drive_scale = PEAK_DRIVE_FRACTION / (self.k * self.tx_amp)
        if self.pa is not None and self.cfg.dpd:
            self.dpd = self._train_dpd()
        if self.pa is not None:
            gain = impairments.small_signal_gain(self.pa)
            self.pa_gain = gain
        else:
            self.pa_gain = 1.0 + 0.0j

    def _train_dpd(self):
        """Indirect-learning fit on a representative multi-band PIE drive."""
        rng = np.random.default_rng([self.cfg.master_seed, 0xD9D])
        streams = []
        for b in range(self.k):
            bits = rng.integers(0, 2, 22).astype(np.uint8)
            env = phy.pie_encode(bits, self.timing, self.fs, depth=self.cfg.modulation_depth)
            streams.append(IqStream(self.tx_amp * env, self.fs, self.plan.bands[b].center_hz))
        n = min(len(s.samples) for s in streams)
        streams = [s.with_samples(s.samples[:n]) for s in streams]
        composite = bands_mod.duc(streams, self.plan)
        drive = composite.with_samples(composite.samples * self.drive_scale)
        return impairments.make_predistorter(self.pa, drive, 5, 3)

    def _power_up_tags(self) -> None:
        """Steady carrier powers tags once at start; power states persist."""
        for i, t in enumerate(self.tags):
            self.tags[i] = tag_mod.tag_power_update(t, self._tag_powered(t))

    def _tag_powered(self, t: tag_mod.TagInstance) -> bool:
        if t.kind is tag_mod.TagKind.NARROWBAND:
            if t.band_index >= self.k:
                return False
            power = self._incident_power(t, t.band_index)
        else:
            power = sum(self._incident_power(t, b) for b in range(self.k))
        return power >= t.front_end.power_up_threshold_w

    def _carrier_freq(self, band: int) -> float:
        return self.plan.bands[band].center_hz + self.cfg.cfo_hz

    def _path_amp(self, t: tag_mod.TagInstance, band: int) -> float:
        loss_db = impairments.path_loss_db(t.distance_m, self._carrier_freq(band))
        return 10.0 ** (-loss_db / 20.0)

    def _incident_power(self, t: tag_mod.TagInstance, band: int) -> float:
        """Chip-side carrier power from one band (band filter applied)."""
        amp = self.tx_amp * self._path_amp(t, band)
        if t.kind is tag_mod.TagKind.NARROWBAND:
            amp *= abs(tag_mod.saw_gain(t.saw, self._carrier_freq(band)))
        return float(amp**2)

    def _rx_reply_gain(self, t: tag_mod.TagInstance, band: int) -> complex:
        """Receiver-side OOK-on amplitude for a tag reply in one band."""
        path = self._path_amp(t, band)
        gain = self.tx_amp * path * path * 10 ** (-tag_mod.BACKSCATTER_MOD_LOSS_DB / 20.0)
        if t.kind is tag_mod.TagKind.NARROWBAND:
            gain *= abs(tag_mod.saw_gain(t.saw, self._carrier_freq(band))) ** 2
        return gain * tag_mod.backscatter_phase(t)

    # -- registry ------------------------------------------------------------

    def register_reply(self, t_index: int, frame: Frame, t0: float, band_scope: int | None):
        t = self.tags[t_index]
        blf_actual = self.blf * (1.0 + t.clock_drift_frac)
        dur = (phy.FM0_PREAMBLE_SYMBOLS + len(frame.bits) + 1) / blf_actual
        rn16 = phy.rn16_value(frame) if frame.kind is FrameKind.RN16_REPLY else None
        self.registry.append(
            _Reply(t0, t0 + dur, frame, t_index, band_scope, rn16, blf_actual)
        )
        self.reply_serial += 1

    def replies_in(self, band: int, a: float, b: float) -> list[_Reply]:
        return [
            r
            for r in self.registry
            if (r.band_scope is None or r.band_scope == band) and r.t1 > a and r.t0 < b
        ]

    def is_duplicate(self, band: int, rn16: int, a: float, b: float) -> bool:
        """Same RN16 audible in another band within the slot window."""
        for r in self.registry:
            if r.rn16 != rn16 or r.t1 <= a or r.t0 >= b:
                continue
            if r.band_scope is None or r.band_scope != band:
                return True
        return False

    def prune_registry(self, before: float) -> None:
        cutoff = before - REGISTRY_KEEP_S
        self.registry = [r for r in self.registry if r.t1 >= cutoff]

    # -- waveform assembly -----------------------------------------------------

    def band_noise_rng(self, band: int, serial: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.master_seed, 0x201, band, serial])

    def assemble_window(self, band: int, win: _ListenWindow, serial: int) -> IqStream:
        """Receiver samples for one listen window at the per-band rate."""
        n = int(round((win.t1 - win.t0) * self.fs))
        samples = np.full(n, self.tx_amp * self.leak_amp, dtype=np.complex128)
        for r in self.replies_in(band, win.t0, win.t1):
            t = self.tags[r.tag_index]
            incident = self.tx_amp * self._path_amp(t, band)
            wave = tag_mod.tag_backscatter(
                replace(t, fsm_state=tag_mod.TagFsmState.REPLY),
                r.frame,
                self.uplink,
                incident,
                self._carrier_freq(band),
                self.fs,
            ).samples * self._path_amp(t, band)
            i0 = int(round((r.t0 - win.t0) * self.fs))
            src0 = max(-i0, 0)
            dst0 = max(i0, 0)
            count = min(len(wave) - src0, n - dst0)
            if count > 0:
                samples[dst0 : dst0 + count] += wave[src0 : src0 + count]
        interference = self._pa_residual(band, win)
        if interference is not None:
            samples[: len(interference)] += interference
        stream = IqStream(samples, self.fs, self.plan.bands[band].center_hz, win.t0)
        if self.noise_psd > 0:
            stream = impairments.awgn(stream, self.noise_psd, self.band_noise_rng(band, serial))
        return stream

    def _pa_residual(self, band: int, win: _ListenWindow) -> np.ndarray | None:
        """Cross-band distortion leaking into this band's receive window."""
        if self.pa is None:
            return None
        if self.cfg.fidelity == "composite":
            return self._residual_composite(band, win.t0, win.t1)
        if self.dpd is not None:
            return None  # fast mode treats the linearized cascade as clean
        return self._residual_analytic(band, win.t0, win.t1)

    def _residual_composite(self, band: int, a: float, b: float) -> np.ndarray:
        pad = 64 / self.fs
        a_pad = a - pad
        streams = []
        for j in range(self.k):
            env = self._runners[j].tx.sample(a_pad, b, self.fs)
            streams.append(IqStream(env.astype(complex), self.fs, self.plan.bands[j].center_hz))
        composite = bands_mod.duc(streams, self.plan)
        drive = composite.samples * self.drive_scale
        u = drive
        if self.dpd is not None:
            u = impairments.gmp_apply_array(self.dpd, drive)
        out = impairments.gmp_apply_array(self.pa, u)
        residual = (out - self.pa_gain * drive) / self.drive_scale / abs(self.pa_gain)
        comp_stream = IqStream(residual, self.plan.composite_sample_rate_hz, self.plan.span_center_hz)
        band_res = bands_mod.ddc(comp_stream, self.plan, band).samples
        skip = int(round(pad * self.fs))
        n = int(round((b - a) * self.fs))
        return band_res[skip : skip + n] * self.leak_amp

    def _residual_analytic(self, band: int, a: float, b: float) -> np.ndarray:
        """Memoryless cross-gain estimate of the in-band distortion.

        For y = sum_k a_k x |x|^k, the tone in this band sees an effective
        gain g(P_own, P_other) = a0 + a2 (P + 2 P_o) + a4 (P^2 + 6 P P_o +
        3 P_o^2); its fluctuation with the other bands' envelopes is the
        interference term.
        """
        n = int(round((b - a) * self.fs))
        p_own = (self.tx_amp * self.drive_scale) ** 2
        p_other = np.zeros(n)
        for j in range(self.k):
            if j == band:
                continue
            env = self._runners[j].tx.sample(a, b, self.fs)[:n]
            p_other += (env * self.drive_scale) ** 2
        c = self.pa.coeffs.sum(axis=1)  # collapse memory for the analytic form
        a0 = c[0]
        a2 = c[2] if len(c) > 2 else 0.0
        a4 = c[4] if len(c) > 4 else 0.0
        g = a0 + a2 * (p_own + 2 * p_other) + a4 * (p_own**2 + 6 * p_own * p_other + 3 * p_other**2)
        g = g / abs(self.pa_gain)
        fluct = (g - np.mean(g)) * self.tx_amp
        return fluct * self.leak_amp

    def interference_mode(self) -> bool:
        """True when amplifier products can corrupt otherwise-empty windows."""
        if self.pa is None:
            return False
        if self.cfg.fidelity == "composite":
            return True
        return self.dpd is None

    # -- main loop -------------------------------------------------------------

    def run(self):
        for runner in self._runners:
            runner.start()
        horizon = self.cfg.duration_s
        while True:
            runner = min(self._runners, key=lambda r: r.commit_end)
            if runner.commit_end > horizon:
                break
            self._conv.advance(runner.commit_end)
            runner.resolve()
            self.prune_registry(runner.commit_end)
        self._conv.advance(horizon)
        self.events.sort(key=lambda e: e.time_s)
        return self


class _BandRunner:
    """One band's MAC timeline: commit a command + listen, resolve, repeat."""

    def __init__(self, engine: Engine, band: int):
        self.e = engine
        self.band = band
        self.tx = _BandTx(engine.tx_amp)
        self.session = SessionState(band_index=band, q_value=engine.q_values[band])
        self.rng = np.random.default_rng([engine.cfg.master_seed, 0x51, band])
        if engine.cfg.downlink_sync:
            self.session_offset = 0.0
        else:
            self.session_offset = float(self.rng.uniform(0, 2 * engine.timing.rtcal_s))
        self.commit_end = 0.0
        self.window: _ListenWindow | None = None
        self.window_serial = 0
        self.pending_collision: list[_Reply] = []

    # -- commit side -----------------------------------------------------------

    def start(self) -> None:
        self.session, frame = session_step(self.session, None)
        self._commit_command(self.session_offset, frame)

    def _command_jitter(self) -> float:
        if self.e.cfg.downlink_sync:
            return 0.0
        return float(self.rng.uniform(0.0, self.e.timing.tari_s))

    def _commit_command(self, t_earliest: float, frame: Frame) -> None:
        e = self.e
        t0 = max(t_earliest, self.tx.end) + self._command_jitter()
        env = phy.pie_encode(frame.bits, e.timing, e.fs, depth=e.cfg.modulation_depth)
        self.tx.add_command(t0, env, e.fs)
        cmd_end = t0 + e.timing.frame_duration_s(frame.bits)
        self._step_band_tags(frame, cmd_end)
        self._commit_listen(frame, cmd_end)

    def _step_band_tags(self, frame: Frame, cmd_end: float) -> None:
        """Drive this band's narrowband tags with the committed command."""
        e = self.e
        for idx in e.band_tags[self.band]:
            t = e.tags[idx]
            if not t.powered:
                continue
            if not self._downlink_decodable(t):
                continue
            new_tag, reply = tag_mod.tag_fsm_step(t, frame)
            e.tags[idx] = new_tag
            if reply is not None:
                jitter = tag_mod.reply_start_jitter_s(new_tag, new_tag.draw_count, e.blf)
                t0 = cmd_end + e.t1 + jitter
                e.register_reply(idx, reply, t0, band_scope=self.band)

    def _downlink_decodable(self, t: tag_mod.TagInstance) -> bool:
        power = self.e._incident_power(t, self.band)
        modulated = power * (1.0 - (1.0 - self.e.cfg.modulation_depth) ** 2)
        return modulated >= tag_mod.min_detectable_power(t.front_end)

    def _commit_listen(self, frame: Frame, cmd_end: float) -> None:
        """Slot timeout is the turnaround plus the longest expected packet;
        replies already registered can extend it (slow tag clocks)."""
        e = self.e
        expected = (
            FrameKind.EPC_REPLY
            if frame.kind is FrameKind.ACK
            else FrameKind.RN16_REPLY
        )
        n_bits = phy.FRAME_LENGTHS[expected]
        pipeline = pipeline_delay_s(e.uplink, e.fs)
        max_packet = (phy.FM0_PREAMBLE_SYMBOLS + n_bits + 1) / (e.blf * (1 - 0.06))
        t1_win = cmd_end + e.t1 + max_packet + pipeline + 2 / e.blf
        replies = e.replies_in(self.band, cmd_end, cmd_end + 10.0)
        if replies:
            t1_win = max(t1_win, max(r.t1 for r in replies) + pipeline + 4 / e.blf)
        self.window = _ListenWindow(cmd_end, t1_win, expected, cmd_end)
        self.tx.add_carrier(t1_win)
        self.commit_end = t1_win

    # -- resolve side ------------------------------------------------------------

    def resolve(self) -> None:
        e = self.e
        win = self.window
        self.window_serial += 1
        replies = e.replies_in(self.band, win.t0, win.t1)
        if not replies and not e.interference_mode():
            # measured false-alarm rate on clean noise is negligible; charge
            # the early no-preamble decision without synthesizing noise
            decision = win.t0 + e.t1 + 12 / e.blf + pipeline_delay_s(e.uplink, e.fs)
            event = ReadEvent(time_s=decision, band_index=self.band, kind=EventKind.TIMEOUT)
        elif (
            e.cfg.reader_mode == "fliptracer_baseline"
            and win.expected is FrameKind.RN16_REPLY
            and len(replies) >= 2
        ):
            event = self._resolve_collision_recovery(win, replies)
        else:
            stream = e.assemble_window(self.band, win, self.window_serial)
            event = demod_packet(stream, e.uplink, win.expected, band_index=self.band)
        if (
            event.kind is EventKind.RN16
            and e.cfg.reader_mode == "quin"
            and e.is_duplicate(self.band, event.rn16, win.t0 - 2 / e.blf, win.t1)
        ):
            event = replace(event, duplicate=True)
        if event.time_s <= e.cfg.duration_s:
            e.events.append(event)
        self.session, frame = session_step(self.session, event)
        if event.duplicate and frame is not None and frame.kind is FrameKind.ACK:
            e.duplicate_acks += 1  # must stay zero: suppression soundness
        next_start = max(event.time_s + e.t2, self.commit_end)
        self._commit_command(next_start, frame)

    def _resolve_collision_recovery(self, win: _ListenWindow, replies: list[_Reply]) -> ReadEvent:
        """Cluster-decode a collided slot, charging the measured latency."""
        e = self.e
        n = len(replies)
        reply_end = max(r.t1 for r in replies)
        if n > 5:
            return ReadEvent(
                time_s=reply_end + 20 / e.blf,
                band_index=self.band,
                kind=EventKind.TIMEOUT,
            )
        latency = decode_latency_model(n)
        decision = reply_end + latency
        if latency > 20.0 / e.blf:
            # decode finishes after the tags' Ack deadline: slot is lost
            return ReadEvent(
                time_s=decision, band_index=self.band, kind=EventKind.TIMEOUT
            )
        stream = e.assemble_window(self.band, win, self.window_serial)
        gains = np.array([e._rx_reply_gain(e.tags[r.tag_index], self.band) for r in replies])
        rates = np.array([r.blf_actual for r in replies])
        out = cluster_decode(
            stream,
            n,
            e.uplink,
            known_gains=gains,
            known_rates=rates,
            noise_power=e.noise_psd * e.fs,
            start_time_s=min(r.t0 for r in replies),
        )
        if out is None:
            return ReadEvent(time_s=decision, band_index=self.band, kind=EventKind.TIMEOUT)
        bits_list, _ = out
        return ReadEvent(
            time_s=decision,
            band_index=self.band,
            kind=EventKind.RN16,
            rn16=phy._bits_to_int(bits_list[0]),
            packet_start_s=min(r.t0 for r in replies),
            packet_end_s=reply_end,
        )


class _ConvTrack:
    """Wideband tags listening to the aggregate of every band's downlink."""

    DIP_FRACTION = 0.25

    def __init__(self, engine: Engine):
        self.e = engine
        self.cursor = 0.0
        self.fs = CONV_TRACK_RATE_HZ
        self.max_cmd_s = engine.timing.frame_duration_s(np.ones(22, dtype=np.uint8)) + 8 * engine.timing.tari_s

    def advance(self, to_t: float) -> None:
        """Scan the aggregate up to the commit frontier for command dips.

        The last `guard` of the range stays unscanned until the frontier
        moves past it, so dips straddling a chunk boundary are never lost.
        """
        e = self.e
        if not e.conv_tags or to_t <= self.cursor:
            return
        guard = 24e-6
        while self.cursor < to_t - guard:
            chunk_end = min(self.cursor + 8e-3, to_t)
            agg = self._aggregate_power(self.cursor, chunk_end)
            candidate = self._first_dip(agg)
            if candidate is None:
                new_cursor = max(self.cursor, chunk_end - guard)
                if new_cursor <= self.cursor:
                    break
                self.cursor = new_cursor
                continue
            t_cand = self.cursor + candidate / self.fs
            if t_cand + self.max_cmd_s > to_t:
                # command window not fully committed yet; hold position
                self.cursor = max(self.cursor, t_cand - 4e-6)
                break
            self._try_decode(t_cand)

    def _aggregate_power(self, a: float, b: float) -> np.ndarray:
        n = int(round((b - a) * self.fs))
        total = np.zeros(n)
        for runner in self.e._runners:
            env = runner.tx.sample(a, b, self.fs)[:n]
            total += env**2
        return total

    def _first_dip(self, agg: np.ndarray) -> int | None:
        """Earliest deep-dip onset (all bands simultaneously low)."""
        hi = float(np.percentile(agg, 95))
        if hi <= 0:
            return None
        low = agg < self.DIP_FRACTION * hi
        if not low.any():
            return None
        min_run = int(8e-6 * self.fs)
        idx = np.flatnonzero(low)
        runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
        for run in runs:
            if len(run) >= min_run:
                return int(run[0])
        return None

    def _try_decode(self, t_cand: float) -> None:
        e = self.e
        a = t_cand - 4e-6
        b = t_cand + self.max_cmd_s
        agg = self._aggregate_power(a, b)
        bits = phy.pie_decode(agg, self.fs, clock_scale=1.0)
        frame = phy.parse_command(bits) if bits is not None else None
        if frame is None:
            self.cursor = t_cand + 12e-6  # skip past this dip
            return
        cmd_dur = e.timing.frame_duration_s(frame.bits)
        cmd_end = t_cand + cmd_dur
        for idx in e.conv_tags:
            t = e.tags[idx]
            if not t.powered:
                continue
            if not self._modulated_ok(t):
                continue
            new_tag, reply = tag_mod.tag_fsm_step(t, frame)
            e.tags[idx] = new_tag
            if reply is not None:
                jitter = tag_mod.reply_start_jitter_s(new_tag, new_tag.draw_count, e.blf)
                t0 = cmd_end + e.t1 + jitter
                e.register_reply(idx, reply, t0, band_scope=None)
                if reply.kind is FrameKind.RN16_REPLY and e.cfg.reader_mode == "quin":
                    e.excitations.append((cmd_end, idx))
        self.cursor = cmd_end

    def _modulated_ok(self, t: tag_mod.TagInstance) -> bool:
        power = sum(self.e._incident_power(t, b) for b in range(self.e.k))
        modulated = power * (1.0 - (1.0 - self.e.cfg.modulation_depth) ** 2)
        return modulated >= tag_mod.min_detectable_power(t.front_end)
