"""Band planning and multi-band channelization.

The 902-928 MHz span is divided into equally spaced working bands with
roll-off guards between them.  A digital up converter (duc) merges per-band
baseband streams into one composite stream; a digital down converter (ddc)
isolates one band back out.  Default plan: 5 bands, 5.5 MHz spacing,
composite 32 MS/s centered on the span midpoint, 6.4 MS/s per band.

All operations here are pure and deterministic: identical inputs produce
bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .iq import IqStream

# Default plan parameters.  Integer composite/per-band ratio keeps the
# resamplers exact.
SPAN_LOW_HZ = 902e6
SPAN_HIGH_HZ = 928e6
COMPOSITE_RATE_HZ = 32e6
PER_BAND_RATE_HZ = 6.4e6
DEFAULT_PASSBAND_HZ = 1.6e6
MIN_CENTER_SPACING_HZ = 5e6
MAX_FIR_TAPS = 512


class BandPlanError(ValueError):
    """Raised when a requested plan cannot satisfy the spacing rules."""


class FilterDesignError(ValueError):
    """Raised when a filter spec cannot be met within the tap-count cap."""


@dataclass(frozen=True)
class BandSpec:
    """One working band: center frequency, 3 dB passband, one-sided guard."""

    center_hz: float
    passband_hz: float
    roll_off_hz: float

    def __post_init__(self):
        if self.passband_hz <= 0:
            raise ValueError("passband_hz must be positive")

    @property
    def q_factor(self) -> float:
        """Loaded resonance selectivity center/passband."""
        return self.center_hz / self.passband_hz


@dataclass(frozen=True)
class FirFilter:
    """Linear-phase FIR filter (symmetric real taps)."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        if not np.allclose(taps, taps[::-1], atol=1e-12):
            raise ValueError("taps must be symmetric (linear phase)")

    @property
    def group_delay_samples(self) -> float:
        return (len(self.taps) - 1) / 2

    def dc_gain(self) -> float:
        return float(np.sum(self.taps))

    def magnitude_db(self, freqs_hz: np.ndarray, sample_rate_hz: float) -> np.ndarray:
        """Magnitude response in dB at the given absolute frequencies."""
        w = 2 * np.pi * np.asarray(freqs_hz) / sample_rate_hz
        _, h = signal.freqz(self.taps, worN=w)
        return 20 * np.log10(np.maximum(np.abs(h), 1e-300))


@dataclass(frozen=True)
class BandPlan:
    """Equally spaced band layout over a span plus the two stream rates."""

    span_low_hz: float
    span_high_hz: float
    bands: tuple[BandSpec, ...]
    composite_sample_rate_hz: float = COMPOSITE_RATE_HZ
    per_band_sample_rate_hz: float = PER_BAND_RATE_HZ

    def __post_init__(self):
        if self.span_high_hz <= self.span_low_hz:
            raise ValueError("span must have positive width")
        centers = [b.center_hz for b in self.bands]
        if sorted(centers) != centers:
            raise ValueError("bands must be sorted by center frequency")
        for lo, hi in zip(self.bands, self.bands[1:]):
            spacing = hi.center_hz - lo.center_hz
            if spacing < MIN_CENTER_SPACING_HZ:
                raise ValueError(f"adjacent centers {spacing/1e6:.3f} MHz apart; need >= 5 MHz")
            guard_edge = lo.center_hz + lo.passband_hz / 2 + lo.roll_off_hz
            next_edge = hi.center_hz - hi.passband_hz / 2 - hi.roll_off_hz
            if guard_edge > next_edge:
                raise ValueError("bands overlap including guard regions")
        # 32 MS/s over the 26 MHz span: outermost band content reaches
        # +-13.5 MHz, inside the +-16 MHz Nyquist edge with margin
        span_width = self.span_high_hz - self.span_low_hz
        if self.composite_sample_rate_hz < 1.2 * span_width:
            raise ValueError("composite rate must be >= 1.2x span width")
        ratio = self.composite_sample_rate_hz / self.per_band_sample_rate_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("per-band rate must divide composite rate")

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def span_center_hz(self) -> float:
        return 0.5 * (self.span_low_hz + self.span_high_hz)

    @property
    def decimation(self) -> int:
        return int(round(self.composite_sample_rate_hz / self.per_band_sample_rate_hz))

    def band_offset_hz(self, band_index: int) -> float:
        """Band center relative to the composite stream center."""
        return self.bands[band_index].center_hz - self.span_center_hz


def make_band_plan(
    n_bands: int,
    span_low_hz: float = SPAN_LOW_HZ,
    span_high_hz: float = SPAN_HIGH_HZ,
    passband_hz: float = DEFAULT_PASSBAND_HZ,
    composite_sample_rate_hz: float = COMPOSITE_RATE_HZ,
    per_band_sample_rate_hz: float = PER_BAND_RATE_HZ,
) -> BandPlan:
    """Lay out n equally spaced bands symmetric about the span midpoint.

    Outermost centers keep a 1.25 x passband margin to the span edges, so
    the default 5-band plan over 902-928 MHz lands on 904/909.5/915/920.5/
    926 MHz with 5.5 MHz spacing.
    """
    if n_bands < 1:
        raise BandPlanError(f"n_bands must be >= 1, got {n_bands}")
    span = span_high_hz - span_low_hz
    if span <= 0:
        raise BandPlanError("span must have positive width")
    edge_margin = 1.25 * passband_hz
    if n_bands == 1:
        centers = [0.5 * (span_low_hz + span_high_hz)]
        spacing = span
    else:
        spacing = (span - 2 * edge_margin) / (n_bands - 1)
        if spacing < MIN_CENTER_SPACING_HZ:
            raise BandPlanError(
                f"span {span/1e6:.1f} MHz cannot fit {n_bands} centers at >= "
                f"{MIN_CENTER_SPACING_HZ/1e6:.0f} MHz spacing"
            )
        centers = [span_low_hz + edge_margin + i * spacing for i in range(n_bands)]
    roll_off = max((spacing - passband_hz) / 2, 0.0)
    bands = tuple(BandSpec(c, passband_hz, roll_off) for c in centers)
    return BandPlan(
        span_low_hz,
        span_high_hz,
        bands,
        composite_sample_rate_hz,
        per_band_sample_rate_hz,
    )


def design_lowpass(
    pass_hz: float,
    stop_hz: float,
    stop_atten_db: float,
    sample_rate_hz: float,
    max_taps: int = MAX_FIR_TAPS,
) -> FirFilter:
    """Windowed-sinc lowpass via a Kaiser window, unit DC gain.

    The returned filter is verified on a dense grid: passband droop must
    stay above -0.5 dB and the measured stopband at or below -stop_atten_db,
    otherwise the tap count is increased until the cap rejects the spec.
    """
    if not (0 < pass_hz < stop_hz < sample_rate_hz / 2):
        raise FilterDesignError(
            f"need 0 < pass ({pass_hz}) < stop ({stop_hz}) < Nyquist ({sample_rate_hz/2})"
        )
    width = stop_hz - pass_hz
    numtaps, beta = signal.kaiserord(stop_atten_db + 2.0, width / (sample_rate_hz / 2))
    numtaps += 1 - numtaps % 2  # keep odd length for integer group delay
    while True:
        if numtaps > max_taps:
            raise FilterDesignError(
                f"cannot meet {stop_atten_db:.0f} dB / {width/1e3:.0f} kHz transition "
                f"within {max_taps} taps"
            )
        taps = signal.firwin(
            numtaps, (pass_hz + stop_hz) / 2, window=("kaiser", beta), fs=sample_rate_hz
        )
        taps = taps / np.sum(taps)
        fir = FirFilter(taps)
        if _meets_spec(fir, pass_hz, stop_hz, stop_atten_db, sample_rate_hz):
            return fir
        numtaps += 2


def _meets_spec(fir, pass_hz, stop_hz, stop_atten_db, sample_rate_hz) -> bool:
    grid = np.linspace(0, sample_rate_hz / 2, 4096)
    mag = fir.magnitude_db(grid, sample_rate_hz)
    passband = mag[grid <= pass_hz]
    stopband = mag[grid >= stop_hz]
    return bool(np.all(passband >= -0.5) and np.all(stopband <= -stop_atten_db))


# Channelizer filter: passband covers the working band plus SAW skirts,
# stopband starts before the first alias foldover and well before the
# adjacent band center (5.5 MHz away) for >= 60 dB isolation.
_CHANNEL_PASS_HZ = 2.2e6
_CHANNEL_STOP_HZ = 3.1e6
_CHANNEL_ATTEN_DB = 72.0

_filter_cache: dict[tuple, FirFilter] = {}


def _channel_filter(sample_rate_hz: float, delay_multiple: int = 1) -> FirFilter:
    """Shared channelizer lowpass, group delay padded to a multiple of the
    decimation factor so decimated outputs stay sample-aligned."""
    key = ("chan", sample_rate_hz, delay_multiple)
    if key not in _filter_cache:
        fir = design_lowpass(
            _CHANNEL_PASS_HZ, _CHANNEL_STOP_HZ, _CHANNEL_ATTEN_DB, sample_rate_hz
        )
        gd = int(round(fir.group_delay_samples))
        pad = (-gd) % delay_multiple
        if pad:
            taps = np.concatenate([np.zeros(pad), fir.taps, np.zeros(pad)])
            fir = FirFilter(taps)
        _filter_cache[key] = fir
    return _filter_cache[key]


def ddc(composite: IqStream, plan: BandPlan, band_index: int) -> IqStream:
    """Isolate one band: mix to baseband, filter, decimate.

    Output is at the per-band rate, referenced to the band center, with
    content of every other band attenuated by >= 60 dB.  Group delay is
    compensated so the output is time-aligned with the input.
    """
    if not 0 <= band_index < plan.n_bands:
        raise IndexError(f"band_index {band_index} out of range for {plan.n_bands} bands")
    if abs(composite.sample_rate_hz - plan.composite_sample_rate_hz) > 1e-6:
        raise ValueError("composite stream rate does not match the plan")
    offset = plan.bands[band_index].center_hz - composite.center_frequency_hz
    n = np.arange(len(composite.samples))
    mixed = composite.samples * np.exp(-2j * np.pi * offset * n / composite.sample_rate_hz)
    dec = plan.decimation
    fir = _channel_filter(composite.sample_rate_hz, delay_multiple=dec)
    out = signal.upfirdn(fir.taps, mixed, up=1, down=dec)
    # filtered output index k*dec + group_delay lines up with input index k*dec
    delay = int(round(fir.group_delay_samples)) // dec
    out = out[delay : delay + len(composite.samples) // dec]
    return IqStream(
        out,
        plan.per_band_sample_rate_hz,
        plan.bands[band_index].center_hz,
        composite.start_time_s,
    )


def duc(basebands: list[IqStream], plan: BandPlan) -> IqStream:
    """Merge one per-band stream per band into the composite stream.

    Per-band power is preserved inside each passband (interpolation filter
    gain is compensated by the upsampling factor).
    """
    if len(basebands) != plan.n_bands:
        raise ValueError(f"expected {plan.n_bands} streams, got {len(basebands)}")
    lengths = {len(s.samples) for s in basebands}
    if len(lengths) != 1:
        raise ValueError(f"stream lengths differ: {sorted(lengths)}")
    for s in basebands:
        if abs(s.sample_rate_hz - plan.per_band_sample_rate_hz) > 1e-6:
            raise ValueError("baseband stream rate does not match the plan")
    up = plan.decimation
    fir = _channel_filter(plan.composite_sample_rate_hz)
    n_out = lengths.pop() * up
    total = np.zeros(n_out, dtype=np.complex128)
    n = np.arange(n_out)
    for i, stream in enumerate(basebands):
        if not np.any(stream.samples):
            continue
        interp = signal.upfirdn(fir.taps * up, stream.samples, up=up, down=1)
        delay = int(round(fir.group_delay_samples))
        interp = interp[delay : delay + n_out]
        offset = plan.band_offset_hz(i)
        total += interp * np.exp(2j * np.pi * offset * n / plan.composite_sample_rate_hz)
    return IqStream(
        total,
        plan.composite_sample_rate_hz,
        plan.span_center_hz,
        basebands[0].start_time_s,
    )
