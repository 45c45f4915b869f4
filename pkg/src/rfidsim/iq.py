"""Complex-baseband sample streams and the IQF1 file format.

An IqStream is the signal currency passed between every processing stage:
uniformly sampled complex values plus the sample rate and the absolute RF
the stream is referenced to.  Amplitude is normalized so that |a|^2 is
power in watts (1.0 amplitude = 0 dB reference = 1 W).

Streams are immutable values; every operation returns a new stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IqStream:
    """Uniformly sampled complex baseband with rate/carrier metadata."""

    samples: np.ndarray
    sample_rate_hz: float
    center_frequency_hz: float
    start_time_s: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.complex128)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    @property
    def end_time_s(self) -> float:
        return self.start_time_s + self.duration_s

    def power(self) -> float:
        """Mean sample power |x|^2 in watts."""
        if not len(self.samples):
            return 0.0
        return float(np.mean(np.abs(self.samples) ** 2))

    def time_vector(self) -> np.ndarray:
        return self.start_time_s + np.arange(len(self.samples)) / self.sample_rate_hz

    def with_samples(self, samples: np.ndarray) -> "IqStream":
        """New stream with replaced samples, same metadata."""
        return IqStream(samples, self.sample_rate_hz, self.center_frequency_hz, self.start_time_s)


def power_dbm(power_w: float) -> float:
    return 10.0 * np.log10(max(power_w, 1e-300)) + 30.0


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def db_to_amplitude(db: float) -> float:
    return 10.0 ** (db / 20.0)


def write_iqf(stream: IqStream, path: str) -> None:
    """Dump a stream in the IQF1 format.

    Header line ``IQF1 <sample_rate_hz> <center_hz> <count>`` followed by
    interleaved little-endian float32 I,Q pairs.
    """
    samples = stream.samples.astype(np.complex64)
    interleaved = np.empty(2 * len(samples), dtype="<f4")
    interleaved[0::2] = samples.real
    interleaved[1::2] = samples.imag
    header = f"IQF1 {stream.sample_rate_hz:.6f} {stream.center_frequency_hz:.6f} {len(samples)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(interleaved.tobytes())


def read_iqf(path: str) -> IqStream:
    """Load a stream written by :func:`write_iqf`."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        parts = header.split()
        if len(parts) != 4 or parts[0] != "IQF1":
            raise ValueError(f"not an IQF1 file: header {header!r}")
        rate, center, count = float(parts[1]), float(parts[2]), int(parts[3])
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError(f"truncated IQF1 payload: expected {count} samples")
        interleaved = np.frombuffer(raw, dtype="<f4")
        samples = interleaved[0::2].astype(np.float64) + 1j * interleaved[1::2].astype(np.float64)
    return IqStream(samples, rate, center)
