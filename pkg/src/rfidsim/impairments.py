"""RF non-idealities: PA nonlinearity with memory, DPD, path loss, noise, CFO.

The amplifier model is a generalized memory polynomial

    y(n) = sum_k sum_m a_km * x(n-m) * |x(n-m)|^k

whose coefficient matrix is estimated by least squares.  The pre-distorter
is built by indirect learning: fit a model from the gain-normalized PA
output back to the PA input and run it ahead of the PA.

All randomness flows from explicit seeds; repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .iq import IqStream

# thermal noise density at 290 K, used at the reader receiver
THERMAL_NOISE_PSD_W_PER_HZ = 4.0e-21

SPEED_OF_LIGHT = 299792458.0


class GmpFitError(ValueError):
    """Raised when the estimation basis is rank-deficient."""


@dataclass(frozen=True)
class GmpModel:
    """Coefficient matrix a_km: k indexes |x|^k order, m indexes memory."""

    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=np.complex128))
        object.__setattr__(self, "coeffs", coeffs)
        if coeffs.size == 0 or not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficient matrix must be non-empty and finite")

    @property
    def order_k(self) -> int:
        return self.coeffs.shape[0]

    @property
    def memory_m(self) -> int:
        return self.coeffs.shape[1]


def linear_gain(gain: complex) -> GmpModel:
    return GmpModel(np.array([[gain]], dtype=np.complex128))


def _gmp_basis(x: np.ndarray, order_k: int, memory_m: int) -> np.ndarray:
    """Column matrix of x(n-m)|x(n-m)|^k terms, zero-padded for n < m."""
    n = len(x)
    mag = np.abs(x)
    cols = np.empty((n, order_k * memory_m), dtype=np.complex128)
    col = 0
    for k in range(order_k):
        base = x * mag**k
        for m in range(memory_m):
            if m == 0:
                cols[:, col] = base
            else:
                cols[m:, col] = base[:-m]
                cols[:m, col] = 0.0
            col += 1
    return cols


def gmp_apply(model: GmpModel, x: IqStream) -> IqStream:
    """Run samples through the polynomial; delays shorter than the stream."""
    if len(x.samples) < model.memory_m:
        raise ValueError("stream shorter than the model memory")
    basis = _gmp_basis(x.samples, model.order_k, model.memory_m)
    y = basis @ model.coeffs.reshape(-1)
    return x.with_samples(y)


def gmp_apply_array(model: GmpModel, x: np.ndarray) -> np.ndarray:
    """Array-in/array-out variant for inner loops."""
    basis = _gmp_basis(np.asarray(x, dtype=np.complex128), model.order_k, model.memory_m)
    return basis @ model.coeffs.reshape(-1)


def fit_gmp(x: IqStream, y: IqStream, order_k: int, memory_m: int) -> GmpModel:
    """Least-squares coefficients mapping x through the polynomial onto y.

    Normal equations with a small diagonal load (1e-9 relative); columns are
    power-normalized first to keep the solve well conditioned.  Rejects a
    degenerate basis (for example constant drive) instead of returning junk.
    """
    xs, ys = np.asarray(x.samples), np.asarray(y.samples)
    if len(xs) != len(ys):
        raise ValueError("x and y must have equal length")
    if len(xs) < 10 * order_k * memory_m:
        raise ValueError("need at least 10 samples per coefficient")
    basis = _gmp_basis(xs, order_k, memory_m)
    scale = np.sqrt(np.mean(np.abs(basis) ** 2, axis=0))
    if np.any(scale < 1e-300):
        raise GmpFitError("degenerate basis: some terms vanish")
    basis = basis / scale
    a = basis.conj().T @ basis / len(xs)
    a += 1e-9 * np.eye(a.shape[0])
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > 1e8:
        raise GmpFitError(f"rank-deficient basis (condition {cond:.2e}); vary the drive")
    b = basis.conj().T @ ys / len(xs)
    coeffs = np.linalg.solve(a, b) / scale
    return GmpModel(coeffs.reshape(order_k, memory_m))


def nmse_db(reference: np.ndarray, actual: np.ndarray) -> float:
    """Normalized mean-square error of actual against reference, in dB."""
    reference = np.asarray(reference)
    actual = np.asarray(actual)
    err = np.mean(np.abs(actual - reference) ** 2)
    ref = np.mean(np.abs(reference) ** 2)
    return 10 * np.log10(max(err, 1e-300) / ref)


def small_signal_gain(pa: GmpModel) -> complex:
    """Memoryless linear term: sum over memory of the k=0 row."""
    return complex(np.sum(pa.coeffs[0, :]))


def make_predistorter(
    pa: GmpModel,
    training: IqStream,
    order_k: int,
    memory_m: int,
) -> GmpModel:
    """Indirect-learning pre-distorter for a PA model.

    Drives the PA with the training signal, fits a polynomial from the
    gain-normalized output back to the input, and returns that model; the
    cascade predistorter -> PA then approximates the plain linear gain.
    """
    y = gmp_apply(pa, training)
    gain = small_signal_gain(pa)
    if abs(gain) < 1e-12:
        raise GmpFitError("PA model has no linear gain to invert")
    normalized = y.with_samples(y.samples / gain)
    return fit_gmp(normalized, training, order_k, memory_m)


def default_pa_model() -> GmpModel:
    """Ground-truth amplifier for scenarios: odd orders to the 5th, 3 taps.

    Unit small-signal gain with about 1 dB of compression at full-scale
    drive (|x| = 1) plus weak memory terms, so the instantaneous gain
    scatters rather than tracing one curve.
    """
    coeffs = np.zeros((5, 3), dtype=np.complex128)
    coeffs[0, 0] = 1.0
    coeffs[0, 1] = 0.015 - 0.01j
    coeffs[2, 0] = -0.075 + 0.03j
    coeffs[2, 1] = -0.008 + 0.004j
    coeffs[2, 2] = 0.003 - 0.002j
    coeffs[4, 0] = -0.04 - 0.015j
    coeffs[4, 1] = -0.004 - 0.002j
    return GmpModel(coeffs)


def save_gmp(model: GmpModel, path: str) -> None:
    """Plain-text serialization: `GMP K M` header, one coefficient per line."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"GMP {model.order_k} {model.memory_m}\n")
        for c in model.coeffs.reshape(-1):
            fh.write(f"{float(c.real)!r} {float(c.imag)!r}\n")


def load_gmp(path: str) -> GmpModel:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "GMP":
            raise ValueError("not a GMP coefficient file")
        k, m = int(header[1]), int(header[2])
        values = []
        for _ in range(k * m):
            re, im = fh.readline().split()
            values.append(complex(float(re), float(im)))
    return GmpModel(np.array(values, dtype=np.complex128).reshape(k, m))


# ---------------------------------------------------------------------------
# Channel effects
# ---------------------------------------------------------------------------

def path_loss_db(distance_m: float, frequency_hz: float) -> float:
    """Free-space attenuation 20*log10(4*pi*d*f/c)."""
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    return 20.0 * np.log10(4.0 * np.pi * distance_m * frequency_hz / SPEED_OF_LIGHT)


def awgn(x: IqStream, noise_psd_w_per_hz: float, seed) -> IqStream:
    """Add circular complex Gaussian noise of the given one-sided density.

    Total added power is psd * sample_rate; `seed` may be an int or an
    existing numpy Generator (state advances in the latter case).
    """
    if noise_psd_w_per_hz < 0:
        raise ValueError("noise psd must be non-negative")
    if noise_psd_w_per_hz == 0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = np.sqrt(noise_psd_w_per_hz * x.sample_rate_hz / 2.0)
    noise = sigma * (rng.standard_normal(len(x.samples)) + 1j * rng.standard_normal(len(x.samples)))
    return x.with_samples(x.samples + noise)


def apply_cfo(x: IqStream, cfo_hz: float) -> IqStream:
    """Rotate by exp(j*2*pi*cfo*t); time referenced to the stream start."""
    if cfo_hz == 0:
        return x
    t = np.arange(len(x.samples)) / x.sample_rate_hz
    return x.with_samples(x.samples * np.exp(2j * np.pi * cfo_hz * t))


@dataclass(frozen=True)
class ChannelSpec:
    """One reader-to-tag link: geometry, receiver noise, carrier offset."""

    distance_m: float
    frequency_hz: float
    noise_psd_w_per_hz: float = 4.0e-18  # thermal floor plus receiver noise figure
    tag_noise_bandwidth_hz: float = 100e6
    cfo_hz: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ValueError("distance must be positive")
        if self.noise_psd_w_per_hz < 0:
            raise ValueError("noise psd must be non-negative")

    def one_way_loss_db(self) -> float:
        return path_loss_db(self.distance_m, self.frequency_hz)
