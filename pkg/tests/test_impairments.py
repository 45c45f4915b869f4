import numpy as np
import pytest

from rfidsim.impairments import (
    ChannelSpec,
    GmpFitError,
    GmpModel,
    apply_cfo,
    awgn,
    default_pa_model,
    fit_gmp,
    gmp_apply,
    linear_gain,
    load_gmp,
    make_predistorter,
    nmse_db,
    path_loss_db,
    save_gmp,
    small_signal_gain,
)
from rfidsim.iq import IqStream

FS = 6.4e6


def stream(samples):
    return IqStream(samples, FS, 915e6)


def gmp_reference(coeffs, x):
    """Direct evaluation of the polynomial sum, used as the oracle."""
    coeffs = np.atleast_2d(coeffs)
    y = np.zeros(len(x), dtype=complex)
    for k in range(coeffs.shape[0]):
        for m in range(coeffs.shape[1]):
            shifted = np.concatenate([np.zeros(m, dtype=complex), x[: len(x) - m]])
            y += coeffs[k, m] * shifted * np.abs(shifted) ** k
    return y


def multitone(rng, n, amplitude=1.0, noise=0.05):
    """Two-tone envelope exercising the amplitude range up to `amplitude`."""
    t = np.arange(n) / FS
    x = 0.5 * np.exp(2j * np.pi * 0.7e6 * t) + 0.5 * np.exp(2j * np.pi * -1.1e6 * t + 1j)
    x += noise * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return amplitude * x


class TestGmpApply:
    def test_linear_identity(self):
        x = stream(np.exp(1j * np.linspace(0, 20, 500)))
        y = gmp_apply(linear_gain(2.0), x)
        assert np.allclose(y.samples, 2.0 * x.samples)

    def test_compression_on_unit_tone(self):
        coeffs = np.zeros((3, 1), dtype=complex)
        coeffs[0, 0] = 1.0
        coeffs[2, 0] = -0.1
        x = stream(np.exp(2j * np.pi * 0.1 * np.arange(400)))
        y = gmp_apply(GmpModel(coeffs), x)
        assert np.allclose(np.abs(y.samples), 0.9, atol=1e-12)

    def test_pure_delay(self):
        coeffs = np.array([[0.0, 1.0]], dtype=complex)
        rng = np.random.default_rng(1)
        x = stream(rng.standard_normal(300) + 1j * rng.standard_normal(300))
        y = gmp_apply(GmpModel(coeffs), x)
        assert np.allclose(y.samples[1:], x.samples[:-1])
        assert y.samples[0] == 0

    def test_matches_direct_reference(self):
        rng = np.random.default_rng(2)
        coeffs = (rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))) * 0.1
        coeffs[0, 0] = 1.0
        x = multitone(rng, 600)
        y = gmp_apply(GmpModel(coeffs), stream(x))
        assert np.allclose(y.samples, gmp_reference(coeffs, x), atol=1e-12)

    def test_homogeneous_for_linear_model(self):
        rng = np.random.default_rng(3)
        x = multitone(rng, 400)
        model = linear_gain(1.7 - 0.3j)
        left = gmp_apply(model, stream(2.5 * x)).samples
        right = 2.5 * gmp_apply(model, stream(x)).samples
        assert np.allclose(left, right)


class TestFitGmp:
    def test_noiseless_self_consistency(self):
        rng = np.random.default_rng(10)
        for trial in range(5):
            truth = (rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))) * 0.05
            truth[0, 0] = 1.0
            model = GmpModel(truth)
            x = stream(multitone(rng, 4000))
            y = gmp_apply(model, x)
            fitted = fit_gmp(x, y, 3, 2)
            rel = np.linalg.norm(fitted.coeffs - truth) / np.linalg.norm(truth)
            assert rel <= 1e-6, f"trial {trial}: relative error {rel:.2e}"

    def test_noisy_recovery_within_1pct(self):
        rng = np.random.default_rng(11)
        truth = np.array([[1.0, 0.02], [0.0, 0.0], [-0.08 + 0.03j, 0.004]], dtype=complex)
        model = GmpModel(truth)
        x = stream(multitone(rng, 20000))
        y = gmp_apply(model, x)
        sig = np.sqrt(np.mean(np.abs(y.samples) ** 2))
        noise = sig * 10 ** (-40 / 20) / np.sqrt(2)
        noisy = y.with_samples(
            y.samples + noise * (rng.standard_normal(len(y)) + 1j * rng.standard_normal(len(y)))
        )
        fitted = fit_gmp(x, noisy, 3, 2)
        rel = np.linalg.norm(fitted.coeffs - truth) / np.linalg.norm(truth)
        assert rel <= 0.01

    def test_linear_data_yields_linear_model(self):
        rng = np.random.default_rng(12)
        x = stream(multitone(rng, 3000))
        y = x.with_samples(3.0 * x.samples)
        fitted = fit_gmp(x, y, 3, 2)
        assert abs(fitted.coeffs[0, 0] - 3.0) < 5e-6
        others = fitted.coeffs.copy()
        others[0, 0] = 0
        assert np.max(np.abs(others)) < 5e-6

    def test_constant_drive_rejected(self):
        x = stream(np.full(2000, 0.5 + 0.1j))
        y = x
        with pytest.raises(GmpFitError):
            fit_gmp(x, y, 3, 2)

    def test_too_short_rejected(self):
        x = stream(np.ones(20, dtype=complex))
        with pytest.raises(ValueError):
            fit_gmp(x, x, 3, 2)


class TestPredistorter:
    def test_linear_pa_gives_inverse_gain(self):
        rng = np.random.default_rng(20)
        pa = linear_gain(4.0)
        training = stream(multitone(rng, 4000))
        dpd = make_predistorter(pa, training, 3, 2)
        cascade = gmp_apply(pa, gmp_apply(dpd, training))
        gain = small_signal_gain(pa)
        assert nmse_db(gain * training.samples, cascade.samples) < -80

    def test_compression_pa_improves_nmse_20db(self):
        # drive just below the 1 dB compression point, as the harness does
        rng = np.random.default_rng(21)
        pa = default_pa_model()
        training = stream(multitone(rng, 8000, amplitude=0.92, noise=0.02))
        dpd = make_predistorter(pa, training, 5, 3)
        gain = small_signal_gain(pa)
        probe = stream(multitone(np.random.default_rng(22), 8000, amplitude=0.92, noise=0.02))
        plain = gmp_apply(pa, probe)
        cascade = gmp_apply(pa, gmp_apply(dpd, probe))
        nmse_plain = nmse_db(gain * probe.samples, plain.samples)
        nmse_dpd = nmse_db(gain * probe.samples, cascade.samples)
        assert nmse_plain - nmse_dpd >= 20.0

    def test_dpd_never_hurts(self):
        rng = np.random.default_rng(23)
        for trial in range(3):
            coeffs = np.zeros((5, 2), dtype=complex)
            coeffs[0, 0] = 1.0
            coeffs[2, 0] = -0.03 * (1 + trial) + 0.01j
            coeffs[4, 0] = -0.01 - 0.005j
            pa = GmpModel(coeffs)
            training = stream(multitone(rng, 6000, amplitude=0.9, noise=0.02))
            dpd = make_predistorter(pa, training, 5, 2)
            gain = small_signal_gain(pa)
            plain = gmp_apply(pa, training)
            cascade = gmp_apply(pa, gmp_apply(dpd, training))
            assert nmse_db(gain * training.samples, cascade.samples) <= nmse_db(
                gain * training.samples, plain.samples
            )


class TestPathLoss:
    def test_friis_value_at_1m_915mhz(self):
        # independent evaluation of the formula
        expected = 20 * np.log10(4 * np.pi * 1.0 * 915e6 / 299792458.0)
        assert path_loss_db(1.0, 915e6) == pytest.approx(expected)
        assert path_loss_db(1.0, 915e6) == pytest.approx(31.68, abs=0.05)

    def test_doubling_distance_adds_6db(self):
        assert path_loss_db(4.0, 915e6) - path_loss_db(2.0, 915e6) == pytest.approx(
            20 * np.log10(2)
        )

    def test_symmetric_in_d_f_product(self):
        assert path_loss_db(2.0, 915e6) == pytest.approx(path_loss_db(915, 2e6))

    def test_nonpositive_distance_rejected(self):
        with pytest.raises(ValueError):
            path_loss_db(0.0, 915e6)


class TestAwgnAndCfo:
    def test_zero_psd_identity(self):
        x = stream(np.ones(100, dtype=complex))
        assert awgn(x, 0.0, 1) is x

    def test_noise_power_matches_psd(self):
        x = stream(np.zeros(10**6, dtype=complex))
        psd = 1e-15
        y = awgn(x, psd, seed=5)
        measured = y.power()
        assert abs(measured - psd * FS) / (psd * FS) < 0.02

    def test_reproducible_per_seed(self):
        x = stream(np.zeros(1000, dtype=complex))
        a = awgn(x, 1e-15, seed=7).samples
        b = awgn(x, 1e-15, seed=7).samples
        assert np.array_equal(a, b)

    def test_cfo_inverse_rotation(self):
        rng = np.random.default_rng(30)
        x = stream(rng.standard_normal(500) + 1j * rng.standard_normal(500))
        y = apply_cfo(apply_cfo(x, 150e3), -150e3)
        assert np.allclose(y.samples, x.samples, atol=1e-12)


class TestSerialization:
    def test_gmp_text_round_trip(self, tmp_path):
        model = default_pa_model()
        path = tmp_path / "pa.gmp"
        save_gmp(model, str(path))
        loaded = load_gmp(str(path))
        assert loaded.order_k == model.order_k
        assert loaded.memory_m == model.memory_m
        assert np.array_equal(loaded.coeffs, model.coeffs)

    def test_channel_spec_validation(self):
        with pytest.raises(ValueError):
            ChannelSpec(distance_m=0.0, frequency_hz=915e6)
