import numpy as np
import pytest

from rfidsim.bands import (
    BandPlanError,
    FilterDesignError,
    design_lowpass,
    ddc,
    duc,
    make_band_plan,
)
from rfidsim.iq import IqStream


def freq_response_db(taps, freqs_hz, fs):
    """Independent response evaluation: direct DTFT sum."""
    n = np.arange(len(taps))
    w = 2 * np.pi * np.asarray(freqs_hz) / fs
    h = np.array([np.sum(taps * np.exp(-1j * wi * n)) for wi in w])
    return 20 * np.log10(np.maximum(np.abs(h), 1e-300))


def bandlimited_noise(rng, n, fs, cutoff_hz):
    """Test-signal generator independent of the package's filters."""
    from scipy.signal import firwin, lfilter

    taps = firwin(129, cutoff_hz, fs=fs)
    x = rng.standard_normal(n + 200) + 1j * rng.standard_normal(n + 200)
    y = lfilter(taps, 1.0, x)[200:]
    return y / np.sqrt(np.mean(np.abs(y) ** 2))


class TestBandPlan:
    def test_default_five_band_centers(self):
        plan = make_band_plan(5)
        centers = [b.center_hz for b in plan.bands]
        assert centers == [904.0e6, 909.5e6, 915.0e6, 920.5e6, 926.0e6]
        spacings = np.diff(centers)
        assert np.allclose(spacings, 5.5e6)

    def test_single_band_at_midpoint(self):
        plan = make_band_plan(1)
        assert plan.bands[0].center_hz == 915e6

    def test_infeasible_span_rejected(self):
        with pytest.raises(BandPlanError):
            make_band_plan(5, 915e6, 916e6, 1.6e6)

    def test_q_factor_at_least_200(self):
        plan = make_band_plan(5)
        for band in plan.bands:
            assert band.q_factor >= 200

    def test_rates(self):
        plan = make_band_plan(5)
        assert plan.composite_sample_rate_hz == 32e6
        assert plan.per_band_sample_rate_hz == 6.4e6
        assert plan.decimation == 5


class TestDesignLowpass:
    def test_example_spec_met_on_grid(self):
        fir = design_lowpass(0.8e6, 2.75e6, 60.0, 6.4e6)
        grid = np.linspace(0, 3.2e6, 4096)
        mag = freq_response_db(fir.taps, grid, 6.4e6)
        assert np.all(mag[grid >= 2.75e6] <= -60.0)
        assert np.all(mag[grid <= 0.8e6] >= -0.5)

    def test_dc_gain_unity(self):
        fir = design_lowpass(0.8e6, 2.75e6, 60.0, 6.4e6)
        gain_db = 20 * np.log10(abs(fir.dc_gain()))
        assert abs(gain_db) < 0.1

    def test_taps_symmetric(self):
        fir = design_lowpass(0.5e6, 1.5e6, 50.0, 6.4e6)
        assert np.allclose(fir.taps, fir.taps[::-1])

    def test_unmeetable_spec_rejected(self):
        with pytest.raises(FilterDesignError):
            design_lowpass(0.99e6, 1.0e6, 120.0, 6.4e6, max_taps=64)

    def test_bad_edges_rejected(self):
        with pytest.raises(FilterDesignError):
            design_lowpass(2.0e6, 1.0e6, 60.0, 6.4e6)


class TestChannelizer:
    def setup_method(self):
        self.plan = make_band_plan(5)
        self.fs = self.plan.composite_sample_rate_hz

    def composite_tone(self, offset_hz, n=40000, amp=1.0):
        t = np.arange(n) / self.fs
        return IqStream(amp * np.exp(2j * np.pi * offset_hz * t), self.fs, 915e6)

    def test_tone_at_own_center_becomes_dc(self):
        comp = self.composite_tone(self.plan.band_offset_hz(2))
        out = ddc(comp, self.plan, 2)
        body = out.samples[500:-500]
        assert np.all(np.abs(np.abs(body) - 1.0) < 0.01)
        assert np.std(np.angle(body)) < 0.01

    def test_cross_band_leakage_below_60db(self):
        comp = self.composite_tone(self.plan.band_offset_hz(1))
        out = ddc(comp, self.plan, 2)
        body = out.samples[200:-200]  # skip filter settling at the edges
        leak = float(np.mean(np.abs(body) ** 2))
        assert 10 * np.log10(leak) <= -60.0

    def test_band_index_out_of_range(self):
        comp = self.composite_tone(0.0)
        with pytest.raises(IndexError):
            ddc(comp, self.plan, 5)

    def test_round_trip_evm_below_1pct(self):
        rng = np.random.default_rng(1234)
        n = 8192
        fs_band = self.plan.per_band_sample_rate_hz
        originals = [bandlimited_noise(rng, n, fs_band, 0.8e6) for _ in range(5)]
        streams = [IqStream(x, fs_band, b.center_hz) for x, b in zip(originals, self.plan.bands)]
        comp = duc(streams, self.plan)
        for i in range(5):
            back = ddc(comp, self.plan, i)
            a = originals[i][200:-200]
            b = back.samples[200 : 200 + len(a)]
            evm = np.sqrt(np.mean(np.abs(b - a) ** 2) / np.mean(np.abs(a) ** 2))
            assert evm < 0.01, f"band {i} EVM {evm:.4f}"

    def test_duc_superposition_with_zeros(self):
        rng = np.random.default_rng(7)
        n = 4096
        fs_band = self.plan.per_band_sample_rate_hz
        x = bandlimited_noise(rng, n, fs_band, 0.8e6)
        zeros = np.zeros(n, dtype=complex)
        streams = [
            IqStream(x if i == 3 else zeros, fs_band, self.plan.bands[i].center_hz)
            for i in range(5)
        ]
        comp = duc(streams, self.plan)
        # content sits at band 3's offset: ddc of band 3 returns the signal
        back = ddc(comp, self.plan, 3)
        a = x[200:-200]
        b = back.samples[200 : 200 + len(a)]
        evm = np.sqrt(np.mean(np.abs(b - a) ** 2) / np.mean(np.abs(a) ** 2))
        assert evm < 0.01

    def test_duc_power_preserved(self):
        rng = np.random.default_rng(99)
        n = 8192
        fs_band = self.plan.per_band_sample_rate_hz
        originals = [bandlimited_noise(rng, n, fs_band, 0.8e6) for _ in range(5)]
        streams = [IqStream(x, fs_band, b.center_hz) for x, b in zip(originals, self.plan.bands)]
        comp = duc(streams, self.plan)
        total_in = sum(np.mean(np.abs(x) ** 2) for x in originals)
        # disjoint bands: composite power equals the sum of band powers
        ratio_db = 10 * np.log10(comp.power() / total_in)
        assert abs(ratio_db) < 0.2

    def test_ddc_linearity(self):
        rng = np.random.default_rng(3)
        n = 20000
        t = np.arange(n) / self.fs
        x = IqStream(np.exp(2j * np.pi * 5.5e6 * t), self.fs, 915e6)
        y = IqStream((rng.standard_normal(n) + 1j * rng.standard_normal(n)) * 0.1, self.fs, 915e6)
        a, b = 0.7 - 0.2j, 1.3 + 0.5j
        combo = IqStream(a * x.samples + b * y.samples, self.fs, 915e6)
        lhs = ddc(combo, self.plan, 3).samples
        rhs = a * ddc(x, self.plan, 3).samples + b * ddc(y, self.plan, 3).samples
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_mismatched_lengths_rejected(self):
        fs_band = self.plan.per_band_sample_rate_hz
        streams = [
            IqStream(np.zeros(100 + i, dtype=complex), fs_band, b.center_hz)
            for i, b in enumerate(self.plan.bands)
        ]
        with pytest.raises(ValueError):
            duc(streams, self.plan)

    def test_determinism(self):
        rng = np.random.default_rng(5)
        n = 10000
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        comp = IqStream(x, self.fs, 915e6)
        out1 = ddc(comp, self.plan, 1).samples
        out2 = ddc(comp, self.plan, 1).samples
        assert np.array_equal(out1, out2)
