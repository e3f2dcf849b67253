"""Windowing and the 11-feature descriptor: values, invariants, schema."""

import math

import numpy as np
import pytest

from neurotwin.errors import (
    DegenerateInputError,
    InvalidBandError,
    InvalidInputError,
)
from neurotwin.features import (
    BANDS,
    FEATURE_NAMES,
    FeatureVector,
    Window,
    WindowSpec,
    assemble,
    band_power,
    extract_features,
    hjorth,
    periodogram,
    read_features_csv,
    rms,
    segment,
    spectral_entropy,
    write_features_csv,
    zcr,
)
from neurotwin.signal_chain import EegSignal

FS = 500.0


def sine_window(freq_hz, amplitude=1.0, duration_s=2.0, fs=FS, phase=0.0):
    t = np.arange(int(duration_s * fs)) / fs
    return Window(amplitude * np.sin(2 * np.pi * freq_hz * t + phase), fs)


class TestSegment:
    def test_counts_with_overlap(self):
        sig = EegSignal(np.zeros(5000) + 1.0, FS)
        assert len(segment(sig, WindowSpec(2.0, 0.5))) == 9

    def test_disjoint_tiling(self):
        sig = EegSignal(np.ones(2000), FS)
        windows = segment(sig, WindowSpec(2.0, 0.0))
        assert len(windows) == 2
        assert windows[0].start_s == 0.0
        assert windows[1].start_s == 2.0

    def test_too_short_gives_empty(self):
        sig = EegSignal(np.ones(500), FS)
        assert segment(sig, WindowSpec(2.0, 0.5)) == []

    def test_windows_index_ordered(self):
        sig = EegSignal(np.arange(5000, dtype=float) % 7 + 1.0, FS)
        windows = segment(sig, WindowSpec(2.0, 0.25))
        assert [w.index for w in windows] == list(range(len(windows)))

    def test_spec_validation(self):
        with pytest.raises(InvalidInputError):
            WindowSpec(1.0, 0.5)   # below the supported range
        with pytest.raises(InvalidInputError):
            WindowSpec(2.0, 1.0)


class TestBandPower:
    def test_alpha_tone_dominates_alpha_band(self):
        w = sine_window(10.0)
        powers = {name: band_power(w, (lo, hi)) for name, lo, hi in BANDS}
        assert max(powers, key=powers.get) == "alpha"

    def test_zero_window_zero_power(self):
        w = Window(np.zeros(1000), FS)
        for _, lo, hi in BANDS:
            assert band_power(w, (lo, hi)) == 0.0

    def test_parseval_on_random_windows(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            w = Window(rng.normal(0, 3, 1000), FS)
            freqs, power = periodogram(w)
            hann = np.hanning(1000)
            time_power = np.sum((hann * w.samples) ** 2) / np.sum(hann ** 2)
            assert abs(power.sum() - time_power) <= 1e-6 * time_power

    def test_band_sum_below_total(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            w = Window(rng.normal(0, 2, 1000), FS)
            _, power = periodogram(w)
            total = power.sum()
            band_sum = sum(band_power(w, (lo, hi)) for _, lo, hi in BANDS)
            assert band_sum <= total * (1 + 1e-6)

    def test_band_outside_nyquist_rejected(self):
        w = sine_window(10.0)
        with pytest.raises(InvalidBandError):
            band_power(w, (10.0, 300.0))
        with pytest.raises(InvalidBandError):
            band_power(w, (0.0, 4.0))


class TestZcr:
    def test_sine_crosses_twice_per_cycle(self):
        for freq in (4.0, 10.0, 25.0):
            w = sine_window(freq, duration_s=2.0)
            assert abs(zcr(w) - 2 * freq) <= 1.0 / w.duration_s + 1e-9

    def test_constant_window_zero(self):
        assert zcr(Window(np.full(1000, 2.5), FS)) == 0.0

    def test_alternating_signs(self):
        n = 500
        w = Window(np.where(np.arange(n) % 2 == 0, 1.0, -1.0), FS)
        assert zcr(w) == (n - 1) / w.duration_s

    def test_zeros_inherit_prior_sign(self):
        w = Window(np.array([1.0, 0.0, 0.0, 1.0, -1.0]), FS)
        # only the 1 -> -1 flip counts
        assert zcr(w) == 1.0 / w.duration_s


class TestHjorth:
    def test_sine_activity_is_half_square_amplitude(self):
        w = sine_window(10.0, amplitude=3.0)  # 20 cycles
        activity, _, _ = hjorth(w)
        assert abs(activity - 4.5) / 4.5 < 0.02

    def test_sine_complexity_near_one(self):
        _, _, complexity = hjorth(sine_window(10.0))
        assert abs(complexity - 1.0) < 0.05

    def test_noise_mobility_exceeds_sine_mobility(self):
        rng = np.random.default_rng(3)
        sine = sine_window(10.0)
        noise = Window(rng.normal(0, 1, 1000), FS)
        noise_scaled = Window(noise.samples * (sine.samples.std() / noise.samples.std()),
                              FS)
        assert hjorth(noise_scaled)[1] > hjorth(sine)[1]

    def test_zero_variance_raises(self):
        with pytest.raises(DegenerateInputError):
            hjorth(Window(np.full(100, 1.0), FS))


class TestRmsEntropy:
    def test_constant_rms(self):
        assert rms(Window(np.full(100, -3.0), FS)) == 3.0

    def test_sine_entropy_low(self):
        assert spectral_entropy(sine_window(10.0)) < 0.3

    def test_noise_entropy_high(self):
        rng = np.random.default_rng(7)
        assert spectral_entropy(Window(rng.normal(0, 1, 1000), FS)) > 0.9

    def test_entropy_bounds_on_random_windows(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            w = Window(rng.normal(0, rng.uniform(0.1, 5), 600), FS)
            assert 0.0 <= spectral_entropy(w) <= 1.0

    def test_zero_power_rejected(self):
        with pytest.raises(DegenerateInputError):
            spectral_entropy(Window(np.zeros(100), FS))


class TestAssemble:
    def test_eleven_fields_canonical_order(self):
        fv = assemble(sine_window(10.0))
        assert len(FEATURE_NAMES) == 11
        assert fv.as_array().shape == (11,)
        assert FEATURE_NAMES[:5] == ("delta_pw", "theta_pw", "alpha_pw",
                                     "beta_pw", "gamma_pw")

    def test_zero_window_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            assemble(Window(np.zeros(1000), FS, index=4))

    def test_alpha_dominant_synthetic(self):
        rng = np.random.default_rng(12)
        t = np.arange(1000) / FS
        samples = 10 * np.sin(2 * np.pi * 10 * t) + rng.normal(0, 1, 1000)
        fv = assemble(Window(samples, FS))
        powers = fv.as_array()[:5]
        assert int(np.argmax(powers)) == 2  # alpha slot

    def test_scaling_property(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            x = rng.normal(0, 2, 1000)
            c = rng.uniform(0.5, 4.0)
            a = assemble(Window(x, FS)).as_array()
            b = assemble(Window(c * x, FS)).as_array()
            np.testing.assert_allclose(b[:5], c ** 2 * a[:5], rtol=1e-9)   # band powers
            np.testing.assert_allclose(b[6], c ** 2 * a[6], rtol=1e-9)     # activity
            np.testing.assert_allclose(b[9], c * a[9], rtol=1e-9)          # rms
            for idx in (5, 7, 8, 10):  # zcr, mobility, complexity, entropy
                np.testing.assert_allclose(b[idx], a[idx], atol=1e-9)

    def test_extraction_order_independent(self):
        rng = np.random.default_rng(14)
        sig = EegSignal(rng.normal(0, 2, 5000), FS)
        rows = extract_features(sig, WindowSpec(2.0, 0.5))
        again = [assemble(w) for w, _ in rows[::-1]][::-1]
        for (_, fv), fv2 in zip(rows, again):
            np.testing.assert_array_equal(fv.as_array(), fv2.as_array())

    def test_feature_vector_validation(self):
        with pytest.raises(InvalidInputError):
            FeatureVector.from_array([1.0] * 10)
        with pytest.raises(InvalidInputError):
            FeatureVector.from_array([-1.0] + [1.0] * 10)
        with pytest.raises(InvalidInputError):
            FeatureVector.from_array([math.nan] + [1.0] * 10)


class TestFeatureCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        sig = EegSignal(rng.normal(0, 2, 5000), FS)
        rows = extract_features(sig, WindowSpec(2.0, 0.5))
        path = tmp_path / "features.csv"
        write_features_csv(str(path), rows)
        back = read_features_csv(str(path))
        assert len(back) == len(rows)
        for (w, fv), (idx, start_s, fv2) in zip(rows, back):
            assert idx == w.index and start_s == w.start_s
            np.testing.assert_array_equal(fv.as_array(), fv2.as_array())
